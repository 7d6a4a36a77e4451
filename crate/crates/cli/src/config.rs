use std::fs;
use std::path::{Path, PathBuf};

use gudrl_core::agent::{Setting, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{unwritable, CliError};

pub const CONFIG_FILE: &str = "config.txt";
pub const OUT_ENV: &str = "GUDRL_OUT";
pub const MAX_SEED: u64 = i64::MAX as u64;
/// Longest accepted seed range.
pub const MAX_SEEDS: u64 = 10_000;

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seeds: Vec<u64>,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn setting(&self) -> Setting {
        self.train.setting
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text, path)
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(unwritable(path))
    }
}

pub fn parse_setting(s: &str) -> Result<Setting, CliError> {
    s.parse().map_err(|_| CliError::UnknownSetting(s.to_string()))
}

/// Accepts `3`, an inclusive range `0..4`, or a list `0,2,5`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("invalid seed list `{s}` (use 3, 0..4 or 0,2,5)"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a || b - a >= MAX_SEEDS {
            return Err(bad());
        }
        return check_seed_range(vec![b]).map(|_| (a..=b).collect());
    }
    let seeds = s
        .split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen = seeds.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != seeds.len() {
        return Err(bad());
    }
    check_seed_range(seeds)
}

/// Seeds are stored as TOML integers, which are signed 64-bit.
fn check_seed_range(seeds: Vec<u64>) -> Result<Vec<u64>, CliError> {
    match seeds.iter().find(|&&s| s > MAX_SEED) {
        Some(s) => Err(CliError::Usage(format!("seed {s} exceeds the largest supported seed {MAX_SEED}"))),
        None => Ok(seeds),
    }
}

/// `--out` if given, else `$GUDRL_OUT/<default>`, else `runs/<default>`.
pub fn resolve_out(out: Option<PathBuf>, default: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(default)
    })
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(unwritable(dir))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(unwritable(dir))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("0,2,5").unwrap(), vec![0, 2, 5]);
        assert_eq!(parse_seeds("2..=3").unwrap(), vec![2, 3]);
        for bad in ["", "a", "4..1", "1,1", "1..x"] {
            assert!(matches!(parse_seeds(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn settings_map_to_exit_code_5() {
        let e = parse_setting("cartwheel").unwrap_err();
        assert_eq!(e.exit_code(), 5);
        assert_eq!(parse_setting("meta").unwrap(), Setting::Meta);
    }

    #[test]
    fn config_round_trips_through_toml() {
        for s in Setting::ALL {
            let c = RunConfig {
                command: "train".into(),
                seeds: vec![0, 1],
                dataset: Some("d.ds".into()),
                out: "runs/x".into(),
                train: TrainConfig::for_setting(s),
            };
            let text = c.to_toml();
            assert_eq!(RunConfig::from_toml(&text, Path::new("c")).unwrap(), c);
        }
    }
}
