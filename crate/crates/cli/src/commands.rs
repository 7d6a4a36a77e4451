use std::fs;
use std::path::{Path, PathBuf};

use gudrl_core::agent::{
    collect_episodes, evaluate, run_training, EvalReport, NeuralActor, Setting, TrainConfig, TrainCounters,
};
use gudrl_core::envs::TIME_LIMIT;
use gudrl_core::policy::{load_checkpoint, save_checkpoint, ActMode, PolicyParams};
use gudrl_core::replay::{
    build_il_dataset, build_offline_dataset, load_dataset, mean_and_std, save_dataset, Episode, ReplayError,
    ReplayMemory,
};

use crate::config::{ensure_dir, parse_seeds, parse_setting, resolve_out, RunConfig};
use crate::curve::{points_from_report, write_curve, CurvePoint};
use crate::error::{unwritable, CliError};
use crate::plot::emit_plot;

pub const CURVE_FILE: &str = "curve.csv";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const COMMANDS_FILE: &str = "commands.ds";
pub const RUN_LOG_FILE: &str = "run.log";
pub const EVAL_FILE: &str = "eval.csv";
pub const IL_DATASET_FILE: &str = "il.ds";
pub const OFFLINE_DATASET_FILE: &str = "offline.ds";
pub const OFFLINE_EPISODES: usize = 1000;
pub const DEFAULT_SEEDS: &str = "0..4";
/// Offline dataset statistics of the reference run, for comparison.
pub const REFERENCE_OFFLINE_STATS: (f64, f64) = (162.0, 195.0);

/// Overrides shared by the subcommands. `None` keeps the configured value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seeds: Option<String>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub env_steps: Option<u64>,
    pub train_steps: Option<u64>,
    pub eval_every: Option<u64>,
    pub eval_episodes: Option<usize>,
    pub greedy: bool,
}

/// Builds the run configuration from defaults, an optional saved config
/// and the command-line overrides.
pub fn resolve_config(command: &str, setting: Option<&str>, o: &Overrides) -> Result<RunConfig, CliError> {
    let loaded = o.config.as_deref().map(RunConfig::load).transpose()?;
    let setting = match (setting, &loaded) {
        (Some(s), _) => parse_setting(s)?,
        (None, Some(c)) => c.setting(),
        (None, None) => return Err(CliError::Usage("--setting is required".into())),
    };
    let mut rc = match loaded {
        Some(c) if c.setting() == setting => c,
        Some(c) => {
            return Err(CliError::Usage(format!(
                "--setting {setting} conflicts with the loaded config for `{}`",
                c.setting()
            )))
        }
        None => RunConfig {
            command: command.into(),
            seeds: parse_seeds(DEFAULT_SEEDS)?,
            dataset: None,
            out: PathBuf::new(),
            train: TrainConfig::for_setting(setting),
        },
    };
    rc.command = command.into();
    if let Some(s) = &o.seeds {
        rc.seeds = parse_seeds(s)?;
    }
    if o.dataset.is_some() {
        rc.dataset = o.dataset.clone();
    }
    if o.out.is_some() || rc.out.as_os_str().is_empty() {
        rc.out = resolve_out(o.out.clone(), setting.as_str());
    }
    let t = &mut rc.train;
    if let Some(v) = o.env_steps {
        t.env_steps = v;
    }
    if let Some(v) = o.train_steps {
        t.train_steps = v;
    }
    if let Some(v) = o.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = o.eval_episodes {
        t.eval_episodes = v;
    }
    if o.greedy {
        t.act_mode = ActMode::Greedy;
    }
    Ok(rc)
}

fn load_memory(path: &Path, seed: u64) -> Result<ReplayMemory, CliError> {
    if !path.exists() {
        return Err(CliError::DatasetNotFound(path.to_path_buf()));
    }
    load_dataset(path, seed)
        .map(|d| d.memory)
        .map_err(|source| CliError::Dataset {
            path: path.to_path_buf(),
            source,
        })
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Summary of a finished seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub reports: Vec<EvalReport>,
    pub counters: TrainCounters,
}

impl SeedResult {
    pub fn final_report(&self) -> &EvalReport {
        self.reports.last().expect("training always evaluates at least once")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub seeds: Vec<SeedResult>,
    pub dataset_mean: Option<f64>,
}

fn run_log(counters: &TrainCounters, last: &EvalReport) -> String {
    format!(
        "env_steps {}\ntrain_steps {}\nepisodes {}\nmemory_appends {}\ntraining_env_transitions {}\nfinal_mean_return {}\nfinal_std_return {}\n",
        counters.env_steps,
        counters.train_steps,
        counters.episodes,
        counters.memory_appends,
        counters.training_env_transitions,
        last.mean,
        last.std
    )
}

fn train_seed(rc: &RunConfig, seed: u64, quiet: bool) -> Result<SeedResult, CliError> {
    let setting = rc.setting();
    let dir = seed_dir(&rc.out, seed);
    ensure_dir(&dir)?;
    RunConfig {
        seeds: vec![seed],
        ..rc.clone()
    }
    .save(&dir)?;
    let memory = match &rc.dataset {
        Some(p) if !setting.interacts_with_env() => Some(load_memory(p, seed)?),
        _ => None,
    };
    let (reports, trainer) = run_training(rc.train.clone(), seed, memory, |r| {
        if !quiet {
            eprintln!("[{setting} seed {seed}] progress {:>7}  return {:7.2} ± {:6.2}", r.progress, r.mean, r.std);
        }
    })?;
    let points: Vec<CurvePoint> = reports.iter().flat_map(|r| points_from_report(r, seed)).collect();
    write_curve(&dir.join(CURVE_FILE), &points)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(trainer.params(), &ckpt).map_err(|e| CliError::Unwritable {
        path: ckpt.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    if setting.interacts_with_env() && !trainer.memory().is_empty() {
        let top: Vec<Episode> = trainer
            .memory()
            .top_k(rc.train.top_k)
            .into_iter()
            .map(|i| trainer.memory().episodes()[i].clone())
            .collect();
        let path = dir.join(COMMANDS_FILE);
        save_dataset(&ReplayMemory::from_episodes(top, seed), setting.as_str(), &path)
            .map_err(|e| CliError::Unwritable {
                path: path.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
    }
    let counters = trainer.counters();
    let last = reports.last().expect("at least one report");
    fs::write(dir.join(RUN_LOG_FILE), run_log(&counters, last)).map_err(unwritable(dir.join(RUN_LOG_FILE)))?;
    Ok(SeedResult {
        seed,
        reports,
        counters,
    })
}

/// Trains every requested seed and writes per-seed curves, checkpoints and
/// logs plus an aggregate curve and plot.
pub fn cmd_train(setting: Option<&str>, o: &Overrides, quiet: bool) -> Result<TrainOutcome, CliError> {
    let rc = resolve_config("train", setting, o)?;
    let setting = rc.setting();
    let mut dataset_mean = None;
    if !setting.interacts_with_env() {
        let path = rc.dataset.clone().ok_or_else(|| CliError::MissingDataset(setting.to_string()))?;
        dataset_mean = Some(load_memory(&path, 0)?.return_stats().0);
    }
    ensure_dir(&rc.out)?;
    rc.save(&rc.out)?;
    let mut results = Vec::new();
    let mut failed = Vec::new();
    for &seed in &rc.seeds {
        match train_seed(&rc, seed, quiet) {
            Ok(r) => results.push(r),
            Err(e @ (CliError::Unwritable { .. } | CliError::Dataset { .. } | CliError::DatasetNotFound(_))) => {
                return Err(e)
            }
            Err(e) => {
                eprintln!("seed {seed} failed: {e}");
                failed.push(format!("{seed} ({e})"));
            }
        }
    }
    let points: Vec<CurvePoint> = results
        .iter()
        .flat_map(|r| r.reports.iter().flat_map(|rep| points_from_report(rep, r.seed)))
        .collect();
    write_curve(&rc.out.join(CURVE_FILE), &points)?;
    let plot = rc.out.join(format!("{setting}.svg"));
    fs::write(&plot, emit_plot(&points, setting, dataset_mean)).map_err(unwritable(&plot))?;
    if !failed.is_empty() {
        return Err(CliError::SeedsFailed(failed.join(", ")));
    }
    Ok(TrainOutcome {
        config: rc,
        seeds: results,
        dataset_mean,
    })
}

/// Evaluates a checkpoint once per seed, prints a per-condition table and
/// writes `eval.csv`.
pub fn cmd_eval(setting: Option<&str>, ckpt: &Path, o: &Overrides, quiet: bool) -> Result<Vec<EvalReport>, CliError> {
    let mut o = o.clone();
    if o.seeds.is_none() && o.config.is_none() {
        o.seeds = Some("0".into());
    }
    let rc = resolve_config("eval", setting, &o)?;
    let params = load_checkpoint(ckpt, rc.train.policy).map_err(|source| CliError::Checkpoint {
        path: ckpt.to_path_buf(),
        source,
    })?;
    let beside = ckpt.with_file_name(COMMANDS_FILE);
    let memory = match &rc.dataset {
        Some(p) => Some(load_memory(p, 0)?),
        None if beside.exists() => Some(load_memory(&beside, 0)?),
        None => None,
    };
    ensure_dir(&rc.out)?;
    let actor = NeuralActor {
        params: &params,
        mode: rc.train.act_mode,
    };
    let mut reports = Vec::new();
    let mut points = Vec::new();
    for &seed in &rc.seeds {
        let r = evaluate(&actor, &rc.train, memory.as_ref(), seed, 0)?;
        if !quiet {
            println!("seed {seed}: mean return {:.2} ± {:.2}", r.mean, r.std);
            println!("  {:<40} {:>10} {:>10} {:>9}", "condition", "mean", "std", "episodes");
            for c in &r.conditions {
                println!("  {:<40} {:>10.2} {:>10.2} {:>9}", c.label, c.mean, c.std, c.returns.len());
            }
        }
        points.extend(points_from_report(&r, seed));
        reports.push(r);
    }
    write_curve(&rc.out.join(EVAL_FILE), &points)?;
    Ok(reports)
}

#[derive(Debug, Clone)]
pub struct GeneratedDatasets {
    pub il: ReplayMemory,
    pub offline: ReplayMemory,
    pub il_path: PathBuf,
    pub offline_path: PathBuf,
    pub offline_stats: (f64, f64),
}

/// Rolls out an online agent (trained first if requested) and writes the
/// imitation and offline datasets.
pub fn cmd_gen_dataset(
    ckpt: Option<&Path>,
    train_first: bool,
    rollouts: usize,
    o: &Overrides,
    quiet: bool,
) -> Result<GeneratedDatasets, CliError> {
    let mut o = o.clone();
    if o.seeds.is_none() && o.config.is_none() {
        o.seeds = Some("0".into());
    }
    if o.out.is_none() {
        o.out = Some(resolve_out(None, "datasets"));
    }
    let rc = resolve_config("gen-dataset", Some(Setting::Online.as_str()), &o)?;
    let &[seed] = rc.seeds.as_slice() else {
        return Err(CliError::Usage("gen-dataset takes a single seed".into()));
    };
    ensure_dir(&rc.out)?;
    rc.save(&rc.out)?;
    let (params, archive): (PolicyParams, Vec<Episode>) = match (ckpt, train_first) {
        (_, true) => {
            let mut train = rc.train.clone();
            train.keep_archive = true;
            let (reports, trainer) = run_training(train, seed, None, |r| {
                if !quiet {
                    eprintln!("[online seed {seed}] progress {:>7}  return {:7.2} ± {:6.2}", r.progress, r.mean, r.std);
                }
            })?;
            let points: Vec<CurvePoint> = reports.iter().flat_map(|r| points_from_report(r, seed)).collect();
            write_curve(&rc.out.join(CURVE_FILE), &points)?;
            let path = rc.out.join(CHECKPOINT_FILE);
            save_checkpoint(trainer.params(), &path).map_err(|e| CliError::Unwritable {
                path: path.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
            (trainer.params().clone(), trainer.archive().to_vec())
        }
        (Some(p), false) => {
            let params = load_checkpoint(p, rc.train.policy).map_err(|source| CliError::Checkpoint {
                path: p.to_path_buf(),
                source,
            })?;
            (params, Vec::new())
        }
        (None, false) => return Err(CliError::Usage("gen-dataset needs --ckpt <FILE> or --train-first".into())),
    };
    let (il, offline) = build_datasets(&params, archive, &rc.train, rollouts, seed)?;
    let il_path = rc.out.join(IL_DATASET_FILE);
    let offline_path = rc.out.join(OFFLINE_DATASET_FILE);
    for (mem, name, path) in [(&il, "il", &il_path), (&offline, "offline", &offline_path)] {
        save_dataset(mem, name, path).map_err(|e| CliError::Unwritable {
            path: path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    let returns: Vec<f64> = offline.episodes().iter().map(Episode::total_return).collect();
    let offline_stats = mean_and_std(&returns);
    if !quiet {
        println!("wrote {} ({} episodes)", il_path.display(), il.len());
        println!(
            "wrote {} ({} episodes): return {:.1} ± {:.1} (reference run: {:.0} ± {:.0})",
            offline_path.display(),
            offline.len(),
            offline_stats.0,
            offline_stats.1,
            REFERENCE_OFFLINE_STATS.0,
            REFERENCE_OFFLINE_STATS.1
        );
    }
    Ok(GeneratedDatasets {
        il,
        offline,
        il_path,
        offline_path,
        offline_stats,
    })
}

/// Rolls out `params` and builds the imitation dataset from the rollouts
/// and the offline dataset from the worst episodes of `archive` plus the
/// rollouts.
pub fn build_datasets(
    params: &PolicyParams,
    archive: Vec<Episode>,
    config: &TrainConfig,
    rollouts: usize,
    seed: u64,
) -> Result<(ReplayMemory, ReplayMemory), CliError> {
    let actor = NeuralActor {
        params,
        mode: config.act_mode,
    };
    let rolled = collect_episodes(&actor, config, None, rollouts, seed ^ 0x5EED)?;
    let best = rolled.iter().filter(|e| e.total_return() >= TIME_LIMIT as f64).count();
    let il = build_il_dataset(&ReplayMemory::from_episodes(rolled.clone(), seed), seed).map_err(|e| match e {
        ReplayError::NotEnoughExpertEpisodes { .. } => CliError::NotEnoughData(format!(
            "only {best} of {rollouts} rollouts reached return {TIME_LIMIT}; train the online agent longer (--env-steps) or raise --rollouts"
        )),
        other => CliError::Agent(other.into()),
    })?;
    let mut pool = archive;
    pool.extend(rolled);
    let available = pool.len();
    let offline = build_offline_dataset(&ReplayMemory::from_episodes(pool, seed), OFFLINE_EPISODES, seed).map_err(
        |e| match e {
            ReplayError::NotEnoughEpisodes { .. } => CliError::NotEnoughData(format!(
                "only {available} episodes available for the offline dataset, {OFFLINE_EPISODES} needed; raise --rollouts"
            )),
            other => CliError::Agent(other.into()),
        },
    )?;
    Ok((il, offline))
}

/// Writes one plot for `setting` from the given curve files.
pub fn cmd_plot(setting: &str, curves: &[PathBuf], dataset: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let setting = parse_setting(setting)?;
    if curves.is_empty() {
        return Err(CliError::Usage("plot needs at least one curve file".into()));
    }
    let mut points = Vec::new();
    for c in curves {
        points.extend(crate::curve::read_curve(c)?);
    }
    let dataset_mean = dataset.map(|p| load_memory(p, 0)).transpose()?.map(|m| m.return_stats().0);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(out, emit_plot(&points, setting, dataset_mean)).map_err(unwritable(out))
}
