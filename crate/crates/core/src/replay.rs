//! Episodic experience memory with hindsight command relabelling,
//! exploratory command sampling and the fixed datasets used for imitation
//! and offline learning.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::Action;

pub const DATASET_MAGIC: &str = "GUDRL-DATASET";
pub const DATASET_VERSION: &str = "v1";
pub const IL_EPISODES: usize = 5;
pub const MAX_RETURN: f64 = 500.0;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay memory is empty")]
    Empty,
    #[error("an episode ended; start a new one before appending")]
    EpisodeClosed,
    #[error("need {needed} episodes with return {MAX_RETURN}, found {found}")]
    NotEnoughExpertEpisodes { found: usize, needed: usize },
    #[error("need {needed} episodes, source holds {found}")]
    NotEnoughEpisodes { found: usize, needed: usize },
    #[error("malformed dataset header: {0:?}")]
    MalformedHeader(String),
    #[error("unsupported dataset version {found:?} (expected {DATASET_VERSION})")]
    VersionMismatch { found: String },
    #[error("dataset truncated at line {line}: {reason}")]
    Truncated { line: usize, reason: String },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: [f64; 4],
    pub action: Action,
    pub reward: f64,
    pub goal: Option<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    transitions: Vec<Transition>,
    total_return: f64,
}

impl Episode {
    /// Validates that only the last transition is terminal.
    pub fn new(transitions: Vec<Transition>) -> Option<Self> {
        let n = transitions.len();
        if n == 0 || transitions.iter().enumerate().any(|(i, t)| t.terminal != (i + 1 == n)) {
            return None;
        }
        let total_return = transitions.iter().map(|t| t.reward).sum();
        Some(Self {
            transitions,
            total_return,
        })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn total_return(&self) -> f64 {
        self.total_return
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn goal(&self) -> Option<f64> {
        self.transitions[0].goal
    }
}

/// Which command components the policy may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandMask {
    pub horizon: bool,
    pub desired_return: bool,
    pub goal: bool,
}

impl CommandMask {
    pub const ALL: CommandMask = CommandMask {
        horizon: true,
        desired_return: true,
        goal: true,
    };
    pub const NONE: CommandMask = CommandMask {
        horizon: false,
        desired_return: false,
        goal: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    /// Desired horizon in steps, at least 1.
    pub horizon: u32,
    pub desired_return: f64,
    pub goal: Option<f64>,
    pub enabled: CommandMask,
}

impl Command {
    pub fn new(horizon: u32, desired_return: f64) -> Self {
        Self {
            horizon: horizon.max(1),
            desired_return,
            goal: None,
            enabled: CommandMask::ALL,
        }
    }

    pub fn with_goal(mut self, goal: Option<f64>) -> Self {
        self.goal = goal;
        self
    }

    pub fn masked(mut self, mask: CommandMask) -> Self {
        self.enabled = CommandMask {
            horizon: self.enabled.horizon && mask.horizon,
            desired_return: self.enabled.desired_return && mask.desired_return,
            goal: self.enabled.goal && mask.goal,
        };
        self
    }
}

/// Decrements the horizon (never below 1) and the desired return by the
/// observed reward.
pub fn update_command(c: &Command, observed_reward: f64) -> Command {
    Command {
        horizon: c.horizon.saturating_sub(1).max(1),
        desired_return: c.desired_return - observed_reward,
        ..*c
    }
}

/// The previous-step tokens fed alongside each observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrevStep {
    pub action: Option<Action>,
    pub reward: f64,
    pub terminal: bool,
}

impl PrevStep {
    /// Start-of-episode marker.
    pub const START: PrevStep = PrevStep {
        action: None,
        reward: 0.0,
        terminal: true,
    };

    pub fn after(action: Action, reward: f64) -> Self {
        Self {
            action: Some(action),
            reward,
            terminal: false,
        }
    }
}

/// One supervised training element: an episode segment with hindsight
/// commands computed to the end of the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub observations: Vec<[f64; 4]>,
    pub actions: Vec<Action>,
    pub commands: Vec<Command>,
    pub prev: Vec<PrevStep>,
    /// Per-step rewards, kept for consistency checks.
    pub rewards: Vec<f64>,
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Relabels the suffix of `episode` starting at `start`. Each step `i`
/// gets horizon `T - i + 1` (steps left, counting `i`) and desired return
/// equal to the reward summed from `i` to the end. `max_len` truncates the
/// returned segment; the commands still look all the way to the end.
pub fn hindsight_segment(episode: &Episode, start: usize, max_len: Option<usize>) -> TrainingSequence {
    let ts = episode.transitions();
    assert!(start < ts.len(), "start {start} beyond episode of {}", ts.len());
    let end = max_len.map_or(ts.len(), |m| (start + m.max(1)).min(ts.len()));
    let goal = episode.goal();
    let mut to_go: f64 = ts[start..].iter().map(|t| t.reward).sum();
    let mut seq = TrainingSequence {
        observations: Vec::with_capacity(end - start),
        actions: Vec::with_capacity(end - start),
        commands: Vec::with_capacity(end - start),
        prev: Vec::with_capacity(end - start),
        rewards: Vec::with_capacity(end - start),
    };
    for i in start..end {
        let remaining = (ts.len() - i) as u32;
        seq.observations.push(ts[i].observation);
        seq.actions.push(ts[i].action);
        seq.commands.push(Command {
            horizon: remaining,
            desired_return: to_go,
            goal,
            enabled: CommandMask {
                goal: goal.is_some(),
                ..CommandMask::ALL
            },
        });
        seq.prev.push(if i == start {
            PrevStep::START
        } else {
            PrevStep::after(ts[i - 1].action, ts[i - 1].reward)
        });
        seq.rewards.push(ts[i].reward);
        to_go -= ts[i].reward;
    }
    seq
}

/// Mean and sample (n - 1) standard deviation; the deviation of a single
/// value is 0.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Bounded episodic memory. When full, the lowest-return episode (oldest
/// first among ties) is evicted.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    episodes: Vec<Episode>,
    capacity: usize,
    open: Vec<Transition>,
    closed: bool,
    rng: ChaCha8Rng,
}

impl ReplayMemory {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            episodes: Vec::new(),
            capacity,
            open: Vec::new(),
            closed: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Memory holding exactly `episodes`, sized to fit them.
    pub fn from_episodes(episodes: Vec<Episode>, seed: u64) -> Self {
        let mut m = Self::new(episodes.len().max(1), seed);
        m.episodes = episodes;
        m
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn has_open_episode(&self) -> bool {
        !self.open.is_empty()
    }

    /// Opens a new episode, discarding any unfinished transitions.
    pub fn start_episode(&mut self) {
        self.open.clear();
        self.closed = false;
    }

    /// Appends to the open episode. Returns the finished episode when
    /// `transition` is terminal; the memory then refuses further appends
    /// until [`ReplayMemory::start_episode`].
    pub fn append(&mut self, transition: Transition) -> Result<Option<Episode>, ReplayError> {
        if self.closed {
            return Err(ReplayError::EpisodeClosed);
        }
        self.open.push(transition);
        if !transition.terminal {
            return Ok(None);
        }
        self.closed = true;
        let episode = Episode::new(std::mem::take(&mut self.open))
            .expect("open transitions are non-terminal until the last");
        self.insert_episode(episode.clone());
        Ok(Some(episode))
    }

    /// Adds a complete episode, evicting if over capacity.
    pub fn insert_episode(&mut self, episode: Episode) {
        self.episodes.push(episode);
        while self.episodes.len() > self.capacity {
            let worst = self
                .episodes
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_return.total_cmp(&b.1.total_return).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .expect("non-empty");
            self.episodes.remove(worst);
        }
    }

    /// Indices of the `k` highest-return episodes, earlier episodes first
    /// among ties.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.episodes.len()).collect();
        idx.sort_by(|&a, &b| {
            self.episodes[b]
                .total_return
                .total_cmp(&self.episodes[a].total_return)
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }

    /// Samples `batch_size` episode suffixes with hindsight commands.
    pub fn sample_training_batch(
        &mut self,
        batch_size: usize,
        max_len: Option<usize>,
    ) -> Result<Vec<TrainingSequence>, ReplayError> {
        if self.episodes.is_empty() {
            return Err(ReplayError::Empty);
        }
        Ok((0..batch_size)
            .map(|_| {
                let e = self.rng.gen_range(0..self.episodes.len());
                let episode = &self.episodes[e];
                let start = self.rng.gen_range(0..episode.len());
                hindsight_segment(episode, start, max_len)
            })
            .collect())
    }

    /// Optimistic acting command from the `k` best episodes: the mean
    /// length as horizon and a return drawn from `[mean, mean + std]`.
    pub fn sample_exploratory_command(&mut self, k: usize) -> Result<Command, ReplayError> {
        let (horizon, lo, hi) = self.exploratory_bounds(k)?;
        let desired_return = if hi > lo { self.rng.gen_range(lo..=hi) } else { lo };
        Ok(Command::new(horizon, desired_return))
    }

    /// `(horizon, return low, return high)` over the top-`k` episodes.
    pub fn exploratory_bounds(&self, k: usize) -> Result<(u32, f64, f64), ReplayError> {
        if self.episodes.is_empty() {
            return Err(ReplayError::Empty);
        }
        let top = self.top_k(k.max(1));
        let returns: Vec<f64> = top.iter().map(|&i| self.episodes[i].total_return).collect();
        let lengths: Vec<f64> = top.iter().map(|&i| self.episodes[i].len() as f64).collect();
        let (mean_ret, std_ret) = mean_and_std(&returns);
        let (mean_len, _) = mean_and_std(&lengths);
        let horizon = (mean_len.round() as u32).max(1);
        Ok((horizon, mean_ret, mean_ret + std_ret))
    }

    pub fn return_stats(&self) -> (f64, f64) {
        let returns: Vec<f64> = self.episodes.iter().map(Episode::total_return).collect();
        mean_and_std(&returns)
    }

    pub fn total_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}

/// The first five episodes that reached the maximum return.
pub fn build_il_dataset(source: &ReplayMemory, seed: u64) -> Result<ReplayMemory, ReplayError> {
    let expert: Vec<Episode> = source
        .episodes()
        .iter()
        .filter(|e| e.total_return() == MAX_RETURN)
        .take(IL_EPISODES)
        .cloned()
        .collect();
    if expert.len() < IL_EPISODES {
        return Err(ReplayError::NotEnoughExpertEpisodes {
            found: expert.len(),
            needed: IL_EPISODES,
        });
    }
    Ok(ReplayMemory::from_episodes(expert, seed))
}

/// The `n` lowest-return episodes (earlier first among ties), kept in
/// collection order.
pub fn build_offline_dataset(
    source: &ReplayMemory,
    n: usize,
    seed: u64,
) -> Result<ReplayMemory, ReplayError> {
    let eps = source.episodes();
    if eps.len() < n {
        return Err(ReplayError::NotEnoughEpisodes {
            found: eps.len(),
            needed: n,
        });
    }
    let mut idx: Vec<usize> = (0..eps.len()).collect();
    idx.sort_by(|&a, &b| eps[a].total_return().total_cmp(&eps[b].total_return()).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(ReplayMemory::from_episodes(
        idx.into_iter().map(|i| eps[i].clone()).collect(),
        seed,
    ))
}

pub(crate) fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serialises the stored episodes in the line-oriented dataset format.
pub fn dataset_to_string(memory: &ReplayMemory, setting: &str) -> String {
    let mut out = String::new();
    writeln!(out, "{DATASET_MAGIC} {DATASET_VERSION} {setting} {}", memory.len()).unwrap();
    for e in memory.episodes() {
        writeln!(out, "E {} {}", e.len(), fmt_real(e.total_return())).unwrap();
        for t in e.transitions() {
            let [x, xd, th, thd] = t.observation;
            let goal = t.goal.map_or_else(|| "NA".to_string(), fmt_real);
            writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                fmt_real(x),
                fmt_real(xd),
                fmt_real(th),
                fmt_real(thd),
                t.action.index(),
                fmt_real(t.reward),
                goal,
                u8::from(t.terminal)
            )
            .unwrap();
        }
    }
    out
}

pub fn save_dataset(memory: &ReplayMemory, setting: &str, path: &Path) -> Result<(), ReplayError> {
    fs::write(path, dataset_to_string(memory, setting))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub setting: String,
    pub memory: ReplayMemory,
}

pub fn load_dataset(path: &Path, seed: u64) -> Result<LoadedDataset, ReplayError> {
    parse_dataset(&fs::read_to_string(path)?, seed)
}

pub fn parse_dataset(text: &str, seed: u64) -> Result<LoadedDataset, ReplayError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| ReplayError::MalformedHeader(String::new()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 || fields[0] != DATASET_MAGIC {
        return Err(ReplayError::MalformedHeader(header.to_string()));
    }
    if fields[1] != DATASET_VERSION {
        return Err(ReplayError::VersionMismatch {
            found: fields[1].to_string(),
        });
    }
    let setting = fields[2].to_string();
    let count: usize = fields[3]
        .parse()
        .map_err(|_| ReplayError::MalformedHeader(header.to_string()))?;

    let mut episodes = Vec::with_capacity(count);
    let mut last_line = 1;
    for e in 0..count {
        let (ln, line) = lines.next().ok_or_else(|| ReplayError::Truncated {
            line: last_line + 1,
            reason: format!("expected episode {} of {count}", e + 1),
        })?;
        let bad = |reason: String| ReplayError::MalformedRecord { line: ln, reason };
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 3 || f[0] != "E" {
            return Err(bad(format!("expected `E <length> <return>`, got {line:?}")));
        }
        let length: usize = f[1].parse().map_err(|_| bad(format!("bad length {:?}", f[1])))?;
        let stored_return: f64 = f[2].parse().map_err(|_| bad(format!("bad return {:?}", f[2])))?;
        if length == 0 {
            return Err(bad("empty episode".into()));
        }
        let mut transitions = Vec::with_capacity(length);
        last_line = ln;
        for step in 0..length {
            let (ln, line) = lines.next().ok_or_else(|| ReplayError::Truncated {
                line: last_line + 1,
                reason: format!("episode {} ends after {step} of {length} transitions", e + 1),
            })?;
            last_line = ln;
            transitions.push(parse_transition(ln, line)?);
        }
        let episode = Episode::new(transitions).ok_or_else(|| ReplayError::MalformedRecord {
            line: ln,
            reason: "terminal flag must be set on the last transition only".into(),
        })?;
        if (episode.total_return() - stored_return).abs() > 1e-9 * stored_return.abs().max(1.0) {
            return Err(ReplayError::MalformedRecord {
                line: ln,
                reason: format!(
                    "stored return {stored_return} disagrees with reward sum {}",
                    episode.total_return()
                ),
            });
        }
        episodes.push(episode);
    }
    if let Some((ln, line)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(ReplayError::MalformedRecord {
            line: ln,
            reason: format!("unexpected trailing content {line:?}"),
        });
    }
    Ok(LoadedDataset {
        setting,
        memory: ReplayMemory::from_episodes(episodes, seed),
    })
}

fn parse_transition(ln: usize, line: &str) -> Result<Transition, ReplayError> {
    let bad = |reason: String| ReplayError::MalformedRecord { line: ln, reason };
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() != 8 {
        return Err(bad(format!("expected 8 fields, got {}", f.len())));
    }
    let real = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad real {s:?}")));
    let observation = [real(f[0])?, real(f[1])?, real(f[2])?, real(f[3])?];
    let action = match f[4] {
        "0" => Action::Left,
        "1" => Action::Right,
        other => return Err(bad(format!("bad action {other:?}"))),
    };
    let reward = real(f[5])?;
    let goal = if f[6] == "NA" { None } else { Some(real(f[6])?) };
    let terminal = match f[7] {
        "0" => false,
        "1" => true,
        other => return Err(bad(format!("bad terminal flag {other:?}"))),
    };
    Ok(Transition {
        observation,
        action,
        reward,
        goal,
        terminal,
    })
}
