//! Acting, hindsight training and evaluation for each experimental setting.
//!
//! Online settings (`online`, `gcrl`, `meta`) interleave acting with
//! gradient steps on batches drawn from the replay memory. The `il` and
//! `offline` settings never touch the environment during training: they
//! optimise on a fixed memory and only interact to evaluate.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, AdamState, AutodiffError};
use crate::envs::{meta_eval_grid, Action, CartPole, EnvError, EnvKind, EnvParams, EVAL_GOALS, TIME_LIMIT};
use crate::policy::{
    act, loss_and_grad, policy_forward_batch, ActMode, CommandTokenSet, HiddenState, PolicyConfig,
    PolicyError, PolicyParams, TokenMask,
};
use crate::replay::{
    mean_and_std, update_command, Command, CommandMask, Episode, ReplayError, ReplayMemory, Transition,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("setting `{0}` trains on a fixed dataset but the memory is empty")]
    EmptyMemory(Setting),
    #[error("parameters became non-finite after training step {0}")]
    NonFinite(u64),
    #[error("unknown setting `{0}` (expected online, il, offline, gcrl or meta)")]
    UnknownSetting(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Online,
    Il,
    Offline,
    Gcrl,
    Meta,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::Online, Setting::Il, Setting::Offline, Setting::Gcrl, Setting::Meta];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Online => "online",
            Setting::Il => "il",
            Setting::Offline => "offline",
            Setting::Gcrl => "gcrl",
            Setting::Meta => "meta",
        }
    }

    pub fn env_kind(self) -> EnvKind {
        match self {
            Setting::Gcrl => EnvKind::Gcrl,
            Setting::Meta => EnvKind::Meta,
            _ => EnvKind::Standard,
        }
    }

    /// Whether training interacts with the environment.
    pub fn interacts_with_env(self) -> bool {
        !matches!(self, Setting::Il | Setting::Offline)
    }

    pub fn tokens(self) -> TokenMask {
        match self {
            Setting::Il => TokenMask {
                horizon: true,
                desired_return: false,
                goal: false,
                prev_action: true,
                prev_reward: false,
                prev_terminal: true,
            },
            Setting::Gcrl => TokenMask::ALL,
            _ => TokenMask {
                goal: false,
                ..TokenMask::ALL
            },
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Setting::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AgentError::UnknownSetting(s.to_string()))
    }
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub setting: Setting,
    /// Tokens fed to the policy.
    pub tokens: TokenMask,
    pub policy: PolicyConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Longest training segment; commands are still computed to the end of
    /// the episode.
    pub window: usize,
    pub capacity: usize,
    pub top_k: usize,
    /// Episodes collected before the first gradient step (online settings).
    pub warmup_episodes: usize,
    /// Environment steps between gradient steps (online settings).
    pub train_every: usize,
    /// Environment-step budget (online settings).
    pub env_steps: u64,
    /// Gradient-step budget (fixed-dataset settings).
    pub train_steps: u64,
    /// Progress units between evaluations: environment steps online,
    /// gradient steps otherwise.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub grad_clip: f64,
    pub act_mode: ActMode,
    /// Keep every finished training episode for dataset generation.
    pub keep_archive: bool,
}

impl TrainConfig {
    pub fn for_setting(setting: Setting) -> Self {
        let base = Self {
            setting,
            tokens: setting.tokens(),
            policy: PolicyConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 32,
            window: 16,
            capacity: 700,
            top_k: 20,
            warmup_episodes: 50,
            train_every: 8,
            env_steps: 100_000,
            train_steps: 0,
            eval_every: 5_000,
            eval_episodes: 10,
            grad_clip: 10.0,
            act_mode: ActMode::Sample,
            keep_archive: false,
        };
        match setting {
            Setting::Il => Self {
                env_steps: 0,
                train_steps: 10_000,
                eval_every: 100,
                ..base
            },
            Setting::Offline => Self {
                env_steps: 0,
                train_steps: 2_000,
                eval_every: 100,
                ..base
            },
            Setting::Online => Self {
                env_steps: 200_000,
                ..base
            },
            Setting::Gcrl | Setting::Meta => Self {
                env_steps: 60_000,
                ..base
            },
        }
    }

    pub fn command_mask(&self) -> CommandMask {
        CommandMask {
            horizon: self.tokens.horizon,
            desired_return: self.tokens.desired_return,
            goal: self.tokens.goal,
        }
    }

    /// Total progress units for this setting.
    pub fn budget(&self) -> u64 {
        if self.setting.interacts_with_env() {
            self.env_steps
        } else {
            self.train_steps
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub label: String,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub progress: u64,
    pub conditions: Vec<ConditionReport>,
    pub mean: f64,
    pub std: f64,
}

/// One evaluation condition: fixed physics and optional goal.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCondition {
    pub label: String,
    pub params: EnvParams,
    pub goal: Option<f64>,
}

pub fn eval_conditions(setting: Setting) -> Vec<EvalCondition> {
    match setting {
        Setting::Gcrl => EVAL_GOALS
            .iter()
            .map(|&g| EvalCondition {
                label: format!("goal={g}"),
                params: EnvParams::canonical(),
                goal: Some(g),
            })
            .collect(),
        Setting::Meta => meta_eval_grid()
            .into_iter()
            .map(|p| {
                let (l, m, f) = p.meta_triple();
                EvalCondition {
                    label: format!("half_length={l};mass={m};force={f}"),
                    params: p,
                    goal: None,
                }
            })
            .collect(),
        _ => vec![EvalCondition {
            label: "all".into(),
            params: EnvParams::canonical(),
            goal: None,
        }],
    }
}

/// Episodes per condition: the total split evenly, rounded up, at least 2
/// when there is more than one condition.
pub fn episodes_per_condition(total: usize, conditions: usize) -> usize {
    if conditions <= 1 {
        total.max(1)
    } else {
        total.div_ceil(conditions).max(2)
    }
}

/// Anything that can choose actions for a batch of concurrent episodes.
pub trait BatchActor {
    fn act_batch(
        &self,
        observations: &[[f64; 4]],
        tokens: &[CommandTokenSet],
        hidden: &mut [HiddenState],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>, AgentError>;
}

pub struct NeuralActor<'a> {
    pub params: &'a PolicyParams,
    pub mode: ActMode,
}

impl BatchActor for NeuralActor<'_> {
    fn act_batch(
        &self,
        observations: &[[f64; 4]],
        tokens: &[CommandTokenSet],
        hidden: &mut [HiddenState],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>, AgentError> {
        let (dists, next) = policy_forward_batch(self.params, observations, tokens, hidden)?;
        hidden.iter_mut().zip(next).for_each(|(h, n)| *h = n);
        Ok(dists.iter().map(|d| act(d, rng, self.mode)).collect())
    }
}

/// Uniformly random actions.
pub struct RandomActor;

impl BatchActor for RandomActor {
    fn act_batch(
        &self,
        observations: &[[f64; 4]],
        _: &[CommandTokenSet],
        _: &mut [HiddenState],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>, AgentError> {
        Ok(observations
            .iter()
            .map(|_| if rng.gen_bool(0.5) { Action::Right } else { Action::Left })
            .collect())
    }
}

/// Always the same action.
pub struct ConstantActor(pub Action);

impl BatchActor for ConstantActor {
    fn act_batch(
        &self,
        observations: &[[f64; 4]],
        _: &[CommandTokenSet],
        _: &mut [HiddenState],
        _: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>, AgentError> {
        Ok(vec![self.0; observations.len()])
    }
}

/// Command used at the start of an evaluation episode.
fn eval_command(
    config: &TrainConfig,
    memory: Option<&ReplayMemory>,
    goal: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Command {
    let sampled = memory.and_then(|m| m.exploratory_bounds(config.top_k).ok());
    let c = match (config.setting, sampled) {
        (Setting::Offline, Some((h, lo, hi))) => Command::new(h, uniform(rng, lo, hi)),
        (Setting::Gcrl, Some((_, lo, hi))) => Command::new(TIME_LIMIT, uniform(rng, lo, hi)),
        _ => Command::new(TIME_LIMIT, TIME_LIMIT as f64),
    };
    c.with_goal(goal).masked(config.command_mask())
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Runs every evaluation condition in lockstep and reports the returns.
/// `memory` supplies exploratory command statistics where the setting uses
/// them; it is only read.
pub fn evaluate(
    actor: &dyn BatchActor,
    config: &TrainConfig,
    memory: Option<&ReplayMemory>,
    seed: u64,
    progress: u64,
) -> Result<EvalReport, AgentError> {
    let conditions = eval_conditions(config.setting);
    let per = episodes_per_condition(config.eval_episodes, conditions.len());
    let starts: Vec<Option<(EnvParams, Option<f64>)>> = conditions
        .iter()
        .flat_map(|c| std::iter::repeat(Some((c.params, c.goal))).take(per))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (returns, _) = run_episodes(actor, config, memory, &starts, &mut rng, false)?;
    let reports: Vec<ConditionReport> = conditions
        .iter()
        .zip(returns.chunks(per))
        .map(|(c, r)| {
            let (mean, std) = mean_and_std(r);
            ConditionReport {
                label: c.label.clone(),
                returns: r.to_vec(),
                mean,
                std,
            }
        })
        .collect();
    let (mean, std) = mean_and_std(&returns);
    Ok(EvalReport {
        progress,
        conditions: reports,
        mean,
        std,
    })
}

/// Plays `n` episodes from freshly sampled starts with evaluation commands
/// and returns them in start order.
pub fn collect_episodes(
    actor: &dyn BatchActor,
    config: &TrainConfig,
    memory: Option<&ReplayMemory>,
    n: usize,
    seed: u64,
) -> Result<Vec<Episode>, AgentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, episodes) = run_episodes(actor, config, memory, &vec![None; n], &mut rng, true)?;
    Ok(episodes)
}

/// Lockstep rollouts. A start of `None` samples physics and goal the way
/// training does.
fn run_episodes(
    actor: &dyn BatchActor,
    config: &TrainConfig,
    memory: Option<&ReplayMemory>,
    starts: &[Option<(EnvParams, Option<f64>)>],
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<(Vec<f64>, Vec<Episode>), AgentError> {
    let n = starts.len();
    let mut envs = Vec::with_capacity(n);
    let mut obs = Vec::with_capacity(n);
    let mut goals = Vec::with_capacity(n);
    let mut commands = Vec::with_capacity(n);
    for start in starts {
        let mut env = CartPole::new(config.setting.env_kind(), rng);
        let (o, goal) = match start {
            Some((params, goal)) => env.reset_with(*params, *goal, rng),
            None => env.reset(rng),
        };
        commands.push(eval_command(config, memory, goal, rng));
        envs.push(env);
        obs.push(o);
        goals.push(goal);
    }
    let mut hidden = vec![HiddenState::reset(&config.policy); n];
    let mut returns = vec![0.0; n];
    let mut trajectories: Vec<Vec<Transition>> = vec![Vec::new(); if record { n } else { 0 }];
    let mut live: Vec<usize> = (0..n).collect();
    while !live.is_empty() {
        let o: Vec<[f64; 4]> = live.iter().map(|&i| obs[i]).collect();
        let toks: Vec<CommandTokenSet> = live
            .iter()
            .map(|&i| {
                CommandTokenSet::build(&commands[i], &hidden[i].prev, &config.tokens, config.policy.command_scale)
            })
            .collect();
        let mut hs: Vec<HiddenState> = live.iter().map(|&i| hidden[i].clone()).collect();
        let actions = actor.act_batch(&o, &toks, &mut hs, rng)?;
        let mut still = Vec::with_capacity(live.len());
        for ((&i, a), mut h) in live.iter().zip(actions).zip(hs) {
            let r = envs[i].step(a)?;
            if record {
                trajectories[i].push(Transition {
                    observation: obs[i],
                    action: a,
                    reward: r.reward,
                    goal: goals[i],
                    terminal: r.terminal,
                });
            }
            returns[i] += r.reward;
            h.observe(a, r.reward);
            hidden[i] = h;
            obs[i] = r.observation;
            commands[i] = update_command(&commands[i], r.reward);
            if !r.terminal {
                still.push(i);
            }
        }
        live = still;
    }
    let episodes = trajectories
        .into_iter()
        .map(|t| Episode::new(t).expect("rollouts end with exactly one terminal step"))
        .collect();
    Ok((returns, episodes))
}

/// The state of one live training episode.
#[derive(Debug, Clone)]
struct Live {
    observation: [f64; 4],
    goal: Option<f64>,
    command: Command,
    hidden: HiddenState,
}

/// What happened during one environment step of training.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub command_before: Command,
    pub command_after: Command,
    pub action: Action,
    pub reward: f64,
    pub terminal: bool,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainCounters {
    pub env_steps: u64,
    pub train_steps: u64,
    pub episodes: u64,
    pub memory_appends: u64,
    /// Transitions executed by the training environment, evaluation
    /// excluded.
    pub training_env_transitions: u64,
}

/// A single training run for one seed.
pub struct Trainer {
    config: TrainConfig,
    seed: u64,
    params: PolicyParams,
    adam: AdamState,
    memory: ReplayMemory,
    env: CartPole,
    rng: ChaCha8Rng,
    live: Option<Live>,
    counters: TrainCounters,
    archive: Vec<Episode>,
    last_loss: Option<f64>,
}

impl Trainer {
    /// Fixed-dataset settings require `memory`; online settings start from
    /// an empty memory when it is `None`.
    pub fn new(config: TrainConfig, seed: u64, memory: Option<ReplayMemory>) -> Result<Self, AgentError> {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let param_seed = master.gen();
        let memory_seed = master.gen();
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
        let memory = match memory {
            Some(mut m) => {
                m.reseed(memory_seed);
                m
            }
            None => ReplayMemory::new(config.capacity, memory_seed),
        };
        if !config.setting.interacts_with_env() && memory.is_empty() {
            return Err(AgentError::EmptyMemory(config.setting));
        }
        let params = PolicyParams::init(config.policy, param_seed);
        let adam = AdamState::new(params.store(), config.adam);
        let env = CartPole::new(config.setting.env_kind(), &mut rng);
        Ok(Self {
            config,
            seed,
            params,
            adam,
            memory,
            env,
            rng,
            live: None,
            counters: TrainCounters::default(),
            archive: Vec::new(),
            last_loss: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn memory(&self) -> &ReplayMemory {
        &self.memory
    }

    pub fn counters(&self) -> TrainCounters {
        TrainCounters {
            training_env_transitions: self.env.transitions(),
            ..self.counters
        }
    }

    pub fn archive(&self) -> &[Episode] {
        &self.archive
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    /// The command of the live episode, if any.
    pub fn live_command(&self) -> Option<Command> {
        self.live.as_ref().map(|l| l.command)
    }

    /// Starts a training episode: resets the environment and recurrent
    /// state and draws an exploratory command (optimistic when the memory
    /// is empty).
    pub fn reset_routine(&mut self) -> Result<([f64; 4], Option<f64>, Command), AgentError> {
        let (observation, goal) = self.env.reset(&mut self.rng);
        self.memory.start_episode();
        let command = if self.memory.is_empty() {
            Command::new(TIME_LIMIT, TIME_LIMIT as f64)
        } else {
            self.memory.sample_exploratory_command(self.config.top_k)?
        }
        .with_goal(goal)
        .masked(self.config.command_mask());
        self.live = Some(Live {
            observation,
            goal,
            command,
            hidden: HiddenState::reset(&self.config.policy),
        });
        Ok((observation, goal, command))
    }

    /// One environment step of an online setting, followed by a gradient
    /// step when the cadence calls for one.
    pub fn env_step(&mut self) -> Result<StepRecord, AgentError> {
        if self.live.is_none() {
            self.reset_routine()?;
        }
        let live = self.live.as_mut().expect("episode started above");
        let tokens = CommandTokenSet::build(
            &live.command,
            &live.hidden.prev,
            &self.config.tokens,
            self.config.policy.command_scale,
        );
        let mut hs = [live.hidden.clone()];
        let actor = NeuralActor {
            params: &self.params,
            mode: self.config.act_mode,
        };
        let action = actor.act_batch(&[live.observation], &[tokens], &mut hs, &mut self.rng)?[0];
        let [mut hidden] = hs;
        let result = self.env.step(action)?;
        let finished = self.memory.append(Transition {
            observation: live.observation,
            action,
            reward: result.reward,
            goal: live.goal,
            terminal: result.terminal,
        })?;
        self.counters.memory_appends += 1;
        self.counters.env_steps += 1;
        hidden.observe(action, result.reward);
        let before = live.command;
        let after = update_command(&before, result.reward);
        live.command = after;
        live.hidden = hidden;
        live.observation = result.observation;
        if result.terminal {
            self.live = None;
            self.counters.episodes += 1;
            if let (true, Some(ep)) = (self.config.keep_archive, finished) {
                self.archive.push(ep);
            }
        }
        let loss = if self.counters.episodes >= self.config.warmup_episodes as u64
            && self.counters.env_steps % self.config.train_every as u64 == 0
        {
            Some(self.train_step()?)
        } else {
            None
        };
        Ok(StepRecord {
            command_before: before,
            command_after: after,
            action,
            reward: result.reward,
            terminal: result.terminal,
            loss,
        })
    }

    /// One gradient step on a batch sampled from memory.
    pub fn train_step(&mut self) -> Result<f64, AgentError> {
        let batch = self
            .memory
            .sample_training_batch(self.config.batch_size, Some(self.config.window))?;
        let loss = loss_and_grad(&mut self.params, &batch, &self.config.tokens)?;
        self.params.store_mut().clip_grad_norm(self.config.grad_clip);
        adam_step(self.params.store_mut(), &mut self.adam)?;
        self.counters.train_steps += 1;
        if !self.params.all_finite() {
            return Err(AgentError::NonFinite(self.counters.train_steps));
        }
        self.last_loss = Some(loss);
        Ok(loss)
    }

    pub fn progress(&self) -> u64 {
        if self.config.setting.interacts_with_env() {
            self.counters.env_steps
        } else {
            self.counters.train_steps
        }
    }

    /// Evaluates the current parameters. The seed depends only on the run
    /// seed and the progress counter.
    pub fn evaluate(&self) -> Result<EvalReport, AgentError> {
        let actor = NeuralActor {
            params: &self.params,
            mode: self.config.act_mode,
        };
        let memory = (!self.memory.is_empty()).then_some(&self.memory);
        let eval_seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.progress();
        evaluate(&actor, &self.config, memory, eval_seed, self.progress())
    }

    /// Advances by one progress unit: an environment step online, a
    /// gradient step otherwise.
    pub fn advance(&mut self) -> Result<(), AgentError> {
        if self.config.setting.interacts_with_env() {
            self.env_step()?;
        } else {
            self.train_step()?;
        }
        Ok(())
    }

    /// Trains to the budget, evaluating at progress 0, every `eval_every`
    /// units and at the end. Each report is passed to `on_report` as it is
    /// produced.
    pub fn run(&mut self, mut on_report: impl FnMut(&EvalReport)) -> Result<Vec<EvalReport>, AgentError> {
        let budget = self.config.budget();
        let every = self.config.eval_every.max(1);
        let mut reports = Vec::new();
        let mut emit = |r: EvalReport, reports: &mut Vec<EvalReport>| {
            on_report(&r);
            reports.push(r);
        };
        emit(self.evaluate()?, &mut reports);
        while self.progress() < budget {
            self.advance()?;
            let p = self.progress();
            if p % every == 0 || p == budget {
                emit(self.evaluate()?, &mut reports);
            }
        }
        Ok(reports)
    }
}

/// Trains one seed and returns its evaluation reports and the trainer.
pub fn run_training(
    config: TrainConfig,
    seed: u64,
    memory: Option<ReplayMemory>,
    on_report: impl FnMut(&EvalReport),
) -> Result<(Vec<EvalReport>, Trainer), AgentError> {
    let mut trainer = Trainer::new(config, seed, memory)?;
    let reports = trainer.run(on_report)?;
    Ok((reports, trainer))
}
