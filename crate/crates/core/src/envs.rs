//! CartPole family: the classic balancing task, a goal-conditioned variant
//! with reward `exp(-|x - g|)`, and a variant whose physical constants are
//! resampled every episode.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TIME_LIMIT: u32 = 500;
pub const GOAL_RANGE: (f64, f64) = (-1.0, 1.0);
pub const INITIAL_STATE_BOUND: f64 = 0.05;

pub const META_POLE_HALF_LENGTH: (f64, f64) = (0.25, 0.75);
pub const META_POLE_MASS: (f64, f64) = (0.05, 0.5);
pub const META_FORCE_MAGNITUDE: (f64, f64) = (5.0, 15.0);

/// Goals used when evaluating goal-conditioned agents.
pub const EVAL_GOALS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("cannot step a terminal state (steps elapsed {steps})")]
    SteppedTerminal { steps: u32 },
    #[error("invalid environment parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Standard,
    Gcrl,
    Meta,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Standard => "standard",
            EnvKind::Gcrl => "gcrl",
            EnvKind::Meta => "meta",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(EnvKind::Standard),
            "gcrl" => Ok(EnvKind::Gcrl),
            "meta" => Ok(EnvKind::Meta),
            other => Err(format!("unknown environment kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Left,
    Right,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Left => 0,
            Action::Right => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Action::Left),
            1 => Some(Action::Right),
            _ => None,
        }
    }

    /// `-1` for left, `+1` for right.
    pub fn signed(self) -> f64 {
        match self {
            Action::Left => -1.0,
            Action::Right => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_half_length: f64,
    pub force_magnitude: f64,
    pub timestep: f64,
    pub x_threshold: f64,
    pub theta_threshold: f64,
    pub time_limit: u32,
}

impl EnvParams {
    pub fn canonical() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            force_magnitude: 10.0,
            timestep: 0.02,
            x_threshold: 2.4,
            theta_threshold: 12.0 * 2.0 * std::f64::consts::PI / 360.0,
            time_limit: TIME_LIMIT,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("pole_half_length", self.pole_half_length),
            ("force_magnitude", self.force_magnitude),
            ("timestep", self.timestep),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnvError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.time_limit != TIME_LIMIT {
            return Err(EnvError::InvalidParams(format!(
                "time limit must be {TIME_LIMIT}, got {}",
                self.time_limit
            )));
        }
        Ok(())
    }

    /// The randomised triple `(pole_half_length, pole_mass, force_magnitude)`.
    pub fn meta_triple(&self) -> (f64, f64, f64) {
        (self.pole_half_length, self.pole_mass, self.force_magnitude)
    }
}

impl Default for EnvParams {
    fn default() -> Self {
        Self::canonical()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub steps_elapsed: u32,
    pub goal: Option<f64>,
}

impl EnvState {
    pub fn observation(&self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn is_terminal(&self, params: &EnvParams) -> bool {
        self.x.abs() > params.x_threshold
            || self.theta.abs() > params.theta_threshold
            || self.steps_elapsed >= params.time_limit
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub observation: [f64; 4],
    pub reward: f64,
    pub goal: Option<f64>,
    pub terminal: bool,
}

pub fn gcrl_reward(x: f64, goal: f64) -> f64 {
    (-(x - goal).abs()).exp()
}

pub fn sample_meta_params<R: Rng + ?Sized>(rng: &mut R) -> EnvParams {
    EnvParams {
        pole_half_length: rng.gen_range(META_POLE_HALF_LENGTH.0..=META_POLE_HALF_LENGTH.1),
        pole_mass: rng.gen_range(META_POLE_MASS.0..=META_POLE_MASS.1),
        force_magnitude: rng.gen_range(META_FORCE_MAGNITUDE.0..=META_FORCE_MAGNITUDE.1),
        ..EnvParams::canonical()
    }
}

fn spread(range: (f64, f64)) -> [f64; 3] {
    [range.0, 0.5 * (range.0 + range.1), range.1]
}

/// 3x3x3 evaluation grid over the randomised parameters: endpoints and
/// midpoint of each range, pole length varying slowest.
pub fn meta_eval_grid() -> Vec<EnvParams> {
    let mut grid = Vec::with_capacity(27);
    for l in spread(META_POLE_HALF_LENGTH) {
        for m in spread(META_POLE_MASS) {
            for f in spread(META_FORCE_MAGNITUDE) {
                grid.push(EnvParams {
                    pole_half_length: l,
                    pole_mass: m,
                    force_magnitude: f,
                    ..EnvParams::canonical()
                });
            }
        }
    }
    grid
}

/// Fresh episode: state components uniform in `[-0.05, 0.05]`, a goal for
/// the goal-conditioned variant, resampled physics for the meta variant.
pub fn reset<R: Rng + ?Sized>(kind: EnvKind, rng: &mut R) -> (EnvState, EnvParams) {
    let params = match kind {
        EnvKind::Meta => sample_meta_params(rng),
        _ => EnvParams::canonical(),
    };
    let state = initial_state(kind, rng);
    (state, params)
}

fn initial_state<R: Rng + ?Sized>(kind: EnvKind, rng: &mut R) -> EnvState {
    let mut draw = || rng.gen_range(-INITIAL_STATE_BOUND..=INITIAL_STATE_BOUND);
    let (x, x_dot, theta, theta_dot) = (draw(), draw(), draw(), draw());
    let goal = match kind {
        EnvKind::Gcrl => Some(rng.gen_range(GOAL_RANGE.0..=GOAL_RANGE.1)),
        _ => None,
    };
    EnvState {
        x,
        x_dot,
        theta,
        theta_dot,
        steps_elapsed: 0,
        goal,
    }
}

/// One explicit Euler step of the cart-pole equations of motion.
/// Accelerations come from the current state; positions advance with the
/// old velocities.
pub fn step(
    state: &EnvState,
    params: &EnvParams,
    action: Action,
) -> Result<(EnvState, StepResult), EnvError> {
    if state.is_terminal(params) {
        return Err(EnvError::SteppedTerminal {
            steps: state.steps_elapsed,
        });
    }
    let force = action.signed() * params.force_magnitude;
    let total_mass = params.cart_mass + params.pole_mass;
    let pole_mass_length = params.pole_mass * params.pole_half_length;
    let (sin, cos) = state.theta.sin_cos();

    let temp = (force + pole_mass_length * state.theta_dot * state.theta_dot * sin) / total_mass;
    let theta_acc = (params.gravity * sin - cos * temp)
        / (params.pole_half_length * (4.0 / 3.0 - params.pole_mass * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;

    let tau = params.timestep;
    let next = EnvState {
        x: state.x + tau * state.x_dot,
        x_dot: state.x_dot + tau * x_acc,
        theta: state.theta + tau * state.theta_dot,
        theta_dot: state.theta_dot + tau * theta_acc,
        steps_elapsed: state.steps_elapsed + 1,
        goal: state.goal,
    };
    let reward = match state.goal {
        Some(g) => gcrl_reward(next.x, g),
        None => 1.0,
    };
    let result = StepResult {
        observation: next.observation(),
        reward,
        goal: next.goal,
        terminal: next.is_terminal(params),
    };
    Ok((next, result))
}

/// Stateful wrapper that counts every transition it executes.
#[derive(Debug, Clone)]
pub struct CartPole {
    kind: EnvKind,
    params: EnvParams,
    state: EnvState,
    transitions: u64,
}

impl CartPole {
    pub fn new<R: Rng + ?Sized>(kind: EnvKind, rng: &mut R) -> Self {
        let (state, params) = reset(kind, rng);
        Self {
            kind,
            params,
            state,
            transitions: 0,
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn transitions(&self) -> u64 {
        self.transitions
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal(&self.params)
    }

    /// Starts a new episode, returning the observation and goal.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> ([f64; 4], Option<f64>) {
        let (state, params) = reset(self.kind, rng);
        self.state = state;
        self.params = params;
        (state.observation(), state.goal)
    }

    /// Starts an episode under fixed physics and, optionally, a fixed goal.
    pub fn reset_with<R: Rng + ?Sized>(
        &mut self,
        params: EnvParams,
        goal: Option<f64>,
        rng: &mut R,
    ) -> ([f64; 4], Option<f64>) {
        let mut state = initial_state(self.kind, rng);
        if goal.is_some() {
            state.goal = goal;
        }
        self.state = state;
        self.params = params;
        (state.observation(), state.goal)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        let (next, result) = step(&self.state, &self.params, action)?;
        self.state = next;
        self.transitions += 1;
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn still() -> EnvState {
        EnvState {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
            steps_elapsed: 0,
            goal: None,
        }
    }

    #[test]
    fn euler_step_from_rest() {
        let (next, r) = step(&still(), &EnvParams::canonical(), Action::Right).unwrap();
        // temp = 10/1.1; theta_acc = -temp / (0.5 (4/3 - 0.1/1.1));
        // x_acc = temp - 0.05 theta_acc / 1.1
        let temp: f64 = 10.0 / 1.1;
        let theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / 1.1));
        let x_acc = temp - 0.05 * theta_acc / 1.1;
        assert!((theta_acc - -14.634_146_341_463_415).abs() < 1e-9);
        assert!((x_acc - 9.756_097_560_975_61).abs() < 1e-9);
        assert_eq!(next.x, 0.0);
        assert_eq!(next.theta, 0.0);
        assert!((next.x_dot - 0.195_122).abs() < 1e-6);
        assert!((next.theta_dot - -0.292_683).abs() < 1e-6);
        assert!((next.x_dot - 0.02 * x_acc).abs() < 1e-12);
        assert_eq!(r.reward, 1.0);
        assert!(!r.terminal);
    }

    #[test]
    fn time_limit_ends_episode_at_500() {
        let params = EnvParams::canonical();
        let mut state = still();
        let mut ret = 0.0;
        for t in 1..=TIME_LIMIT {
            // Alternate pushes to keep the pole up; the test checks only the
            // limit, so nudge the state back to rest each step.
            let action = if t % 2 == 0 { Action::Left } else { Action::Right };
            let (mut next, r) = step(&state, &params, action).unwrap();
            ret += r.reward;
            assert_eq!(r.terminal, t == TIME_LIMIT, "step {t}");
            next.x = 0.0;
            next.x_dot = 0.0;
            next.theta = 0.0;
            next.theta_dot = 0.0;
            state = next;
        }
        assert_eq!(ret, 500.0);
        assert_eq!(
            step(&state, &params, Action::Left).unwrap_err(),
            EnvError::SteppedTerminal { steps: 500 }
        );
    }

    #[test]
    fn gcrl_reward_values() {
        assert_eq!(gcrl_reward(0.3, 0.3), 1.0);
        assert!((gcrl_reward(0.5, -0.5) - (-1f64).exp()).abs() < 1e-15);
        assert!((gcrl_reward(1.0, 0.0) - 0.367_879).abs() < 1e-6);
        assert_eq!(gcrl_reward(0.2, -0.7), gcrl_reward(-0.7, 0.2));
    }

    #[test]
    fn gcrl_step_at_goal_rewards_one() {
        let mut s = still();
        s.goal = Some(0.0);
        // x stays 0 on the first step since position uses the old velocity.
        let (_, r) = step(&s, &EnvParams::canonical(), Action::Left).unwrap();
        assert_eq!(r.reward, 1.0);
        assert_eq!(r.goal, Some(0.0));
    }

    #[test]
    fn reset_per_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (s, p) = reset(EnvKind::Standard, &mut rng);
        assert_eq!(s.goal, None);
        assert_eq!(p, EnvParams::canonical());
        for v in s.observation() {
            assert!(v.abs() <= INITIAL_STATE_BOUND);
        }
        let (s, p) = reset(EnvKind::Gcrl, &mut rng);
        let g = s.goal.unwrap();
        assert!((-1.0..=1.0).contains(&g));
        assert_eq!(p, EnvParams::canonical());
    }

    #[test]
    fn meta_resets_differ_across_seeds() {
        let draws: Vec<EnvParams> = (0..100)
            .map(|seed| reset(EnvKind::Meta, &mut ChaCha8Rng::seed_from_u64(seed)).1)
            .collect();
        for i in 0..draws.len() {
            for j in i + 1..draws.len() {
                assert_ne!(draws[i], draws[j]);
            }
        }
    }

    #[test]
    fn meta_params_within_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = sample_meta_params(&mut rng);
            let (l, m, f) = p.meta_triple();
            assert!((0.25..=0.75).contains(&l));
            assert!((0.05..=0.5).contains(&m));
            assert!((5.0..=15.0).contains(&f));
            assert_eq!(p.gravity, 9.8);
            assert_eq!(p.cart_mass, 1.0);
            p.validate().unwrap();
        }
        let c = EnvParams::canonical();
        assert!((0.25..=0.75).contains(&c.pole_half_length));
        assert!((0.05..=0.5).contains(&c.pole_mass));
        assert!((5.0..=15.0).contains(&c.force_magnitude));
    }

    #[test]
    fn meta_grid_has_three_values_per_parameter() {
        let grid = meta_eval_grid();
        assert_eq!(grid.len(), 27);
        let mut lengths: Vec<f64> = grid.iter().map(|p| p.pole_half_length).collect();
        lengths.dedup();
        assert_eq!(lengths, vec![0.25, 0.5, 0.75]);
        let mut masses: Vec<f64> = grid.iter().map(|p| p.pole_mass).collect();
        masses.sort_by(f64::total_cmp);
        masses.dedup();
        assert_eq!(masses, vec![0.05, 0.275, 0.5]);
        let mut forces: Vec<f64> = grid.iter().map(|p| p.force_magnitude).collect();
        forces.sort_by(f64::total_cmp);
        forces.dedup();
        assert_eq!(forces, vec![5.0, 10.0, 15.0]);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = EnvParams::canonical();
        p.pole_mass = 0.0;
        assert!(p.validate().is_err());
        let mut p = EnvParams::canonical();
        p.time_limit = 200;
        assert!(p.validate().is_err());
    }

    #[test]
    fn wrapper_counts_transitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = CartPole::new(EnvKind::Standard, &mut rng);
        let mut n = 0;
        while !env.is_terminal() {
            env.step(Action::Right).unwrap();
            n += 1;
        }
        assert_eq!(env.transitions(), n);
        assert!(n < 50, "always pushing right should fail fast, lasted {n}");
    }
}
