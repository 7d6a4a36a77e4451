//! Command-conditioned recurrent policy.
//!
//! Each scalar token (desired horizon, desired return, goal, previous
//! action, previous reward, previous terminal flag) is embedded by a
//! per-token affine map, concatenated with a learnable per-token encoding
//! and passed as a set through one Transformer encoder layer. The set is
//! max-pooled into a context vector that gates a projection of the
//! observation; the gated features drive an LSTM whose hidden state feeds a
//! linear head producing action logits.
//!
//! Batches are laid out time-major: row `t * batch + b` holds step `t` of
//! sequence `b`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::envs::Action;
use crate::replay::{fmt_real, Command, PrevStep, TrainingSequence};

pub const CHECKPOINT_MAGIC: &str = "GUDRL-CKPT";
pub const CHECKPOINT_VERSION: &str = "v1";
pub const NUM_ACTIONS: usize = 2;
pub const OBS_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("malformed checkpoint header: {0:?}")]
    CheckpointHeader(String),
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub encoding_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Horizon and desired-return tokens are divided by this before
    /// embedding.
    pub command_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            encoding_dim: 16,
            heads: 2,
            ff_dim: 64,
            feature_dim: 64,
            hidden_dim: 64,
            command_scale: 100.0,
        }
    }
}

impl PolicyConfig {
    pub fn token_dim(&self) -> usize {
        self.embed_dim + self.encoding_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Horizon,
    DesiredReturn,
    Goal,
    PrevAction,
    PrevReward,
    PrevTerminal,
}

impl TokenKind {
    pub const ALL: [TokenKind; 6] = [
        TokenKind::Horizon,
        TokenKind::DesiredReturn,
        TokenKind::Goal,
        TokenKind::PrevAction,
        TokenKind::PrevReward,
        TokenKind::PrevTerminal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Which tokens a setting feeds to the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    pub horizon: bool,
    pub desired_return: bool,
    pub goal: bool,
    pub prev_action: bool,
    pub prev_reward: bool,
    pub prev_terminal: bool,
}

impl TokenMask {
    pub const ALL: TokenMask = TokenMask {
        horizon: true,
        desired_return: true,
        goal: true,
        prev_action: true,
        prev_reward: true,
        prev_terminal: true,
    };
    pub const NONE: TokenMask = TokenMask {
        horizon: false,
        desired_return: false,
        goal: false,
        prev_action: false,
        prev_reward: false,
        prev_terminal: false,
    };

    pub fn allows(&self, kind: TokenKind) -> bool {
        match kind {
            TokenKind::Horizon => self.horizon,
            TokenKind::DesiredReturn => self.desired_return,
            TokenKind::Goal => self.goal,
            TokenKind::PrevAction => self.prev_action,
            TokenKind::PrevReward => self.prev_reward,
            TokenKind::PrevTerminal => self.prev_terminal,
        }
    }
}

/// Scalar value and presence flag for each token kind.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CommandTokenSet {
    pub values: [f64; 6],
    pub present: [bool; 6],
}

impl CommandTokenSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn set(&mut self, kind: TokenKind, value: f64) {
        self.values[kind.index()] = value;
        self.present[kind.index()] = true;
    }

    pub fn get(&self, kind: TokenKind) -> Option<f64> {
        self.present[kind.index()].then(|| self.values[kind.index()])
    }

    pub fn is_empty(&self) -> bool {
        !self.present.iter().any(|&p| p)
    }

    /// Tokens for one step. A token is present only when the setting mask
    /// and the command's own mask both allow it; absent tokens carry 0.
    pub fn build(command: &Command, prev: &PrevStep, mask: &TokenMask, command_scale: f64) -> Self {
        let mut t = Self::empty();
        if mask.horizon && command.enabled.horizon {
            t.set(TokenKind::Horizon, command.horizon as f64 / command_scale);
        }
        if mask.desired_return && command.enabled.desired_return {
            t.set(TokenKind::DesiredReturn, command.desired_return / command_scale);
        }
        if let (true, true, Some(g)) = (mask.goal, command.enabled.goal, command.goal) {
            t.set(TokenKind::Goal, g);
        }
        if mask.prev_action {
            t.set(TokenKind::PrevAction, prev.action.map_or(0.0, Action::signed));
        }
        if mask.prev_reward {
            t.set(TokenKind::PrevReward, prev.reward);
        }
        if mask.prev_terminal {
            t.set(TokenKind::PrevTerminal, if prev.terminal { 1.0 } else { 0.0 });
        }
        t
    }
}

/// Recurrent state carried between steps of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub lstm_h: Vec<f64>,
    pub lstm_c: Vec<f64>,
    pub prev: PrevStep,
}

impl HiddenState {
    /// Zero memory with the start-of-episode marker.
    pub fn reset(config: &PolicyConfig) -> Self {
        Self {
            lstm_h: vec![0.0; config.hidden_dim],
            lstm_c: vec![0.0; config.hidden_dim],
            prev: PrevStep::START,
        }
    }

    /// Records the action just taken and the reward it earned.
    pub fn observe(&mut self, action: Action, reward: f64) {
        self.prev = PrevStep::after(action, reward);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution {
    pub logits: [f64; NUM_ACTIONS],
    pub probs: [f64; NUM_ACTIONS],
}

impl ActionDistribution {
    pub fn from_logits(logits: [f64; NUM_ACTIONS]) -> Self {
        let mut probs = [0.0; NUM_ACTIONS];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, l) in probs.iter_mut().zip(&logits) {
            *p = (l - max).exp();
            sum += *p;
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        Self { logits, probs }
    }

    pub fn from_probs(probs: [f64; NUM_ACTIONS]) -> Self {
        Self {
            logits: probs.map(f64::ln),
            probs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    Greedy,
}

pub fn act<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R, mode: ActMode) -> Action {
    match mode {
        ActMode::Greedy => {
            if dist.probs[1] > dist.probs[0] {
                Action::Right
            } else {
                Action::Left
            }
        }
        ActMode::Sample => {
            let u: f64 = rng.gen();
            if u < dist.probs[0] {
                Action::Left
            } else {
                Action::Right
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    obs_w: ParamId,
    obs_b: ParamId,
    tok_w: ParamId,
    tok_b: ParamId,
    tok_enc: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    gate_wx: ParamId,
    gate_bx: ParamId,
    gate_wc: ParamId,
    gate_bc: ParamId,
    lstm_wi: ParamId,
    lstm_wh: ParamId,
    lstm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Parameter names belonging to the token encoder (embedding, learnable
/// encodings and the Transformer layer).
pub const TOKEN_ENCODER_PARAMS: [&str; 17] = [
    "tokens.embed_w",
    "tokens.embed_b",
    "tokens.encoding",
    "encoder.wq",
    "encoder.bq",
    "encoder.wk",
    "encoder.bk",
    "encoder.wv",
    "encoder.bv",
    "encoder.wo",
    "encoder.bo",
    "encoder.ln1_gamma",
    "encoder.ln1_beta",
    "encoder.ff_w1",
    "encoder.ff_b1",
    "encoder.ff_w2",
    "encoder.ff_b2",
];

fn param_shapes(cfg: &PolicyConfig) -> Vec<(&'static str, Vec<usize>)> {
    let d = cfg.token_dim();
    let h = cfg.hidden_dim;
    let f = cfg.feature_dim;
    vec![
        ("obs.w", vec![OBS_DIM, f]),
        ("obs.b", vec![1, f]),
        ("tokens.embed_w", vec![6, cfg.embed_dim]),
        ("tokens.embed_b", vec![6, cfg.embed_dim]),
        ("tokens.encoding", vec![6, cfg.encoding_dim]),
        ("encoder.wq", vec![d, d]),
        ("encoder.bq", vec![1, d]),
        ("encoder.wk", vec![d, d]),
        ("encoder.bk", vec![1, d]),
        ("encoder.wv", vec![d, d]),
        ("encoder.bv", vec![1, d]),
        ("encoder.wo", vec![d, d]),
        ("encoder.bo", vec![1, d]),
        ("encoder.ln1_gamma", vec![d]),
        ("encoder.ln1_beta", vec![d]),
        ("encoder.ff_w1", vec![d, cfg.ff_dim]),
        ("encoder.ff_b1", vec![1, cfg.ff_dim]),
        ("encoder.ff_w2", vec![cfg.ff_dim, d]),
        ("encoder.ff_b2", vec![1, d]),
        ("encoder.ln2_gamma", vec![d]),
        ("encoder.ln2_beta", vec![d]),
        ("gate.wx", vec![f, f]),
        ("gate.bx", vec![1, f]),
        ("gate.wc", vec![d, f]),
        ("gate.bc", vec![1, f]),
        ("lstm.wi", vec![f, 4 * h]),
        ("lstm.wh", vec![h, 4 * h]),
        ("lstm.b", vec![1, 4 * h]),
        ("head.w", vec![h, NUM_ACTIONS]),
        ("head.b", vec![1, NUM_ACTIONS]),
    ]
}

/// Trainable parameters of the policy plus the configuration they were
/// built for.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    config: PolicyConfig,
    store: ParamStore,
    ids: Ids,
}

impl PolicyParams {
    pub fn init(config: PolicyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden_dim;
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = if name.ends_with("gamma") {
                vec![1.0; n]
            } else if name.ends_with("beta") {
                vec![0.0; n]
            } else if name.starts_with("tokens.") {
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
            } else {
                let fan_in = match name {
                    "obs.b" => OBS_DIM,
                    "lstm.b" => h,
                    _ if shape[0] == 1 => shape[1],
                    _ => shape[0],
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                if name == "lstm.b" {
                    // forget gate bias
                    v[h..2 * h].iter_mut().for_each(|b| *b += 1.0);
                }
                v
            };
            store.insert(name, Tensor::new(shape, values).expect("consistent shapes"));
        }
        Self::from_store(config, store).expect("freshly built store matches its config")
    }

    /// Wraps an existing store, checking names and shapes against `config`.
    pub fn from_store(config: PolicyConfig, store: ParamStore) -> Result<Self, PolicyError> {
        let expected = param_shapes(&config);
        if store.len() != expected.len() {
            return Err(PolicyError::DimensionMismatch {
                what: "parameter count",
                expected: expected.len(),
                got: store.len(),
            });
        }
        let mut found = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let id = store.id(name).ok_or_else(|| PolicyError::Checkpoint {
                line: 0,
                reason: format!("missing parameter `{name}`"),
            })?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(PolicyError::Checkpoint {
                    line: 0,
                    reason: format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        store.get(id).shape()
                    ),
                });
            }
            found.push(id);
        }
        let mut it = found.into_iter();
        let mut next = || it.next().expect("one id per expected parameter");
        let ids = Ids {
            obs_w: next(),
            obs_b: next(),
            tok_w: next(),
            tok_b: next(),
            tok_enc: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln1_g: next(),
            ln1_b: next(),
            ff_w1: next(),
            ff_b1: next(),
            ff_w2: next(),
            ff_b2: next(),
            ln2_g: next(),
            ln2_b: next(),
            gate_wx: next(),
            gate_bx: next(),
            gate_wc: next(),
            gate_bc: next(),
            lstm_wi: next(),
            lstm_wh: next(),
            lstm_b: next(),
            head_w: next(),
            head_b: next(),
        };
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn all_finite(&self) -> bool {
        self.store.all_finite()
    }
}

/// Encodes each token set into a context vector, returning `[sets, token_dim]`
/// or `None` when no set contains any token (the context is then zero).
/// `order` fixes the slot order of token kinds inside each set; kinds may
/// repeat.
pub fn encode_tokens_ordered(
    tape: &mut Tape<'_>,
    params: &PolicyParams,
    sets: &[CommandTokenSet],
    order: &[TokenKind],
) -> Result<Option<Var>, PolicyError> {
    let ids = &params.ids;
    let cfg = &params.config;
    let slots: Vec<TokenKind> = order
        .iter()
        .copied()
        .filter(|k| sets.iter().any(|s| s.present[k.index()]))
        .collect();
    if slots.is_empty() || sets.is_empty() {
        return Ok(None);
    }
    let t = slots.len();
    let rows = sets.len() * t;
    let mut kind_idx = Vec::with_capacity(rows);
    let mut scalars = Vec::with_capacity(rows);
    let mut mask = Vec::with_capacity(rows);
    for s in sets {
        for k in &slots {
            kind_idx.push(k.index());
            let present = s.present[k.index()];
            mask.push(present);
            scalars.push(if present { s.values[k.index()] } else { 0.0 });
        }
    }
    let d = cfg.token_dim();

    let w = tape.param(ids.tok_w);
    let b = tape.param(ids.tok_b);
    let enc = tape.param(ids.tok_enc);
    let w_rows = tape.embed_lookup(w, kind_idx.clone())?;
    let b_rows = tape.embed_lookup(b, kind_idx.clone())?;
    let s_col = tape.constant(rows, 1, scalars);
    let scaled = tape.mul(w_rows, s_col)?;
    let emb = tape.add(scaled, b_rows)?;
    let enc_rows = tape.embed_lookup(enc, kind_idx)?;
    let x0 = tape.concat(&[emb, enc_rows])?;

    let q = linear(tape, x0, ids.wq, ids.bq)?;
    let k = linear(tape, x0, ids.wk, ids.bk)?;
    let v = linear(tape, x0, ids.wv, ids.bv)?;
    let attn = tape.set_attention(q, k, v, t, cfg.heads, mask.clone())?;
    let attn = linear(tape, attn, ids.wo, ids.bo)?;
    let res1 = tape.add(x0, attn)?;
    let g1 = tape.param(ids.ln1_g);
    let b1 = tape.param(ids.ln1_b);
    let x1 = tape.layer_norm(res1, g1, b1)?;
    let hidden = linear(tape, x1, ids.ff_w1, ids.ff_b1)?;
    let hidden = tape.relu(hidden)?;
    let ff = linear(tape, hidden, ids.ff_w2, ids.ff_b2)?;
    let res2 = tape.add(x1, ff)?;
    let g2 = tape.param(ids.ln2_g);
    let b2 = tape.param(ids.ln2_b);
    let x2 = tape.layer_norm(res2, g2, b2)?;
    debug_assert_eq!(tape.shape(x2), &[rows, d]);
    Ok(Some(tape.set_max(x2, t, mask)?))
}

/// [`encode_tokens_ordered`] with token kinds in their canonical order.
pub fn encode_tokens(
    tape: &mut Tape<'_>,
    params: &PolicyParams,
    sets: &[CommandTokenSet],
) -> Result<Option<Var>, PolicyError> {
    encode_tokens_ordered(tape, params, sets, &TokenKind::ALL)
}

fn linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var, AutodiffError> {
    let w = tape.param(w);
    let b = tape.param(b);
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Inputs for a time-major unroll of `batch` sequences over `len` steps.
struct Unroll<'a> {
    batch: usize,
    len: usize,
    observations: &'a [[f64; 4]],
    tokens: &'a [CommandTokenSet],
    initial: Option<(&'a [f64], &'a [f64])>,
}

struct Unrolled {
    logits: Var,
    final_h: Var,
    final_c: Var,
}

fn unroll(tape: &mut Tape<'_>, params: &PolicyParams, inp: &Unroll<'_>) -> Result<Unrolled, PolicyError> {
    let ids = &params.ids;
    let cfg = &params.config;
    let rows = inp.batch * inp.len;
    let h = cfg.hidden_dim;
    if inp.observations.len() != rows || inp.tokens.len() != rows {
        return Err(PolicyError::DimensionMismatch {
            what: "unroll rows",
            expected: rows,
            got: inp.observations.len().min(inp.tokens.len()),
        });
    }

    let obs = tape.constant(rows, OBS_DIM, inp.observations.iter().flatten().copied().collect());
    let x = linear(tape, obs, ids.obs_w, ids.obs_b)?;
    let x = tape.relu(x)?;
    let ctx = encode_tokens(tape, params, inp.tokens)?;
    let gate_pre = match ctx {
        Some(ctx) => linear(tape, ctx, ids.gate_wc, ids.gate_bc)?,
        None => tape.param(ids.gate_bc),
    };
    let gate = tape.sigmoid(gate_pre)?;
    let proj = linear(tape, x, ids.gate_wx, ids.gate_bx)?;
    let fused = tape.mul(proj, gate)?;

    let wi = tape.param(ids.lstm_wi);
    let wh = tape.param(ids.lstm_wh);
    let lb = tape.param(ids.lstm_b);
    let input_gates = tape.matmul(fused, wi)?;
    let input_gates = tape.add(input_gates, lb)?;

    let (h0, c0) = match inp.initial {
        Some((hv, cv)) => {
            if hv.len() != inp.batch * h || cv.len() != inp.batch * h {
                return Err(PolicyError::DimensionMismatch {
                    what: "hidden state",
                    expected: inp.batch * h,
                    got: hv.len().min(cv.len()),
                });
            }
            (
                tape.constant(inp.batch, h, hv.to_vec()),
                tape.constant(inp.batch, h, cv.to_vec()),
            )
        }
        None => (
            tape.constant(inp.batch, h, vec![0.0; inp.batch * h]),
            tape.constant(inp.batch, h, vec![0.0; inp.batch * h]),
        ),
    };
    let (mut hs, mut cs) = (h0, c0);
    let mut outputs = Vec::with_capacity(inp.len);
    for t in 0..inp.len {
        let xg = tape.slice_rows(input_gates, t * inp.batch, inp.batch)?;
        let hg = tape.matmul(hs, wh)?;
        let z = tape.add(xg, hg)?;
        let zi = tape.slice_cols(z, 0, h)?;
        let zf = tape.slice_cols(z, h, h)?;
        let zg = tape.slice_cols(z, 2 * h, h)?;
        let zo = tape.slice_cols(z, 3 * h, h)?;
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let g = tape.tanh(zg)?;
        let o = tape.sigmoid(zo)?;
        let keep = tape.mul(f, cs)?;
        let write = tape.mul(i, g)?;
        cs = tape.add(keep, write)?;
        let squashed = tape.tanh(cs)?;
        hs = tape.mul(o, squashed)?;
        outputs.push(hs);
    }
    let all_h = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_rows(&outputs)?
    };
    let logits = linear(tape, all_h, ids.head_w, ids.head_b)?;
    Ok(Unrolled {
        logits,
        final_h: hs,
        final_c: cs,
    })
}

/// One step for a batch of independent episodes. Returns the action
/// distributions and the advanced recurrent states; the previous-step
/// fields of the returned states are copied from the inputs.
pub fn policy_forward_batch(
    params: &PolicyParams,
    observations: &[[f64; 4]],
    tokens: &[CommandTokenSet],
    hidden: &[HiddenState],
) -> Result<(Vec<ActionDistribution>, Vec<HiddenState>), PolicyError> {
    let batch = observations.len();
    let h = params.config.hidden_dim;
    if hidden.len() != batch || tokens.len() != batch {
        return Err(PolicyError::DimensionMismatch {
            what: "batch size",
            expected: batch,
            got: hidden.len().min(tokens.len()),
        });
    }
    if let Some(bad) = hidden.iter().find(|s| s.lstm_h.len() != h || s.lstm_c.len() != h) {
        return Err(PolicyError::DimensionMismatch {
            what: "hidden state width",
            expected: h,
            got: bad.lstm_h.len().min(bad.lstm_c.len()),
        });
    }
    let hv: Vec<f64> = hidden.iter().flat_map(|s| s.lstm_h.iter().copied()).collect();
    let cv: Vec<f64> = hidden.iter().flat_map(|s| s.lstm_c.iter().copied()).collect();
    let mut tape = Tape::with_params(&params.store);
    let out = unroll(
        &mut tape,
        params,
        &Unroll {
            batch,
            len: 1,
            observations,
            tokens,
            initial: Some((&hv, &cv)),
        },
    )?;
    let logits = tape.value(out.logits);
    let nh = tape.value(out.final_h);
    let nc = tape.value(out.final_c);
    let dists = logits
        .chunks(NUM_ACTIONS)
        .map(|l| ActionDistribution::from_logits([l[0], l[1]]))
        .collect();
    let states = hidden
        .iter()
        .enumerate()
        .map(|(b, s)| HiddenState {
            lstm_h: nh[b * h..(b + 1) * h].to_vec(),
            lstm_c: nc[b * h..(b + 1) * h].to_vec(),
            prev: s.prev,
        })
        .collect();
    Ok((dists, states))
}

pub fn policy_forward(
    params: &PolicyParams,
    observation: &[f64; 4],
    tokens: &CommandTokenSet,
    hidden: &HiddenState,
) -> Result<(ActionDistribution, HiddenState), PolicyError> {
    let (mut d, mut s) = policy_forward_batch(
        params,
        std::slice::from_ref(observation),
        std::slice::from_ref(tokens),
        std::slice::from_ref(hidden),
    )?;
    Ok((d.remove(0), s.remove(0)))
}

/// Mean cross entropy between predicted and observed actions over every
/// step of every sequence. Each sequence starts from a fresh recurrent
/// state.
pub fn loss_batch(
    tape: &mut Tape<'_>,
    params: &PolicyParams,
    batch: &[TrainingSequence],
    mask: &TokenMask,
) -> Result<Var, PolicyError> {
    if batch.is_empty() || batch.iter().all(TrainingSequence::is_empty) {
        return Err(PolicyError::EmptyBatch);
    }
    let b = batch.len();
    let len = batch.iter().map(TrainingSequence::len).max().unwrap_or(0);
    let steps: usize = batch.iter().map(TrainingSequence::len).sum();
    let weight = 1.0 / steps as f64;
    let scale = params.config.command_scale;
    let mut observations = Vec::with_capacity(b * len);
    let mut tokens = Vec::with_capacity(b * len);
    let mut targets = Vec::with_capacity(b * len);
    let mut weights = Vec::with_capacity(b * len);
    for t in 0..len {
        for seq in batch {
            if t < seq.len() {
                observations.push(seq.observations[t]);
                tokens.push(CommandTokenSet::build(&seq.commands[t], &seq.prev[t], mask, scale));
                targets.push(seq.actions[t].index());
                weights.push(weight);
            } else {
                observations.push([0.0; 4]);
                tokens.push(CommandTokenSet::empty());
                targets.push(0);
                weights.push(0.0);
            }
        }
    }
    let out = unroll(
        tape,
        params,
        &Unroll {
            batch: b,
            len,
            observations: &observations,
            tokens: &tokens,
            initial: None,
        },
    )?;
    Ok(tape.cross_entropy(out.logits, targets, weights)?)
}

/// Evaluates [`loss_batch`], backpropagates, and adds the gradients into the
/// parameter store (after zeroing it). Returns the loss value.
pub fn loss_and_grad(
    params: &mut PolicyParams,
    batch: &[TrainingSequence],
    mask: &TokenMask,
) -> Result<f64, PolicyError> {
    let (value, grads) = {
        let mut tape = Tape::with_params(&params.store);
        let loss = loss_batch(&mut tape, params, batch, mask)?;
        (tape.value(loss)[0], tape.backward(loss)?)
    };
    params.store.zero_grad();
    grads.accumulate_into(&mut params.store);
    Ok(value)
}

pub fn checkpoint_to_string(params: &PolicyParams) -> String {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {}", params.store.len()).unwrap();
    for (_, name, t) in params.store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(out, "P {name} {} {}", t.shape().len(), dims.join(" ")).unwrap();
        let vals: Vec<String> = t.values().iter().map(|&v| fmt_real(v)).collect();
        writeln!(out, "{}", vals.join(" ")).unwrap();
    }
    out
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    fs::write(path, checkpoint_to_string(params))?;
    Ok(())
}

pub fn parse_checkpoint(text: &str, config: PolicyConfig) -> Result<PolicyParams, PolicyError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| PolicyError::CheckpointHeader(String::new()))?;
    let f: Vec<&str> = header.split(' ').collect();
    if f.len() != 3 || f[0] != CHECKPOINT_MAGIC || f[1] != CHECKPOINT_VERSION {
        return Err(PolicyError::CheckpointHeader(header.to_string()));
    }
    let count: usize = f[2]
        .parse()
        .map_err(|_| PolicyError::CheckpointHeader(header.to_string()))?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let (ln, line) = lines.next().ok_or(PolicyError::Checkpoint {
            line: text.lines().count() + 1,
            reason: "truncated before parameter block".into(),
        })?;
        let bad = |reason: String| PolicyError::Checkpoint { line: ln, reason };
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() < 3 || f[0] != "P" {
            return Err(bad(format!("expected parameter block, got {line:?}")));
        }
        let rank: usize = f[2].parse().map_err(|_| bad("bad rank".into()))?;
        if f.len() != 3 + rank {
            return Err(bad(format!("rank {rank} but {} dims", f.len() - 3)));
        }
        let shape = f[3..]
            .iter()
            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dim {d:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let (vln, vline) = lines.next().ok_or(PolicyError::Checkpoint {
            line: ln + 1,
            reason: format!("missing values for `{}`", f[1]),
        })?;
        let values = vline
            .split(' ')
            .map(|v| {
                v.parse::<f64>().map_err(|_| PolicyError::Checkpoint {
                    line: vln,
                    reason: format!("bad value {v:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tensor = Tensor::new(shape, values).map_err(|e| PolicyError::Checkpoint {
            line: vln,
            reason: e.to_string(),
        })?;
        if store.id(f[1]).is_some() {
            return Err(bad(format!("duplicate parameter `{}`", f[1])));
        }
        store.insert(f[1], tensor);
    }
    PolicyParams::from_store(config, store)
}

pub fn load_checkpoint(path: &Path, config: PolicyConfig) -> Result<PolicyParams, PolicyError> {
    parse_checkpoint(&fs::read_to_string(path)?, config)
}

#[cfg(test)]
mod tests;
