use super::*;
use crate::autodiff::numeric::{central_difference, max_relative_error};
use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::replay::{hindsight_segment, Episode, Transition};

fn small_config() -> PolicyConfig {
    PolicyConfig {
        embed_dim: 4,
        encoding_dim: 4,
        heads: 2,
        ff_dim: 6,
        feature_dim: 5,
        hidden_dim: 3,
        command_scale: 500.0,
    }
}

fn random_set(rng: &mut ChaCha8Rng) -> CommandTokenSet {
    let mut s = CommandTokenSet::empty();
    for k in TokenKind::ALL {
        if rng.gen_bool(0.7) {
            s.set(k, rng.gen_range(-2.0..2.0));
        }
    }
    s
}

fn full_set() -> CommandTokenSet {
    let mut s = CommandTokenSet::empty();
    for (i, k) in TokenKind::ALL.into_iter().enumerate() {
        s.set(k, 0.3 * i as f64 - 0.7);
    }
    s
}

fn encode(params: &PolicyParams, sets: &[CommandTokenSet], order: &[TokenKind]) -> Option<Vec<f64>> {
    let mut tape = Tape::with_params(params.store());
    encode_tokens_ordered(&mut tape, params, sets, order)
        .unwrap()
        .map(|v| tape.value(v).to_vec())
}

// Straightforward loop implementation used as an independent oracle.
mod oracle {
    use super::*;

    pub struct P<'a>(pub &'a PolicyParams);

    impl P<'_> {
        fn v(&self, name: &str) -> &[f64] {
            let s = self.0.store();
            s.get(s.id(name).unwrap()).values()
        }

        fn affine(&self, x: &[f64], w: &str, b: &str, n_out: usize) -> Vec<f64> {
            let (w, b) = (self.v(w), self.v(b));
            (0..n_out)
                .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * n_out + j]).sum::<f64>())
                .collect()
        }

        fn norm(&self, x: &[f64], g: &str, b: &str) -> Vec<f64> {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            let (g, b) = (self.v(g), self.v(b));
            x.iter()
                .enumerate()
                .map(|(i, a)| (a - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        }

        pub fn context(&self, set: &CommandTokenSet) -> Vec<f64> {
            let c = self.0.config();
            let d = c.token_dim();
            let toks: Vec<Vec<f64>> = TokenKind::ALL
                .iter()
                .filter(|k| set.present[k.index()])
                .map(|k| {
                    let i = k.index();
                    let e = c.embed_dim;
                    let mut t: Vec<f64> = (0..e)
                        .map(|j| self.v("tokens.embed_w")[i * e + j] * set.values[i] + self.v("tokens.embed_b")[i * e + j])
                        .collect();
                    t.extend_from_slice(&self.v("tokens.encoding")[i * c.encoding_dim..(i + 1) * c.encoding_dim]);
                    t
                })
                .collect();
            if toks.is_empty() {
                return vec![0.0; d];
            }
            let q: Vec<_> = toks.iter().map(|t| self.affine(t, "encoder.wq", "encoder.bq", d)).collect();
            let k: Vec<_> = toks.iter().map(|t| self.affine(t, "encoder.wk", "encoder.bk", d)).collect();
            let v: Vec<_> = toks.iter().map(|t| self.affine(t, "encoder.wv", "encoder.bv", d)).collect();
            let dh = d / c.heads;
            let mut ctx = vec![f64::NEG_INFINITY; d];
            for i in 0..toks.len() {
                let mut att = vec![0.0; d];
                for h in 0..c.heads {
                    let r = h * dh..(h + 1) * dh;
                    let scores: Vec<f64> = (0..toks.len())
                        .map(|j| {
                            q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let z: f64 = scores.iter().map(|s| s.exp()).sum();
                    for (j, s) in scores.iter().enumerate() {
                        for m in r.clone() {
                            att[m] += s.exp() / z * v[j][m];
                        }
                    }
                }
                let att = self.affine(&att, "encoder.wo", "encoder.bo", d);
                let r1: Vec<f64> = toks[i].iter().zip(&att).map(|(a, b)| a + b).collect();
                let x1 = self.norm(&r1, "encoder.ln1_gamma", "encoder.ln1_beta");
                let hid: Vec<f64> = self
                    .affine(&x1, "encoder.ff_w1", "encoder.ff_b1", c.ff_dim)
                    .into_iter()
                    .map(|a| a.max(0.0))
                    .collect();
                let ff = self.affine(&hid, "encoder.ff_w2", "encoder.ff_b2", d);
                let r2: Vec<f64> = x1.iter().zip(&ff).map(|(a, b)| a + b).collect();
                let x2 = self.norm(&r2, "encoder.ln2_gamma", "encoder.ln2_beta");
                for m in 0..d {
                    ctx[m] = ctx[m].max(x2[m]);
                }
            }
            ctx
        }

        pub fn step(&self, obs: &[f64; 4], set: &CommandTokenSet, h: &[f64], cell: &[f64]) -> ([f64; 2], Vec<f64>, Vec<f64>) {
            let c = self.0.config();
            let f = c.feature_dim;
            let hd = c.hidden_dim;
            let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
            let x: Vec<f64> = self.affine(obs, "obs.w", "obs.b", f).into_iter().map(|a| a.max(0.0)).collect();
            let ctx = self.context(set);
            let gate = self.affine(&ctx, "gate.wc", "gate.bc", f);
            let proj = self.affine(&x, "gate.wx", "gate.bx", f);
            let y: Vec<f64> = proj.iter().zip(&gate).map(|(p, g)| p * sig(*g)).collect();
            let zi = self.affine(&y, "lstm.wi", "lstm.b", 4 * hd);
            let wh = self.v("lstm.wh");
            let z: Vec<f64> = (0..4 * hd)
                .map(|j| zi[j] + (0..hd).map(|i| h[i] * wh[i * 4 * hd + j]).sum::<f64>())
                .collect();
            let mut nh = vec![0.0; hd];
            let mut nc = vec![0.0; hd];
            for j in 0..hd {
                let (i, fg, g, o) = (sig(z[j]), sig(z[hd + j]), z[2 * hd + j].tanh(), sig(z[3 * hd + j]));
                nc[j] = fg * cell[j] + i * g;
                nh[j] = o * nc[j].tanh();
            }
            let l = self.affine(&nh, "head.w", "head.b", 2);
            ([l[0], l[1]], nh, nc)
        }
    }
}

#[test]
fn empty_token_set_gives_no_context() {
    let p = PolicyParams::init(small_config(), 1);
    assert!(encode(&p, &[CommandTokenSet::empty()], &TokenKind::ALL).is_none());
    // a set with no tokens next to a non-empty one pools to exact zeros
    let ctx = encode(&p, &[CommandTokenSet::empty(), full_set()], &TokenKind::ALL).unwrap();
    let d = p.config().token_dim();
    assert!(ctx[..d].iter().all(|&v| v == 0.0));
    assert!(ctx[d..].iter().any(|&v| v != 0.0));
}

#[test]
fn encoder_matches_loop_oracle() {
    let p = PolicyParams::init(small_config(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sets: Vec<_> = (0..8).map(|_| random_set(&mut rng)).collect();
    let ctx = encode(&p, &sets, &TokenKind::ALL).unwrap();
    let d = p.config().token_dim();
    for (i, s) in sets.iter().enumerate() {
        let want = oracle::P(&p).context(s);
        for (a, b) in ctx[i * d..(i + 1) * d].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn permuted_slots_give_same_context() {
    let p = PolicyParams::init(small_config(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sets: Vec<_> = (0..5).map(|_| random_set(&mut rng)).collect();
    let base = encode(&p, &sets, &TokenKind::ALL).unwrap();
    for _ in 0..20 {
        let mut order = TokenKind::ALL.to_vec();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let other = encode(&p, &sets, &order).unwrap();
        for (a, b) in base.iter().zip(&other) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn duplicated_token_matches_single() {
    let p = PolicyParams::init(small_config(), 6);
    let mut s = CommandTokenSet::empty();
    s.set(TokenKind::DesiredReturn, 0.4);
    let once = encode(&p, &[s], &[TokenKind::DesiredReturn]).unwrap();
    let twice = encode(&p, &[s], &[TokenKind::DesiredReturn, TokenKind::DesiredReturn]).unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn build_respects_both_masks() {
    let c = Command::new(100, 50.0).with_goal(Some(0.5));
    let t = CommandTokenSet::build(&c, &PrevStep::START, &TokenMask::NONE, 500.0);
    assert!(t.is_empty());

    let t = CommandTokenSet::build(&c, &PrevStep::START, &TokenMask::ALL, 500.0);
    assert_eq!(t.get(TokenKind::Horizon), Some(0.2));
    assert_eq!(t.get(TokenKind::DesiredReturn), Some(0.1));
    assert_eq!(t.get(TokenKind::Goal), Some(0.5));
    assert_eq!(t.get(TokenKind::PrevAction), Some(0.0));
    assert_eq!(t.get(TokenKind::PrevReward), Some(0.0));
    assert_eq!(t.get(TokenKind::PrevTerminal), Some(1.0));

    let masked = c.masked(crate::replay::CommandMask {
        horizon: true,
        desired_return: false,
        goal: false,
    });
    let t = CommandTokenSet::build(&masked, &PrevStep::after(Action::Right, 1.0), &TokenMask::ALL, 500.0);
    assert_eq!(t.get(TokenKind::DesiredReturn), None);
    assert_eq!(t.get(TokenKind::Goal), None);
    assert_eq!(t.get(TokenKind::PrevAction), Some(1.0));
    assert_eq!(t.get(TokenKind::PrevTerminal), Some(0.0));

    let no_goal = Command::new(10, 1.0);
    let t = CommandTokenSet::build(&no_goal, &PrevStep::START, &TokenMask::ALL, 500.0);
    assert_eq!(t.get(TokenKind::Goal), None);
}

#[test]
fn masked_token_value_is_ignored() {
    let p = PolicyParams::init(small_config(), 7);
    let mut a = full_set();
    a.present[TokenKind::Goal.index()] = false;
    let mut b = a;
    b.values[TokenKind::Goal.index()] = 123.0;
    let h = HiddenState::reset(p.config());
    let (da, _) = policy_forward(&p, &[0.1, 0.2, 0.3, 0.4], &a, &h).unwrap();
    let (db, _) = policy_forward(&p, &[0.1, 0.2, 0.3, 0.4], &b, &h).unwrap();
    assert_eq!(da, db);
}

#[test]
fn forward_matches_loop_oracle_over_several_steps() {
    let p = PolicyParams::init(small_config(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut h = HiddenState::reset(p.config());
    let (mut oh, mut oc) = (h.lstm_h.clone(), h.lstm_c.clone());
    for _ in 0..5 {
        let obs = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2), rng.gen_range(-1.0..1.0)];
        let set = random_set(&mut rng);
        let (d, nh) = policy_forward(&p, &obs, &set, &h).unwrap();
        let (want, wh, wc) = oracle::P(&p).step(&obs, &set, &oh, &oc);
        for (a, b) in d.logits.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        h = nh;
        oh = wh;
        oc = wc;
    }
}

#[test]
fn golden_logits_from_fresh_state() {
    let p = PolicyParams::init(PolicyConfig::default(), 0);
    let h = HiddenState::reset(p.config());
    let (d, _) = policy_forward(&p, &[0.01, -0.02, 0.03, -0.04], &full_set(), &h).unwrap();
    let golden = GOLDEN_LOGITS;
    for (a, b) in d.logits.iter().zip(&golden) {
        assert!((a - b).abs() < 1e-12, "logits {:?}", d.logits);
    }
    assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

const GOLDEN_LOGITS: [f64; 2] = [-0.6072681225068858, -0.3231012949587549];

#[test]
fn successive_calls_differ_for_random_params() {
    let obs = [0.02, 0.1, -0.03, 0.05];
    let set = full_set();
    for seed in 0..100 {
        let p = PolicyParams::init(small_config(), seed);
        let h0 = HiddenState::reset(p.config());
        let (d1, h1) = policy_forward(&p, &obs, &set, &h0).unwrap();
        let (d2, _) = policy_forward(&p, &obs, &set, &h1).unwrap();
        assert_ne!(d1.logits, d2.logits, "seed {seed}");
    }
}

#[test]
fn reset_state_forgets_history() {
    let p = PolicyParams::init(small_config(), 10);
    let set = full_set();
    let fresh = HiddenState::reset(p.config());
    assert!(fresh.lstm_h.iter().chain(&fresh.lstm_c).all(|&v| v == 0.0));
    assert_eq!(fresh.prev, PrevStep::START);
    let (first, _) = policy_forward(&p, &[0.1; 4], &set, &fresh).unwrap();
    let mut h = fresh.clone();
    for i in 0..10 {
        let (_, nh) = policy_forward(&p, &[i as f64 * 0.1, 0.0, 0.0, 0.0], &set, &h).unwrap();
        h = nh;
        h.observe(Action::Left, 1.0);
    }
    let h = HiddenState::reset(p.config());
    let (again, _) = policy_forward(&p, &[0.1; 4], &set, &h).unwrap();
    assert_eq!(first, again);
}

#[test]
fn hidden_dimension_mismatch_is_rejected() {
    let p = PolicyParams::init(small_config(), 11);
    let mut h = HiddenState::reset(p.config());
    h.lstm_h.push(0.0);
    assert!(matches!(
        policy_forward(&p, &[0.0; 4], &full_set(), &h),
        Err(PolicyError::DimensionMismatch { .. })
    ));
}

#[test]
fn batched_forward_matches_single_rows() {
    let p = PolicyParams::init(small_config(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let obs: Vec<[f64; 4]> = (0..4).map(|i| [i as f64 * 0.1, -0.1, 0.02, 0.3]).collect();
    let sets: Vec<_> = (0..4).map(|_| random_set(&mut rng)).collect();
    let hs: Vec<_> = (0..4).map(|_| HiddenState::reset(p.config())).collect();
    let (dists, _) = policy_forward_batch(&p, &obs, &sets, &hs).unwrap();
    for i in 0..4 {
        let (d, _) = policy_forward(&p, &obs[i], &sets[i], &hs[i]).unwrap();
        for (a, b) in d.logits.iter().zip(&dists[i].logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn act_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let sure = ActionDistribution::from_probs([1.0, 0.0]);
    assert!((0..1000).all(|_| act(&sure, &mut rng, ActMode::Sample) == Action::Left));
    let even = ActionDistribution::from_logits([0.0, 0.0]);
    let lefts = (0..10_000).filter(|_| act(&even, &mut rng, ActMode::Sample) == Action::Left).count();
    assert!((4700..=5300).contains(&lefts), "{lefts}");
    assert_eq!(act(&ActionDistribution::from_probs([0.4, 0.6]), &mut rng, ActMode::Greedy), Action::Right);
    assert_eq!(act(&even, &mut rng, ActMode::Greedy), Action::Left);
}

fn episode(len: usize, seed: u64, goal: Option<f64>) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts = (0..len)
        .map(|i| Transition {
            observation: [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)],
            action: if rng.gen_bool(0.5) { Action::Left } else { Action::Right },
            reward: 1.0,
            goal,
            terminal: i + 1 == len,
        })
        .collect();
    Episode::new(ts).unwrap()
}

fn zero_head(p: &mut PolicyParams) {
    for name in ["head.w", "head.b"] {
        let id = p.store().id(name).unwrap();
        p.store_mut().get_mut(id).values_mut().fill(0.0);
    }
}

#[test]
fn uniform_logits_give_ln2() {
    let mut p = PolicyParams::init(small_config(), 15);
    zero_head(&mut p);
    let seq = hindsight_segment(&episode(1, 1, None), 0, None);
    let mut tape = Tape::with_params(p.store());
    let loss = loss_batch(&mut tape, &p, &[seq], &TokenMask::ALL).unwrap();
    assert!((tape.value(loss)[0] - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn duplicated_batch_keeps_loss() {
    let p = PolicyParams::init(small_config(), 16);
    let a = hindsight_segment(&episode(7, 2, None), 0, None);
    let b = hindsight_segment(&episode(4, 3, None), 1, None);
    let once = [a.clone(), b.clone()];
    let twice = [a.clone(), b.clone(), a, b];
    let value = |batch: &[TrainingSequence]| {
        let mut tape = Tape::with_params(p.store());
        let l = loss_batch(&mut tape, &p, batch, &TokenMask::ALL).unwrap();
        tape.value(l)[0]
    };
    assert!((value(&once) - value(&twice)).abs() < 1e-12);
}

#[test]
fn padded_batch_is_step_weighted_mean() {
    let p = PolicyParams::init(small_config(), 17);
    let a = hindsight_segment(&episode(6, 4, None), 0, None);
    let b = hindsight_segment(&episode(2, 5, None), 0, None);
    let value = |batch: &[TrainingSequence]| {
        let mut tape = Tape::with_params(p.store());
        let l = loss_batch(&mut tape, &p, batch, &TokenMask::ALL).unwrap();
        tape.value(l)[0]
    };
    let joint = value(&[a.clone(), b.clone()]);
    let want = (6.0 * value(&[a]) + 2.0 * value(&[b])) / 8.0;
    assert!((joint - want).abs() < 1e-12);
}

#[test]
fn empty_batch_is_rejected() {
    let p = PolicyParams::init(small_config(), 18);
    let mut tape = Tape::with_params(p.store());
    assert!(matches!(loss_batch(&mut tape, &p, &[], &TokenMask::ALL), Err(PolicyError::EmptyBatch)));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut p = PolicyParams::init(small_config(), 19);
    let ep = episode(5, 6, Some(0.3));
    let batch = [hindsight_segment(&ep, 3, None), hindsight_segment(&ep, 1, Some(2))];
    assert_eq!(batch[0].len(), 2);
    loss_and_grad(&mut p, &batch, &TokenMask::ALL).unwrap();
    let names: Vec<String> = p.store().iter().map(|(_, n, _)| n.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for name in names {
        let id = p.store().id(&name).unwrap();
        let n = p.store().get(id).numel();
        let analytic = p.store().get(id).grad().unwrap().to_vec();
        let picks: Vec<usize> = (0..n.min(4)).map(|_| rng.gen_range(0..n)).collect();
        let mut a = Vec::new();
        let mut num = Vec::new();
        for &i in &picks {
            let base = p.store().get(id).values()[i];
            let mut probe = p.clone();
            let d = central_difference(
                |x| {
                    probe.store_mut().get_mut(id).values_mut()[i] = x[0];
                    let mut tape = Tape::with_params(probe.store());
                    let l = loss_batch(&mut tape, &probe, &batch, &TokenMask::ALL).unwrap();
                    tape.value(l)[0]
                },
                &[base],
                1e-5,
            );
            a.push(analytic[i]);
            num.push(d[0]);
        }
        let err = max_relative_error(&a, &num, 1e-4);
        assert!(err <= 1e-4, "{name}: {err} {a:?} {num:?}");
    }
}

#[test]
fn no_tokens_means_zero_encoder_gradients() {
    let mut p = PolicyParams::init(small_config(), 21);
    let batch: Vec<_> = (0..3).map(|i| hindsight_segment(&episode(6, 30 + i, None), 0, None)).collect();
    loss_and_grad(&mut p, &batch, &TokenMask::NONE).unwrap();
    for name in TOKEN_ENCODER_PARAMS.iter().chain(&["gate.wc"]) {
        let t = p.store().get(p.store().id(name).unwrap());
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0), "{name}");
    }
    let obs = p.store().get(p.store().id("obs.w").unwrap());
    assert!(obs.grad().unwrap().iter().any(|&g| g != 0.0));
}

#[test]
fn training_reduces_loss_on_fixed_memory() {
    let cfg = PolicyConfig {
        feature_dim: 16,
        hidden_dim: 16,
        ..PolicyConfig::default()
    };
    for seed in 0..3 {
        let eps: Vec<_> = (0..10).map(|i| episode(8 + i, seed * 100 + i as u64, None)).collect();
        let batch: Vec<_> = eps.iter().map(|e| hindsight_segment(e, 0, None)).collect();
        let mut p = PolicyParams::init(cfg, seed);
        let mut adam = AdamState::new(p.store(), AdamConfig::default());
        let initial = loss_and_grad(&mut p, &batch, &TokenMask::ALL).unwrap();
        let mut last = initial;
        for _ in 0..200 {
            last = loss_and_grad(&mut p, &batch, &TokenMask::ALL).unwrap();
            adam_step(p.store_mut(), &mut adam).unwrap();
            assert!(p.all_finite());
        }
        assert!(last < initial, "seed {seed}: {last} >= {initial}");
    }
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let p = PolicyParams::init(small_config(), 22);
    let text = checkpoint_to_string(&p);
    assert!(text.starts_with("GUDRL-CKPT v1 30\n"));
    let q = parse_checkpoint(&text, small_config()).unwrap();
    for ((_, n1, a), (_, n2, b)) in p.store().iter().zip(q.store().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.shape(), b.shape());
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    save_checkpoint(&p, &path).unwrap();
    assert_eq!(checkpoint_to_string(&load_checkpoint(&path, small_config()).unwrap()), text);
}

#[test]
fn bad_checkpoints_are_rejected() {
    let p = PolicyParams::init(small_config(), 23);
    let text = checkpoint_to_string(&p);
    assert!(matches!(parse_checkpoint("GUDRL-CKPT v2 30\n", small_config()), Err(PolicyError::CheckpointHeader(_))));
    let cut: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
    assert!(matches!(parse_checkpoint(&cut, small_config()), Err(PolicyError::Checkpoint { .. })));
    assert!(parse_checkpoint(&text, PolicyConfig::default()).is_err());
}
