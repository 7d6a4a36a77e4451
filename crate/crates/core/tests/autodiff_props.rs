use gudrl_core::autodiff::numeric::{central_difference, max_relative_error};
use gudrl_core::autodiff::{Primitive, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
struct Case {
    kind: Primitive,
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn out_shape(kind: &Primitive, shapes: &[(usize, usize)]) -> (usize, usize) {
    match kind {
        Primitive::Matmul => (shapes[0].0, shapes[1].1),
        Primitive::Concat => (shapes[0].0, shapes.iter().map(|s| s.1).sum()),
        Primitive::EmbedLookup(idx) => (idx.len(), shapes[0].1),
        _ => shapes[0],
    }
}

fn make_case(which: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(1..4);
    let c = rng.gen_range(2..5);
    let (kind, shapes) = match which {
        0 => (Primitive::Add, vec![(r, c), (r, c)]),
        1 => (Primitive::Multiply, vec![(r, c), (r, c)]),
        2 => {
            let k = rng.gen_range(1..5);
            (Primitive::Matmul, vec![(r, k), (k, c)])
        }
        3 => {
            let c2 = rng.gen_range(1..4);
            (Primitive::Concat, vec![(r, c), (r, c2)])
        }
        4 => (Primitive::Sigmoid, vec![(r, c)]),
        5 => (Primitive::Tanh, vec![(r, c)]),
        6 => (Primitive::Relu, vec![(r, c)]),
        7 => {
            let n = rng.gen_range(2..4);
            (Primitive::MaxOverSet, vec![(r, c); n])
        }
        8 => {
            let rows = rng.gen_range(2..5);
            let idx = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..rows)).collect();
            (Primitive::EmbedLookup(idx), vec![(rows, c)])
        }
        9 => (Primitive::LayerNorm, vec![(r, c), (1, c), (1, c)]),
        _ => (Primitive::Softmax, vec![(r, c)]),
    };
    let mut values: Vec<Vec<f64>> = shapes.iter().map(|&(a, b)| uniform(&mut rng, a * b)).collect();
    match kind {
        Primitive::Relu => {
            for v in values[0].iter_mut() {
                if v.abs() < 1e-2 {
                    *v += 0.05;
                }
            }
        }
        Primitive::MaxOverSet => {
            // keep every candidate at least 1e-2 away from the others
            let n = values[0].len();
            for i in 0..n {
                let mut seen: Vec<f64> = Vec::new();
                for part in values.iter_mut() {
                    while seen.iter().any(|s| (s - part[i]).abs() < 1e-2) {
                        part[i] = rng.gen_range(-2.0..2.0);
                    }
                    seen.push(part[i]);
                }
            }
        }
        _ => {}
    }
    let (orows, ocols) = out_shape(&kind, &shapes);
    let weights = uniform(&mut rng, orows * ocols);
    Case {
        kind,
        shapes,
        values,
        weights,
    }
}

/// `sum(w * kind(inputs))`, with the gradient of every input.
fn evaluate(case: &Case, values: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let inputs: Vec<_> = case
        .shapes
        .iter()
        .zip(values)
        .map(|(&(r, c), v)| tape.input(Tensor::matrix(r, c, v.clone()).unwrap()))
        .collect();
    let out = tape.apply(&case.kind, &inputs).unwrap();
    let (r, c) = out_shape(&case.kind, &case.shapes);
    let w = tape.constant(r, c, case.weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = inputs.iter().map(|&v| grads.get(v).map_or(vec![0.0; tape.value(v).len()], <[f64]>::to_vec)).collect();
    (tape.value(loss)[0], g)
}

fn flatten(values: &[Vec<f64>]) -> Vec<f64> {
    values.iter().flatten().copied().collect()
}

fn unflatten(flat: &[f64], like: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut at = 0;
    like.iter()
        .map(|v| {
            let part = flat[at..at + v.len()].to_vec();
            at += v.len();
            part
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_primitive_matches_finite_differences(which in 0usize..11, seed in any::<u64>()) {
        let case = make_case(which, seed);
        let (_, analytic) = evaluate(&case, &case.values);
        let x = flatten(&case.values);
        let numeric = central_difference(|p| evaluate(&case, &unflatten(p, &case.values)).0, &x, H);
        let err = max_relative_error(&flatten(&analytic), &numeric, FLOOR);
        prop_assert!(err <= TOL, "{} rel error {err}", case.kind.name());
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let xv = uniform(&mut rng, r * c);
        let run = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::matrix(r, c, xv.clone()).unwrap());
            let s = tape.sigmoid(x).unwrap();
            let f = tape.sum(s).unwrap();
            let t = tape.tanh(x).unwrap();
            let sq = tape.mul(t, x).unwrap();
            let g = tape.sum(sq).unwrap();
            let loss = match which {
                0 => f,
                1 => g,
                _ => tape.add(f, g).unwrap(),
            };
            tape.backward(loss).unwrap().get(x).unwrap().to_vec()
        };
        let (gf, gg, gsum) = (run(0), run(1), run(2));
        for i in 0..gsum.len() {
            prop_assert!((gsum[i] - (gf[i] + gg[i])).abs() <= 1e-12 * (1.0 + gsum[i].abs()));
        }
    }

    #[test]
    fn replay_and_backward_are_deterministic(which in 0usize..11, seed in any::<u64>()) {
        let case = make_case(which, seed);
        let a = evaluate(&case, &case.values);
        let b = evaluate(&case, &case.values);
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
        let mut tape = Tape::new();
        let inputs: Vec<_> = case.shapes.iter().zip(&case.values)
            .map(|(&(r, c), v)| tape.input(Tensor::matrix(r, c, v.clone()).unwrap()))
            .collect();
        tape.apply(&case.kind, &inputs).unwrap();
        let replayed = tape.replay().unwrap();
        for (v, values) in tape.vars().zip(&replayed) {
            prop_assert_eq!(tape.value(v), values.as_slice());
        }
    }

    #[test]
    fn softmax_rows_are_probability_vectors(seed in any::<u64>(), r in 1usize..5, c in 1usize..7, spread in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = uniform(&mut rng, r * c).into_iter().map(|x| x * spread).collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(r, c, v).unwrap());
        let p = tape.softmax(x).unwrap();
        for row in tape.value(p).chunks(c) {
            prop_assert!(row.iter().all(|&q| q >= 0.0 && q.is_finite()));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
