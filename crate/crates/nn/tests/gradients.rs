//! Finite-difference and direct-summation oracles for every op kind.

use hcmvp_nn::{Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn eval(inputs: &[(Vec<usize>, Vec<f64>)], f: &Build) -> (f64, Vec<bool>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, v)| tape.leaf_f64(s.clone(), v.clone()).unwrap())
        .collect();
    let out = f(&mut tape, &vars);
    (tape.scalar(out), tape.relu_pattern())
}

/// Returns the worst relative error over all coordinates, skipping probes
/// that cross a ReLU kink.
fn fd_check(inputs: &[(Vec<usize>, Vec<f64>)], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, v)| tape.leaf_f64(s.clone(), v.clone()).unwrap())
        .collect();
    let out = f(&mut tape, &vars);
    let pattern = tape.relu_pattern();
    tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        for j in 0..analytic.len() {
            let mut plus = inputs.to_vec();
            plus[i].1[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].1[j] -= H;
            let (fp, pp) = eval(&plus, f);
            let (fm, pm) = eval(&minus, f);
            if pp != pattern || pm != pattern {
                continue;
            }
            let numeric = (fp - fm) / (2.0 * H);
            let diff = (numeric - analytic[j]).abs();
            if diff > 1e-9 {
                worst = worst.max(diff / numeric.abs().max(analytic[j].abs()));
            }
        }
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Weighted sum so the scalar output depends on every output entry.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let n = tape.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let flat = tape.reshape(y, vec![n]).unwrap();
    let target = tape.leaf_f64(vec![n], w).unwrap();
    tape.mse(flat, target).unwrap()
}

#[test]
fn dense_relu_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let inputs = vec![
            random(&mut rng, &[2, 5]),
            random(&mut rng, &[6, 5]),
            random(&mut rng, &[6]),
            random(&mut rng, &[3, 6]),
            random(&mut rng, &[3]),
        ];
        let f = move |t: &mut Tape, v: &[Var]| {
            let h = t.dense(v[0], v[1], v[2]).unwrap();
            let h = t.relu(h).unwrap();
            let y = t.dense(h, v[3], v[4]).unwrap();
            project(t, y, trial)
        };
        let err = fd_check(&inputs, &f);
        assert!(err < TOL, "trial {trial}: {err}");
    }
}

#[test]
fn conv_pool_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..10 {
        let inputs = vec![
            random(&mut rng, &[2, 4, 3]),
            random(&mut rng, &[3, 2, 3, 3]),
            random(&mut rng, &[3]),
        ];
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], v[2]).unwrap();
            let y = t.relu(y).unwrap();
            let p = t.mean_pool(y).unwrap();
            let tok = t.tokens(y).unwrap();
            let tok = t.reshape(tok, vec![36]).unwrap();
            let both = t.concat(&[p, tok]).unwrap();
            project(t, both, trial)
        };
        let err = fd_check(&inputs, &f);
        assert!(err < TOL, "trial {trial}: {err}");
    }
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..20 {
        let inputs = vec![
            random(&mut rng, &[5, 4]),
            random(&mut rng, &[5, 3]),
            random(&mut rng, &[4]),
        ];
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.attention(v[0], v[1], v[2]).unwrap();
            let s = t.scale(y, 1.7).unwrap();
            let p = t.pick(s, (trial % 3) as usize).unwrap();
            let z = t.leaf_f64(vec![1], vec![0.3]).unwrap();
            t.mse(p, z).unwrap()
        };
        let err = fd_check(&inputs, &f);
        assert!(err < TOL, "trial {trial}: {err}");
    }
}

#[test]
fn attention_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let t_len = rng.gen_range(1..8);
        let d = rng.gen_range(1..6);
        let dv = rng.gen_range(1..5);
        let (_, keys) = random(&mut rng, &[t_len, d]);
        let (_, values) = random(&mut rng, &[t_len, dv]);
        let (_, query) = random(&mut rng, &[d]);

        let mut tape = Tape::new();
        let k = tape.leaf_f64(vec![t_len, d], keys.clone()).unwrap();
        let v = tape.leaf_f64(vec![t_len, dv], values.clone()).unwrap();
        let q = tape.leaf_f64(vec![d], query.clone()).unwrap();
        let out = tape.attention(k, v, q).unwrap();

        let scores: Vec<f64> = (0..t_len)
            .map(|i| {
                let dot: f64 = (0..d).map(|c| keys[i * d + c] * query[c]).sum();
                (dot / (d as f64).sqrt()).exp()
            })
            .collect();
        let z: f64 = scores.iter().sum();
        for j in 0..dv {
            let expected: f64 = (0..t_len).map(|i| scores[i] / z * values[i * dv + j]).sum();
            assert!((tape.value(out)[j] - expected).abs() < 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn attention_weights_sum_to_one(
        keys in proptest::collection::vec(-5.0f64..5.0, 12),
        query in proptest::collection::vec(-5.0f64..5.0, 3),
    ) {
        let mut tape = Tape::new();
        let k = tape.leaf_f64(vec![4, 3], keys).unwrap();
        let v = tape.leaf_f64(vec![4, 1], vec![1.0; 4]).unwrap();
        let q = tape.leaf_f64(vec![3], query).unwrap();
        let out = tape.attention(k, v, q).unwrap();
        let total: f64 = tape.attention_weights(out).unwrap().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }
}
