//! Finite-difference checks for every primitive, 20 random instances each.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splm_autodiff::{grad_check_detailed, CheckOptions, Difference, Graph, Result, Tensor, Var};

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-6;
/// Gradients below this are compared absolutely, at `TOL * FLOOR`.
const FLOOR: f64 = 1e-5;

fn t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    // keep away from relu kinks so central differences stay on one side
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any node to a scalar with fixed random weights so no coordinate of
/// the gradient is structurally tiny.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let n = g.value(y).len();
    let w = g.constant(g.shape(y).to_vec(), (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(seed: u64, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let opts = CheckOptions { floor: FLOOR, difference: Difference::Richardson, ..CheckOptions::central(EPS) };
    let err = grad_check_detailed(
        |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, seed)
        },
        inputs,
        &opts,
    )
    .unwrap()
    .max_rel_error;
    assert!(err < TOL, "seed {seed}: max rel err {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn add_sub_mul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[3, 4]), t(&mut rng, &[3, 4])];
        check(seed, &ins, |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            Ok(g.scale(c, 1.5))
        });
    }

    #[test]
    fn row_broadcasts(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[2, 3, 4]), t(&mut rng, &[4]), t(&mut rng, &[4])];
        check(seed, &ins, |g, v| {
            let a = g.add_row(v[0], v[1])?;
            g.mul_row(a, v[2])
        });
    }

    #[test]
    fn relu(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(seed, &[t(&mut rng, &[10])], |g, v| Ok(g.relu(v[0])));
        check(seed, &[t(&mut rng, &[10])], |g, v| Ok(g.sigmoid(v[0])));
    }

    #[test]
    fn matmul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[2, 3, 4]), t(&mut rng, &[4, 5])];
        check(seed, &ins, |g, v| g.matmul(v[0], v[1]));
    }

    #[test]
    fn batched_matmul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[2, 3, 4]), t(&mut rng, &[2, 4, 5]), t(&mut rng, &[2, 5, 4])];
        check(seed, &ins, |g, v| {
            let a = g.bmm(v[0], v[1], false)?;
            let b = g.bmm(v[0], v[2], true)?;
            let s = g.sum(b);
            let a = g.sum(a);
            g.add(a, s)
        });
    }

    #[test]
    fn softmax(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[2, 5, 5])];
        check(seed, &ins, |g, v| g.softmax(v[0], false));
        check(seed, &ins, |g, v| g.softmax(v[0], true));
    }

    #[test]
    fn layer_norm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[3, 6]), t(&mut rng, &[6]), t(&mut rng, &[6])];
        check(seed, &ins, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn embedding(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[5, 3])];
        check(seed, &ins, |g, v| g.embedding(v[0], &[4, 0, 4, 2]));
    }

    #[test]
    fn cross_entropy(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[4, 27])];
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..27)).collect();
        // already scalar; the weighted sum just rescales it
        check(seed, &ins, |g, v| g.cross_entropy(v[0], &targets));
    }

    #[test]
    fn huber(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[12])];
        // targets at least 0.01 away from the |r| = delta switch points
        let target: Vec<f64> = ins[0].data().iter().enumerate()
            .map(|(i, &p)| if i % 2 == 0 { p + 0.3 } else { p - 2.0 }).collect();
        check(seed, &ins, |g, v| g.huber(v[0], &target, 1.0));
    }

    #[test]
    fn reshape_permute_reductions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[2, 3, 4])];
        check(seed, &ins, |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            let r = g.reshape(p, &[4, 6])?;
            let s = g.sum_axis(r, 1)?;
            let m = g.mean_axis(v[0], 1)?;
            let ms = g.mean(m);
            let ss = g.sum(s);
            g.add(ms, ss)
        });
    }

    #[test]
    fn causal_conv1d(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[3, 8]), t(&mut rng, &[5])];
        check(seed, &ins, |g, v| g.causal_conv1d(v[0], v[1]));
    }

    #[test]
    fn conv_bank(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[2, 8]), t(&mut rng, &[2 + 3 + 5])];
        check(seed, &ins, |g, v| g.conv_bank(v[0], v[1], &[2, 3, 5]));
    }

    #[test]
    fn dropout(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [t(&mut rng, &[10])];
        let keep: Vec<bool> = (0..10).map(|_| rng.random_bool(0.7)).collect();
        check(seed, &ins, |g, v| g.dropout(v[0], &keep, 0.3));
    }
}
