//! Central finite-difference oracle for the gradient tape.

use discseg::tensor::{Graph, Mode, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps gradients that are
/// zero on both sides from dividing by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Builds a scalar loss from leaf variables holding `inputs`.
pub type LossFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn eval(inputs: &[Tensor], f: &LossFn) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.value(loss).item().expect("scalar loss")
}

/// Largest relative error between the tape's gradient and central
/// differences, over every element of every input.
pub fn max_rel_err(inputs: &[Tensor], f: &LossFn) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap();
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, so kinks such as relu's are never straddled.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values at least 0.01 apart, so no 2×2 window holds a near tie.
pub fn rand_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Scalar loss `Σ w ⊙ y` with fixed random weights, so every output
/// element carries a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = randn(&mut rng, g.value(y).shape());
    let wv = g.input(w);
    let p = g.mul(y, wv).unwrap();
    g.sum(p)
}

/// One named gradient check per differentiable operation, each evaluated
/// on `instances` random inputs. Returns `(name, worst relative error)`.
pub fn gradient_suite(instances: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, check: &dyn Fn(&mut ChaCha8Rng, u64) -> f64| {
        let mut worst: f64 = 0.0;
        for seed in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
            worst = worst.max(check(&mut rng, seed));
        }
        out.push((name, worst));
    };

    run("conv2d", &|rng, s| {
        let inputs = [
            randn(rng, &[1, 2, 5, 5]),
            randn(rng, &[3, 2, 3, 3]),
            randn(rng, &[3]),
        ];
        max_rel_err(&inputs, &|g, v| {
            let y = g.conv2d(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, s)
        })
    });
    run("conv1x1", &|rng, s| {
        let inputs = [
            randn(rng, &[2, 3, 3, 4]),
            randn(rng, &[2, 3, 1, 1]),
            randn(rng, &[2]),
        ];
        max_rel_err(&inputs, &|g, v| {
            let y = g.conv1x1(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, s)
        })
    });
    run("maxpool2", &|rng, s| {
        let inputs = [rand_distinct(rng, &[1, 1, 4, 4])];
        max_rel_err(&inputs, &|g, v| {
            let y = g.maxpool2(v[0]).unwrap();
            weighted_sum(g, y, s)
        })
    });
    run("batch_norm_train", &|rng, s| {
        let inputs = [
            randn(rng, &[2, 2, 3, 3]),
            randn(rng, &[2]),
            randn(rng, &[2]),
        ];
        max_rel_err(&inputs, &|g, v| {
            let mut stats = RunningStats::new(2);
            let y = g
                .batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train)
                .unwrap();
            weighted_sum(g, y, s)
        })
    });
    run("batch_norm_eval", &|rng, s| {
        let inputs = [
            randn(rng, &[2, 2, 3, 3]),
            randn(rng, &[2]),
            randn(rng, &[2]),
        ];
        let stats = RunningStats {
            mean: vec![0.3, -0.2],
            var: vec![0.5, 2.0],
        };
        max_rel_err(&inputs, &|g, v| {
            let mut st = stats.clone();
            let y = g.batch_norm(v[0], v[1], v[2], &mut st, Mode::Eval).unwrap();
            weighted_sum(g, y, s)
        })
    });
    run("relu", &|rng, s| {
        let inputs = [rand_away_from_zero(rng, &[2, 3, 4])];
        max_rel_err(&inputs, &|g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, s)
        })
    });
    run("sigmoid", &|rng, s| {
        let inputs = [randn(rng, &[2, 3, 4])];
        max_rel_err(&inputs, &|g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, s)
        })
    });
    run("dropout", &|rng, s| {
        let inputs = [randn(rng, &[2, 8])];
        max_rel_err(&inputs, &|g, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(s);
            let y = g.dropout(v[0], 0.3, Mode::Train, &mut mask_rng).unwrap();
            weighted_sum(g, y, s)
        })
    });
    run("linear", &|rng, s| {
        let inputs = [randn(rng, &[2, 3]), randn(rng, &[4, 3]), randn(rng, &[4])];
        max_rel_err(&inputs, &|g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, s)
        })
    });
    run("flatten", &|rng, s| {
        let inputs = [randn(rng, &[2, 2, 2, 2])];
        max_rel_err(&inputs, &|g, v| {
            let y = g.flatten(v[0]);
            weighted_sum(g, y, s)
        })
    });
    run("upsample2", &|rng, s| {
        let inputs = [randn(rng, &[1, 2, 3, 2])];
        max_rel_err(&inputs, &|g, v| {
            let y = g.upsample2(v[0]).unwrap();
            weighted_sum(g, y, s)
        })
    });
    run("concat_channels", &|rng, s| {
        let inputs = [randn(rng, &[2, 1, 3, 3]), randn(rng, &[2, 2, 3, 3])];
        max_rel_err(&inputs, &|g, v| {
            let y = g.concat_channels(v[0], v[1]).unwrap();
            weighted_sum(g, y, s)
        })
    });
    run("add_mul_scale", &|rng, s| {
        let inputs = [randn(rng, &[3, 4]), randn(rng, &[3, 4])];
        max_rel_err(&inputs, &|g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let m = g.mul(a, v[1]).unwrap();
            let y = g.scale(m, -1.7);
            weighted_sum(g, y, s)
        })
    });
    run("sigmoid_linear_chain", &|rng, _| {
        let inputs = [randn(rng, &[2, 3]), randn(rng, &[2, 3]), randn(rng, &[2])];
        max_rel_err(&inputs, &|g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            let y = g.sigmoid(y);
            g.sum(y)
        })
    });
    run("mse_loss", &|rng, _| {
        let target = randn(rng, &[3, 2])
            .data()
            .iter()
            .map(|v| v * 10.0)
            .collect();
        let target = Tensor::new(vec![3, 2], target).unwrap();
        let inputs = [randn(rng, &[3, 2])];
        max_rel_err(&inputs, &|g, v| g.mse_loss(v[0], &target).unwrap())
    });
    run("neg_log_soft_dice", &|rng, _| {
        let n = 2 * 4 * 4;
        let target: Vec<f64> = (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
            .collect();
        let target = Tensor::new(vec![2, 1, 4, 4], target).unwrap();
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let inputs = [Tensor::new(vec![2, 1, 4, 4], probs).unwrap()];
        max_rel_err(&inputs, &|g, v| g.neg_log_soft_dice(v[0], &target).unwrap())
    });
    out
}
