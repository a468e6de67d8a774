//! Central-difference checks of every differentiable op and every loss,
//! shared by the `gradcheck` and `acceptance` targets.

use mslab::autodiff::{Graph, Tensor, Var};
use mslab::error::Result;
use mslab::losses;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::sync::Mutex;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CASES: usize = 100;

static CHECKED_OPS: Mutex<BTreeSet<&'static str>> = Mutex::new(BTreeSet::new());
static CHECKED_LOSSES: Mutex<BTreeSet<String>> = Mutex::new(BTreeSet::new());

/// Op kinds that appeared in at least one checked graph.
pub fn checked_ops() -> BTreeSet<&'static str> {
    CHECKED_OPS.lock().unwrap().clone()
}

/// Names passed to [`check`] so far.
pub fn checked_names() -> BTreeSet<String> {
    CHECKED_LOSSES.lock().unwrap().clone()
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    g.value(out).item().unwrap()
}

/// Compares analytic and numeric gradients of `build` at `inputs`.
fn check_at(name: &str, build: &Build, inputs: &[Tensor]) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    CHECKED_OPS.lock().unwrap().extend(g.ops().map(|k| k.name()));
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k] = nudge(input, i, H);
            minus[k] = nudge(input, i, -H);
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                rel < TOL,
                "{name}: input {k} element {i}: analytic {a}, numeric {numeric}, rel {rel}"
            );
        }
    }
}

fn nudge(t: &Tensor, i: usize, by: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] += by;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Runs `CASES` random checks; `make` draws the inputs.
fn check(name: &str, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: &Build) {
    CHECKED_LOSSES.lock().unwrap().insert(name.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..CASES {
        let inputs = make(&mut rng);
        check_at(name, build, &inputs);
    }
}

/// Reduces a tensor output to a scalar through fixed random weights so every
/// element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 0.1, 2.0);
    let signs: Vec<f64> = (0..t.numel()).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let data: Vec<f64> = t.data().iter().zip(&signs).map(|(v, s)| v * s).collect();
    t = Tensor::new(shape.to_vec(), data).unwrap();
    t
}

pub fn binary_elementwise() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -2.0, 2.0), random(r, &[3, 4], -2.0, 2.0)];
    check("add", 1, make, &|g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 10)
    });
    check("sub", 2, make, &|g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y, 11)
    });
    check("mul", 3, make, &|g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 12)
    });
}

pub fn matrix_products() {
    check(
        "matmul",
        4,
        |r| vec![random(r, &[3, 5], -1.0, 1.0), random(r, &[5, 2], -1.0, 1.0)],
        &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 13)
        },
    );
    check(
        "affine",
        5,
        |r| {
            vec![
                random(r, &[4, 3], -1.0, 1.0),
                random(r, &[3, 5], -1.0, 1.0),
                random(r, &[5], -1.0, 1.0),
            ]
        },
        &|g, v| {
            let y = g.affine(v[0], v[1], v[2])?;
            weighted_sum(g, y, 14)
        },
    );
    check(
        "batch_matmul",
        6,
        |r| vec![random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[2, 4, 2], -1.0, 1.0)],
        &|g, v| {
            let y = g.batch_matmul(v[0], v[1])?;
            weighted_sum(g, y, 15)
        },
    );
    check("transpose", 7, |r| vec![random(r, &[3, 4], -1.0, 1.0)], &|g, v| {
        let y = g.transpose(v[0])?;
        weighted_sum(g, y, 16)
    });
}

pub fn unary_elementwise() {
    let wide = |r: &mut ChaCha8Rng| vec![random(r, &[2, 5], -3.0, 3.0)];
    let positive = |r: &mut ChaCha8Rng| vec![random(r, &[2, 5], 0.2, 3.0)];
    check("sigmoid", 20, wide, &|g, v| {
        let y = g.sigmoid(v[0])?;
        weighted_sum(g, y, 21)
    });
    check("tanh", 22, wide, &|g, v| {
        let y = g.tanh(v[0])?;
        weighted_sum(g, y, 23)
    });
    check("relu", 24, |r| vec![away_from_zero(r, &[2, 5])], &|g, v| {
        let y = g.relu(v[0])?;
        weighted_sum(g, y, 25)
    });
    check("exp", 26, wide, &|g, v| {
        let y = g.exp(v[0])?;
        weighted_sum(g, y, 27)
    });
    check("log", 28, positive, &|g, v| {
        let y = g.log(v[0])?;
        weighted_sum(g, y, 29)
    });
    check("scale", 30, wide, &|g, v| {
        let y = g.scale(v[0], -1.7)?;
        weighted_sum(g, y, 31)
    });
    check("add_scalar", 32, wide, &|g, v| {
        let y = g.add_scalar(v[0], 0.3)?;
        weighted_sum(g, y, 33)
    });
    check("one_minus", 34, wide, &|g, v| {
        let y = g.one_minus(v[0])?;
        weighted_sum(g, y, 35)
    });
    check("powf", 36, positive, &|g, v| {
        let y = g.powf(v[0], 1.5)?;
        weighted_sum(g, y, 37)
    });
    // keep samples clear of the clamp edges
    check(
        "clamp",
        38,
        |r| {
            let t = away_from_zero(r, &[2, 5]);
            let data = t.data().iter().map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 0.8 } else { *v }).collect();
            vec![Tensor::new(vec![2, 5], data).unwrap()]
        },
        &|g, v| {
            let y = g.clamp(v[0], -1.0, 1.0)?;
            weighted_sum(g, y, 39)
        },
    );
}

pub fn row_operations() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -2.0, 2.0)];
    check("softmax_lastdim", 40, make, &|g, v| {
        let y = g.softmax_lastdim(v[0])?;
        weighted_sum(g, y, 41)
    });
    check("log_softmax_lastdim", 42, make, &|g, v| {
        let y = g.log_softmax_lastdim(v[0])?;
        weighted_sum(g, y, 43)
    });
    check("sum", 44, make, &|g, v| {
        let y = g.sum(v[0])?;
        g.scale(y, 0.7)
    });
    check("mean", 45, make, &|g, v| {
        let y = g.mean(v[0])?;
        g.scale(y, 1.3)
    });
    check("sum_lastdim", 46, make, &|g, v| {
        let y = g.sum_lastdim(v[0])?;
        weighted_sum(g, y, 47)
    });
    check(
        "row_scale",
        48,
        |r| vec![random(r, &[3, 4], -2.0, 2.0), random(r, &[3], -2.0, 2.0)],
        &|g, v| {
            let y = g.row_scale(v[0], v[1])?;
            weighted_sum(g, y, 49)
        },
    );
    check(
        "broadcast_add",
        50,
        |r| vec![random(r, &[3, 4], -2.0, 2.0), random(r, &[4], -2.0, 2.0)],
        &|g, v| {
            let y = g.broadcast_add(v[0], v[1])?;
            weighted_sum(g, y, 51)
        },
    );
    check(
        "concat_lastdim",
        52,
        |r| {
            vec![
                random(r, &[3, 2], -2.0, 2.0),
                random(r, &[3, 3], -2.0, 2.0),
                random(r, &[3, 1], -2.0, 2.0),
            ]
        },
        &|g, v| {
            let y = g.concat_lastdim(v)?;
            weighted_sum(g, y, 53)
        },
    );
    check("gather_rows", 54, make, &|g, v| {
        let y = g.gather_rows(v[0], &[2, 0, 2, 1])?;
        weighted_sum(g, y, 55)
    });
    check("reshape", 56, make, &|g, v| {
        let y = g.reshape(v[0], &[2, 6])?;
        weighted_sum(g, y, 57)
    });
}

pub fn distances() {
    // L1 is non-differentiable where coordinates coincide; keep them apart
    let make = |r: &mut ChaCha8Rng| {
        let a = random(r, &[3, 4], -2.0, 2.0);
        let gap = away_from_zero(r, &[3, 4]);
        let b: Vec<f64> = a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect();
        vec![a, Tensor::new(vec![3, 4], b).unwrap()]
    };
    check("l1_distance", 60, make, &|g, v| {
        let y = g.l1_distance(v[0], v[1])?;
        weighted_sum(g, y, 61)
    });
    check("l2_distance_sq", 62, make, &|g, v| {
        let y = g.l2_distance_sq(v[0], v[1])?;
        weighted_sum(g, y, 63)
    });
}

pub fn shared_inputs_accumulate() {
    check("x*x + x", 64, |r| vec![random(r, &[2, 3], -2.0, 2.0)], &|g, v| {
        let sq = g.mul(v[0], v[0])?;
        let y = g.add(sq, v[0])?;
        weighted_sum(g, y, 65)
    });
    check(
        "two matmul consumers",
        66,
        |r| vec![random(r, &[3, 3], -1.0, 1.0), random(r, &[3, 3], -1.0, 1.0)],
        &|g, v| {
            let a = g.matmul(v[0], v[1])?;
            let b = g.matmul(v[1], v[0])?;
            let c = g.matmul(a, v[0])?;
            let y = g.add(b, c)?;
            weighted_sum(g, y, 67)
        },
    );
}

fn probabilities(r: &mut ChaCha8Rng, n: usize) -> Tensor {
    random(r, &[n], 0.05, 0.95)
}

pub fn adversarial_losses() {
    check(
        "generator_adversarial_loss",
        70,
        |r| vec![probabilities(r, 6), probabilities(r, 6)],
        &|g, v| losses::generator_adversarial_loss(g, v[0], v[1]),
    );
    check(
        "discriminator_loss",
        71,
        |r| {
            vec![
                probabilities(r, 5),
                probabilities(r, 5),
                probabilities(r, 5),
                probabilities(r, 5),
            ]
        },
        &|g, v| losses::discriminator_loss(g, v[0], v[1], v[2], v[3]),
    );
}

pub fn ca_kl() {
    check(
        "ca_kl_loss",
        72,
        |r| vec![random(r, &[4, 3], -1.5, 1.5), random(r, &[4, 3], -1.5, 1.5)],
        &|g, v| losses::ca_kl_loss(g, v[0], v[1]),
    );
}

pub fn matching() {
    check(
        "matching_loss",
        73,
        |r| vec![random(r, &[5, 4], -1.0, 1.0), random(r, &[5, 4], -1.0, 1.0)],
        &|g, v| losses::matching_loss(g, v[0], v[1], &[0, 1, 0, 2, 1], 0.5),
    );
}

pub fn mode_seeking() {
    check(
        "mode_seeking_penalty",
        74,
        |r| {
            let x1 = random(r, &[4, 2], -2.0, 2.0);
            let gap = away_from_zero(r, &[4, 2]);
            let x2: Vec<f64> = x1.data().iter().zip(gap.data()).map(|(a, d)| a + d).collect();
            vec![x1, Tensor::new(vec![4, 2], x2).unwrap()]
        },
        &|g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(75);
            let z1 = random(&mut rng, &[4, 3], -1.0, 1.0);
            let z2 = random(&mut rng, &[4, 3], 1.5, 2.5);
            let (ratio, penalty) = losses::mode_seeking_penalty(g, v[0], v[1], &z1, &z2, 1e-5)?;
            let r = g.scale(ratio, 0.3)?;
            g.add(penalty, r)
        },
    );
}

pub fn total_generator() {
    let weights = losses::LossWeights {
        lambda1: 0.7,
        lambda2: 5.0,
        lambda_ms: 1.5,
        epsilon_ms: 1e-5,
    };
    check(
        "total_generator_loss",
        76,
        |r| (0..6).map(|_| Tensor::scalar(r.random_range(-2.0..2.0))).collect(),
        &move |g, v| {
            let terms = losses::GeneratorTerms {
                adv_per_stage: vec![v[0], v[1]],
                ca: v[2],
                matching: v[3],
                ms_ratio: v[4],
                ms_penalty: v[5],
            };
            let (total, _) = losses::total_generator_loss(g, &terms, &weights)?;
            let squared = g.mul(total, total)?;
            g.add(squared, total)
        },
    );
}

/// Every suite, in a fixed order.
pub const SUITES: [(&str, fn()); 11] = [
    ("binary elementwise", binary_elementwise),
    ("matrix products", matrix_products),
    ("unary elementwise", unary_elementwise),
    ("row operations", row_operations),
    ("distances", distances),
    ("shared inputs", shared_inputs_accumulate),
    ("adversarial losses", adversarial_losses),
    ("ca kl", ca_kl),
    ("matching", matching),
    ("mode seeking", mode_seeking),
    ("total generator", total_generator),
];

/// Loss functions the suites must exercise.
pub const LOSSES: [&str; 6] = [
    "generator_adversarial_loss",
    "discriminator_loss",
    "ca_kl_loss",
    "matching_loss",
    "mode_seeking_penalty",
    "total_generator_loss",
];
