//! Synthetic conditional mixtures with known mode structure.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Point = [f64; 2];

/// Separation required between two centers of one context, in units of
/// `mode_sigma`.
pub const MIN_SEPARATION_SIGMAS: f64 = 6.0;

/// Per-context Gaussian mixtures with equal weights and a shared isotropic
/// standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalMixtureSpec {
    centers: Vec<Vec<Point>>,
    mode_sigma: f64,
}

impl ConditionalMixtureSpec {
    /// Validates that every context has the same number of modes and that
    /// centers within a context are more than six sigmas apart.
    pub fn new(centers: Vec<Vec<Point>>, mode_sigma: f64) -> Result<Self> {
        if !(mode_sigma > 0.0 && mode_sigma.is_finite()) {
            return Err(Error::Contract(format!(
                "mode_sigma must be positive, got {mode_sigma}"
            )));
        }
        let k = centers.first().map_or(0, Vec::len);
        if centers.is_empty() || k == 0 {
            return Err(Error::Contract("mixture needs at least one context and mode".into()));
        }
        for (c, modes) in centers.iter().enumerate() {
            if modes.len() != k {
                return Err(Error::Contract(format!(
                    "context {c} has {} modes, expected {k}",
                    modes.len()
                )));
            }
            if modes.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("context {c} has a non-finite center")));
            }
            for i in 0..k {
                for j in i + 1..k {
                    let d = distance(modes[i], modes[j]);
                    if d <= MIN_SEPARATION_SIGMAS * mode_sigma {
                        return Err(Error::Contract(format!(
                            "context {c}: modes {i} and {j} are {d} apart, need > {}",
                            MIN_SEPARATION_SIGMAS * mode_sigma
                        )));
                    }
                }
            }
        }
        Ok(ConditionalMixtureSpec {
            centers,
            mode_sigma,
        })
    }

    /// `modes` centers evenly spaced on a circle of `radius`, with context
    /// `c` rotated by `c * rotation_step` radians.
    pub fn ring(
        num_contexts: usize,
        modes: usize,
        radius: f64,
        rotation_step: f64,
        mode_sigma: f64,
    ) -> Result<Self> {
        let centers = (0..num_contexts)
            .map(|c| {
                (0..modes)
                    .map(|m| {
                        let angle = 2.0 * PI * m as f64 / modes as f64 + c as f64 * rotation_step;
                        [radius * angle.cos(), radius * angle.sin()]
                    })
                    .collect()
            })
            .collect();
        Self::new(centers, mode_sigma)
    }

    pub fn num_contexts(&self) -> usize {
        self.centers.len()
    }

    pub fn modes_per_context(&self) -> usize {
        self.centers[0].len()
    }

    pub fn total_modes(&self) -> usize {
        self.num_contexts() * self.modes_per_context()
    }

    pub fn mode_sigma(&self) -> f64 {
        self.mode_sigma
    }

    pub fn all_centers(&self) -> &[Vec<Point>] {
        &self.centers
    }

    pub fn centers(&self, context: usize) -> Result<&[Point]> {
        self.centers
            .get(context)
            .map(Vec::as_slice)
            .ok_or(Error::Range {
                what: "context",
                value: context,
                limit: self.centers.len(),
            })
    }

    /// Mean of the context's mode centers, which is also the mean of its
    /// mixture.
    pub fn centroid(&self, context: usize) -> Result<Point> {
        let centers = self.centers(context)?;
        let n = centers.len() as f64;
        Ok(centers
            .iter()
            .fold([0.0, 0.0], |acc, c| [acc[0] + c[0] / n, acc[1] + c[1] / n]))
    }

    /// Smallest distance between two centers of the same context.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for modes in &self.centers {
            for i in 0..modes.len() {
                for j in i + 1..modes.len() {
                    best = best.min(distance(modes[i], modes[j]));
                }
            }
        }
        best
    }
}

/// Four contexts of eight modes on a radius-2 ring, each context rotated a
/// further π/16, with σ = 0.02.
pub fn default_ring_spec() -> ConditionalMixtureSpec {
    ConditionalMixtureSpec::ring(4, 8, 2.0, PI / 16.0, 0.02).expect("default ring is valid")
}

pub fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Draws `n` points from the mixture of `context`: a uniformly chosen mode
/// center plus isotropic Gaussian noise.
pub fn sample_real(
    spec: &ConditionalMixtureSpec,
    context: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Point>> {
    let centers = spec.centers(context)?;
    if n == 0 {
        return Err(Error::Contract("sample_real needs n > 0".into()));
    }
    Ok((0..n)
        .map(|_| sample_one(centers, spec.mode_sigma, rng))
        .collect())
}

fn sample_one(centers: &[Point], sigma: f64, rng: &mut Rng) -> Point {
    let c = centers[rng.random_range(0..centers.len())];
    let dx: f64 = StandardNormal.sample(rng);
    let dy: f64 = StandardNormal.sample(rng);
    [c[0] + sigma * dx, c[1] + sigma * dy]
}

/// `n` standard-normal latent vectors as an `[n, dim]` tensor.
pub fn sample_noise(dim: usize, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if dim == 0 || n == 0 {
        return Err(Error::Contract(format!(
            "sample_noise needs dim > 0 and n > 0, got dim={dim} n={n}"
        )));
    }
    let data = (0..dim * n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![n, dim], data)
}

/// Condition ids for one training batch together with a real sample drawn
/// under each id.
///
/// The sentence and word embeddings that go with each label are learned
/// tables owned by the generator; see [`crate::models::Generator::embed`].
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    pub labels: Vec<usize>,
    pub real: Vec<Point>,
}

impl ContextBatch {
    pub fn sample(spec: &ConditionalMixtureSpec, batch_size: usize, rng: &mut Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Contract("batch_size must be positive".into()));
        }
        let mut labels = Vec::with_capacity(batch_size);
        let mut real = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let label = rng.random_range(0..spec.num_contexts());
            labels.push(label);
            real.push(sample_one(&spec.centers[label], spec.mode_sigma, rng));
        }
        Ok(ContextBatch { labels, real })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn real_tensor(&self) -> Tensor {
        points_tensor(&self.real)
    }
}

pub fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::new(vec![points.len(), 2], points.iter().flatten().copied().collect())
        .expect("two coordinates per point")
}

pub fn tensor_points(t: &Tensor) -> Vec<Point> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}
