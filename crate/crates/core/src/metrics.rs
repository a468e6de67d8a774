//! Mode coverage, sample quality and Fréchet distance of generated samples.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{distance, sample_real, ConditionalMixtureSpec, Point};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_THRESHOLD_SIGMAS: f64 = 3.0;

/// Nearest-mode assignment of samples for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeAssignment {
    /// Samples whose nearest center is each mode.
    pub counts: Vec<usize>,
    /// Of those, samples within `threshold_sigmas * mode_sigma` of it.
    pub high_quality: Vec<usize>,
    pub hq_ratio: f64,
    pub modes_covered: usize,
}

/// Assigns every sample to its nearest mode center of `context`.
///
/// A mode counts as covered once it holds at least `max(1, n / (10 K))`
/// high-quality samples.
pub fn assign_modes(
    samples: &[Point],
    spec: &ConditionalMixtureSpec,
    context: usize,
    threshold_sigmas: f64,
) -> Result<ModeAssignment> {
    let centers = spec.centers(context)?;
    if !(threshold_sigmas > 0.0) {
        return Err(Error::Contract(format!(
            "threshold_sigmas must be positive, got {threshold_sigmas}"
        )));
    }
    let radius = threshold_sigmas * spec.mode_sigma();
    let k = centers.len();
    let mut counts = vec![0; k];
    let mut high_quality = vec![0; k];
    for &p in samples {
        let (mode, d) = centers
            .iter()
            .enumerate()
            .map(|(i, c)| (i, distance(*c, p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one mode");
        counts[mode] += 1;
        if d <= radius {
            high_quality[mode] += 1;
        }
    }
    let n = samples.len();
    let needed = (n as f64 / (10.0 * k as f64)).max(1.0);
    let modes_covered = high_quality.iter().filter(|&&h| h as f64 >= needed).count();
    let hq_total: usize = high_quality.iter().sum();
    let hq_ratio = if n == 0 { 0.0 } else { hq_total as f64 / n as f64 };
    Ok(ModeAssignment {
        counts,
        high_quality,
        hq_ratio,
        modes_covered,
    })
}

/// Mean and covariance of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and unbiased (n - 1) covariance.
pub fn fit_moments<P: AsRef<[f64]>>(samples: &[P]) -> Result<Moments> {
    if samples.len() < 2 {
        return Err(Error::Contract(format!(
            "fit_moments needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].as_ref().len();
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        let s = s.as_ref();
        if s.len() != d {
            return Err(Error::shape("fit_moments", &[d], &[s.len()]));
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let centered = DVector::from_iterator(d, s.as_ref().iter().zip(mean.iter()).map(|(v, m)| v - m));
        cov += &centered * centered.transpose();
    }
    cov /= n - 1.0;
    Ok(Moments { mean, cov })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Principal square root of a symmetric positive semi-definite matrix via
/// its eigendecomposition. Slightly negative eigenvalues from round-off are
/// treated as zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the trace of
/// the product root taken from the symmetric matrix `S1^{1/2} S2 S1^{1/2}`,
/// which has the same eigenvalues as `S1 S2`.
pub fn frechet_distance(a: &Moments, b: &Moments) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(Error::shape("frechet_distance", &[a.mean.len()], &[b.mean.len()]));
    }
    let finite = |m: &Moments| m.mean.iter().chain(m.cov.iter()).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::Domain {
            op: "frechet_distance",
            detail: "non-finite moments".into(),
        });
    }
    let s1 = symmetrize(&a.cov);
    let s2 = symmetrize(&b.cov);
    let root1 = sqrtm_psd(&s1);
    let inner = symmetrize(&(&root1 * &s2 * &root1));
    let trace_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let value = mean_term + s1.trace() + s2.trace() - 2.0 * trace_root;
    Ok(value.max(0.0))
}

/// Paired samples for one context. Entry `i` of `first` and `second` share
/// the condition; `latent_l1[i]` is the L1 distance between their latents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairDraw {
    pub first: Vec<Point>,
    pub second: Vec<Point>,
    pub latent_l1: Vec<f64>,
}

/// Anything that can be evaluated like a conditional generator.
pub trait PairSampler {
    fn sample_pairs(&self, context: usize, n_pairs: usize, rng: &mut Rng) -> Result<PairDraw>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lambda_ms: f64,
    pub modes_covered_per_context: Vec<usize>,
    /// Sum over contexts.
    pub modes_covered: usize,
    pub total_modes: usize,
    pub hq_ratio: f64,
    pub frechet_per_context: Vec<f64>,
    /// Mean of the per-context distances.
    pub frechet: f64,
    pub mean_ms_ratio: f64,
}

/// Draws `n_eval / 2` pairs per context and scores them against `n_eval`
/// fresh real samples per context.
pub fn evaluate(
    sampler: &impl PairSampler,
    spec: &ConditionalMixtureSpec,
    n_eval: usize,
    rng: &mut Rng,
) -> Result<MetricsRecord> {
    if n_eval < 4 {
        return Err(Error::Contract(format!("n_eval must be at least 4, got {n_eval}")));
    }
    let n_pairs = n_eval / 2;
    let mut covered = Vec::with_capacity(spec.num_contexts());
    let mut frechets = Vec::with_capacity(spec.num_contexts());
    let (mut hq, mut total) = (0.0, 0usize);
    let (mut ratio_sum, mut ratio_n) = (0.0, 0usize);
    for context in 0..spec.num_contexts() {
        let draw = sampler.sample_pairs(context, n_pairs, rng)?;
        if draw.first.len() != n_pairs || draw.second.len() != n_pairs || draw.latent_l1.len() != n_pairs {
            return Err(Error::Contract(format!(
                "sampler returned {} / {} / {} entries for {n_pairs} pairs",
                draw.first.len(),
                draw.second.len(),
                draw.latent_l1.len()
            )));
        }
        for ((a, b), z) in draw.first.iter().zip(&draw.second).zip(&draw.latent_l1) {
            let x = (a[0] - b[0]).abs() + (a[1] - b[1]).abs();
            ratio_sum += x / z;
            ratio_n += 1;
        }
        let samples: Vec<Point> = draw.first.iter().chain(&draw.second).copied().collect();
        let assignment = assign_modes(&samples, spec, context, DEFAULT_THRESHOLD_SIGMAS)?;
        covered.push(assignment.modes_covered);
        hq += assignment.hq_ratio * samples.len() as f64;
        total += samples.len();

        let real = sample_real(spec, context, n_eval, rng)?;
        let fd = frechet_distance(&fit_moments(&samples)?, &fit_moments(&real)?)?;
        frechets.push(fd);
    }
    Ok(MetricsRecord {
        epoch: 0,
        lambda_ms: 0.0,
        modes_covered: covered.iter().sum(),
        modes_covered_per_context: covered,
        total_modes: spec.total_modes(),
        hq_ratio: hq / total as f64,
        frechet: frechets.iter().sum::<f64>() / frechets.len() as f64,
        frechet_per_context: frechets,
        mean_ms_ratio: ratio_sum / ratio_n as f64,
    })
}
