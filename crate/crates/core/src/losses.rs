//! Terms of the generator objective and the discriminator loss.
//!
//! Every loss is recorded on a [`Graph`] so it can be differentiated; the
//! returned [`Var`] is a scalar.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before `log`.
pub const PROB_FLOOR: f64 = 1e-7;

/// Temperature of the contrastive matching loss.
pub const DEFAULT_MATCHING_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Conditioning-augmentation KL weight.
    pub lambda1: f64,
    /// Matching loss weight.
    pub lambda2: f64,
    /// Mode-seeking weight.
    pub lambda_ms: f64,
    /// Guard added to the mode-seeking ratio before inversion.
    pub epsilon_ms: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 5.0,
            lambda_ms: 1.0,
            epsilon_ms: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_ms", self.lambda_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.epsilon_ms > 0.0 && self.epsilon_ms.is_finite()) {
            return Err(Error::Contract(format!(
                "epsilon_ms must be positive, got {}",
                self.epsilon_ms
            )));
        }
        Ok(())
    }
}

/// Scalar values of every generator term for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub adv_per_stage: Vec<f64>,
    pub ca: f64,
    pub matching: f64,
    pub ms_ratio: f64,
    pub ms_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total = sum(adv) + lambda1 * ca + lambda2 * matching + lambda_ms * ms_penalty`.
    /// Terms with a zero weight are left out of the sum entirely.
    pub fn compose(
        adv_per_stage: Vec<f64>,
        ca: f64,
        matching: f64,
        ms_ratio: f64,
        ms_penalty: f64,
        weights: &LossWeights,
    ) -> Self {
        let mut total = adv_per_stage.iter().copied().reduce(|a, b| a + b).unwrap_or(0.0);
        for (w, term) in [
            (weights.lambda1, ca),
            (weights.lambda2, matching),
            (weights.lambda_ms, ms_penalty),
        ] {
            if w != 0.0 {
                total += term * w;
            }
        }
        LossBreakdown {
            adv_per_stage,
            ca,
            matching,
            ms_ratio,
            ms_penalty,
            total,
        }
    }

    pub fn adv_total(&self) -> f64 {
        self.adv_per_stage.iter().sum()
    }
}

fn check_probabilities(g: &Graph, v: Var, op: &'static str) -> Result<()> {
    if let Some(bad) = g.value(v).data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain {
            op,
            detail: format!("probability {bad} outside [0, 1]"),
        });
    }
    Ok(())
}

fn log_prob(g: &mut Graph, p: Var) -> Result<Var> {
    let c = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    g.log(c)
}

fn log_one_minus(g: &mut Graph, p: Var) -> Result<Var> {
    let q = g.one_minus(p)?;
    log_prob(g, q)
}

/// `-1/2 [mean log D(x) + mean log D(x, s)]` over generated samples.
pub fn generator_adversarial_loss(g: &mut Graph, d_uncond: Var, d_cond: Var) -> Result<Var> {
    const OP: &str = "generator_adversarial_loss";
    check_probabilities(g, d_uncond, OP)?;
    check_probabilities(g, d_cond, OP)?;
    let lu = log_prob(g, d_uncond)?;
    let lc = log_prob(g, d_cond)?;
    let mu = g.mean(lu)?;
    let mc = g.mean(lc)?;
    let s = g.add(mu, mc)?;
    g.scale(s, -0.5)
}

/// `-1/2 [mean log D(real) + mean log(1 - D(fake))` for both heads`]`.
/// Real and fake batches may differ in size.
pub fn discriminator_loss(g: &mut Graph, real_u: Var, fake_u: Var, real_c: Var, fake_c: Var) -> Result<Var> {
    const OP: &str = "discriminator_loss";
    for v in [real_u, fake_u, real_c, fake_c] {
        check_probabilities(g, v, OP)?;
    }
    let mut terms = Vec::with_capacity(4);
    for (v, real) in [(real_u, true), (fake_u, false), (real_c, true), (fake_c, false)] {
        let l = if real { log_prob(g, v)? } else { log_one_minus(g, v)? };
        terms.push(g.mean(l)?);
    }
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t)?;
    }
    g.scale(acc, -0.5)
}

/// KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over dimensions and
/// averaged over the batch. `mu`, `log_var`: `[B, d]`.
pub fn ca_kl_loss(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let shape = g.value(mu).shape().to_vec();
    if shape != g.value(log_var).shape() {
        return Err(Error::shape("ca_kl_loss", &shape, g.value(log_var).shape()));
    }
    let batch = if shape.len() >= 2 { shape[0] } else { 1 };
    let mu_sq = g.mul(mu, mu)?;
    let var = g.exp(log_var)?;
    let a = g.add(mu_sq, var)?;
    let b = g.sub(a, log_var)?;
    let c = g.add_scalar(b, -1.0)?;
    let total = g.sum(c)?;
    g.scale(total, 0.5 / batch as f64)
}

fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let n2 = g.sum_lastdim(sq)?;
    let n2 = g.add_scalar(n2, 1e-12)?;
    let inv = g.powf(n2, -0.5)?;
    g.row_scale(x, inv)
}

/// Symmetric contrastive loss between projected sample features and
/// sentence embeddings, both `[B, d]`.
///
/// Logits are cosine similarities divided by `tau`. The target for row `i`
/// is uniform over the batch entries sharing its label, so with distinct
/// labels the targets are the matched pairs. The value is the mean of the
/// feature-to-sentence and sentence-to-feature cross-entropies.
pub fn matching_loss(g: &mut Graph, features: Var, sentences: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let fs = g.value(features).shape().to_vec();
    if fs.len() != 2 || fs != g.value(sentences).shape() {
        return Err(Error::shape("matching_loss", &fs, g.value(sentences).shape()));
    }
    let b = fs[0];
    if b < 2 {
        return Err(Error::Contract(format!("matching_loss needs a batch of at least 2, got {b}")));
    }
    if labels.len() != b {
        return Err(Error::Contract(format!(
            "matching_loss got {} labels for batch {b}",
            labels.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("tau must be positive, got {tau}")));
    }
    let mut targets = vec![0.0; b * b];
    for i in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| labels[j] == labels[i]).collect();
        let w = 1.0 / same.len() as f64;
        for j in same {
            targets[i * b + j] = w;
        }
    }
    let targets = g.constant(Tensor::new(vec![b, b], targets)?);

    let f = normalize_rows(g, features)?;
    let s = normalize_rows(g, sentences)?;
    let st = g.transpose(s)?;
    let sim = g.matmul(f, st)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let logits_t = g.transpose(logits)?;
    let mut directions = Vec::with_capacity(2);
    for l in [logits, logits_t] {
        let lp = g.log_softmax_lastdim(l)?;
        let weighted = g.mul(targets, lp)?;
        let ce = g.sum(weighted)?;
        directions.push(g.scale(ce, -1.0 / b as f64)?);
    }
    let both = g.add(directions[0], directions[1])?;
    g.scale(both, 0.5)
}

/// Mode-seeking ratio and penalty for paired samples `x1`, `x2` (`[P, 2]`)
/// generated from latents `z1`, `z2` (`[P, d]`) under shared conditions.
///
/// `ratio = sum_p |x1_p - x2_p|_1 / sum_p |z1_p - z2_p|_1` and
/// `penalty = 1 / (ratio + eps)`. The latents are constants, so gradients
/// flow only into the samples. For a single pair the ratio is the plain
/// distance quotient.
pub fn mode_seeking_penalty(
    g: &mut Graph,
    x1: Var,
    x2: Var,
    z1: &Tensor,
    z2: &Tensor,
    eps: f64,
) -> Result<(Var, Var)> {
    if z1.shape() != z2.shape() || z1.rank() == 0 {
        return Err(Error::shape("mode_seeking_penalty", z1.shape(), z2.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("epsilon_ms must be positive, got {eps}")));
    }
    let d = z1.shape()[z1.rank() - 1].max(1);
    let mut latent = 0.0;
    for (i, (a, b)) in z1.data().chunks(d).zip(z2.data().chunks(d)).enumerate() {
        let dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        if dist == 0.0 {
            return Err(Error::Contract(format!(
                "mode-seeking pair {i} has z1 == z2 (zero latent distance)"
            )));
        }
        latent += dist;
    }
    let per_pair = g.l1_distance(x1, x2)?;
    let numer = g.sum(per_pair)?;
    let ratio = g.scale(numer, 1.0 / latent)?;
    let guarded = g.add_scalar(ratio, eps)?;
    let penalty = g.powf(guarded, -1.0)?;
    Ok((ratio, penalty))
}

/// Graph variables of each generator term.
#[derive(Clone, Debug)]
pub struct GeneratorTerms {
    pub adv_per_stage: Vec<Var>,
    pub ca: Var,
    pub matching: Var,
    pub ms_ratio: Var,
    pub ms_penalty: Var,
}

/// Weighted generator objective on the graph, plus its scalar breakdown.
pub fn total_generator_loss(g: &mut Graph, terms: &GeneratorTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let (first, rest) = terms
        .adv_per_stage
        .split_first()
        .ok_or_else(|| Error::Contract("need at least one adversarial term".into()))?;
    let mut total = *first;
    for v in rest {
        total = g.add(total, *v)?;
    }
    for (w, term) in [
        (weights.lambda1, terms.ca),
        (weights.lambda2, terms.matching),
        (weights.lambda_ms, terms.ms_penalty),
    ] {
        if w != 0.0 {
            let weighted = g.scale(term, w)?;
            total = g.add(total, weighted)?;
        }
    }
    let value = |v: Var| g.value(v).data()[0];
    let breakdown = LossBreakdown {
        adv_per_stage: terms.adv_per_stage.iter().map(|v| value(*v)).collect(),
        ca: value(terms.ca),
        matching: value(terms.matching),
        ms_ratio: value(terms.ms_ratio),
        ms_penalty: value(terms.ms_penalty),
        total: value(total),
    };
    Ok((total, breakdown))
}
