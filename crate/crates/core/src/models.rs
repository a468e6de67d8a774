//! Conditional generator (conditioning augmentation, initial stage, memory
//! refinement stage) and the per-stage two-headed discriminators.
//!
//! Every forward function takes the [`Graph`] to record on and the
//! [`Bound`] variables of its parameter set, so the same code serves
//! training (trainable binding) and evaluation (frozen binding).

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::data::{sample_noise, tensor_points};
use crate::error::{Error, Result};
use crate::metrics::{PairDraw, PairSampler};
use crate::rng::Rng;

/// Bounds applied to the CA log-variance head.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Generated coordinates lie in `(-SAMPLE_BOUND, SAMPLE_BOUND)`.
pub const SAMPLE_BOUND: f64 = 3.0;

/// Init gain of the first discriminator layer (weight and bias).
pub const D_INPUT_GAIN: f64 = 10.0;

/// `B * tanh(x / B)` with `B = SAMPLE_BOUND`: identity near the origin, so
/// a zeroed head still yields 0.
fn bounded_sample(g: &mut Graph, x: Var) -> Result<Var> {
    let u = g.scale(x, 1.0 / SAMPLE_BOUND)?;
    let t = g.tanh(u)?;
    g.scale(t, SAMPLE_BOUND)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub noise_dim: usize,
    pub sentence_dim: usize,
    pub word_dim: usize,
    /// Words per context (T).
    pub num_words: usize,
    pub feature_dim: usize,
    pub memory_dim: usize,
    pub hidden_width: usize,
    pub num_stages: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            noise_dim: 16,
            sentence_dim: 16,
            word_dim: 16,
            num_words: 3,
            feature_dim: 32,
            memory_dim: 32,
            hidden_width: 128,
            num_stages: 2,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("noise_dim", self.noise_dim),
            ("sentence_dim", self.sentence_dim),
            ("word_dim", self.word_dim),
            ("num_words", self.num_words),
            ("feature_dim", self.feature_dim),
            ("memory_dim", self.memory_dim),
            ("hidden_width", self.hidden_width),
        ];
        if let Some((name, _)) = all.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("{name} must be positive")));
        }
        if !(1..=2).contains(&self.num_stages) {
            return Err(Error::Contract(format!(
                "num_stages must be 1 or 2, got {}",
                self.num_stages
            )));
        }
        Ok(())
    }
}

/// Affine layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform(±1/√in) initialization for both weight and bias.
    pub fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w = Tensor::new(vec![input, output], uniform(input * output)).expect("sized");
        let b = Tensor::vector(uniform(output));
        Linear {
            weight: params.insert(format!("{name}.weight"), w),
            bias: params.insert(format!("{name}.bias"), b),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        g.affine(x, bound[self.weight], bound[self.bias])
    }

    /// Multiplies weight and bias by `k`.
    pub fn scale(&self, params: &mut ParamSet, k: f64) {
        for id in [self.weight, self.bias] {
            params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.weight).data_mut().fill(0.0);
        params.get_mut(self.bias).data_mut().fill(0.0);
    }
}

fn normal_table(params: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    params.insert(name, Tensor::new(vec![rows, cols], data).expect("sized"))
}

/// Mean and clamped log-variance of the conditioning Gaussian, both
/// `[batch, sentence_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct SentenceStats {
    pub mu: Var,
    pub log_var: Var,
}

/// Generated sample `[batch, 2]` and the feature `[batch, feature_dim]` it
/// was decoded from.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub sample: Var,
    pub feature: Var,
}

/// A refinement stage's output plus its attention weights `[batch, T]` and
/// gate values `[batch, feature_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct RefineOutput {
    pub stage: StageOutput,
    pub attention: Var,
    pub gate: Var,
}

/// Two latent batches fed through the generator with the same condition.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair {
    z1: Tensor,
    z2: Tensor,
}

impl NoisePair {
    /// Rejects pairs of different shape and pairs whose rows coincide,
    /// since the mode-seeking ratio divides by their distance.
    pub fn new(z1: Tensor, z2: Tensor) -> Result<Self> {
        if z1.shape() != z2.shape() || z1.rank() != 2 {
            return Err(Error::shape("noise_pair", z1.shape(), z2.shape()));
        }
        let d = z1.shape()[1];
        for (i, (a, b)) in z1.data().chunks(d).zip(z2.data().chunks(d)).enumerate() {
            if a == b {
                return Err(Error::Contract(format!("noise pair row {i} has z1 == z2")));
            }
        }
        Ok(NoisePair { z1, z2 })
    }

    pub fn z1(&self) -> &Tensor {
        &self.z1
    }

    pub fn z2(&self) -> &Tensor {
        &self.z2
    }
}

struct MemoryStage {
    key: ParamId,
    value: ParamId,
    query: ParamId,
    gate: Linear,
    transform: Linear,
    head: Linear,
}

/// The conditional generator and its learned context tables.
pub struct Generator {
    dims: ModelDims,
    num_contexts: usize,
    params: ParamSet,
    sentence_table: ParamId,
    word_table: ParamId,
    ca_mu: Linear,
    ca_log_var: Linear,
    init_hidden: [Linear; 2],
    init_feature: Linear,
    init_head: Linear,
    memory: Option<MemoryStage>,
    match_proj: Linear,
}

impl Generator {
    pub fn new(dims: ModelDims, num_contexts: usize, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        if num_contexts == 0 {
            return Err(Error::Contract("num_contexts must be positive".into()));
        }
        let d = &dims;
        let mut p = ParamSet::new();
        let sentence_table = normal_table(&mut p, "embed.sentence", num_contexts, d.sentence_dim, rng);
        let word_table = normal_table(
            &mut p,
            "embed.words",
            num_contexts * d.num_words,
            d.word_dim,
            rng,
        );
        let ca_mu = Linear::new(&mut p, "ca.mu", d.sentence_dim, d.sentence_dim, rng);
        let ca_log_var = Linear::new(&mut p, "ca.log_var", d.sentence_dim, d.sentence_dim, rng);
        let init_hidden = [
            Linear::new(&mut p, "init.fc1", d.sentence_dim + d.noise_dim, d.hidden_width, rng),
            Linear::new(&mut p, "init.fc2", d.hidden_width, d.hidden_width, rng),
        ];
        let init_feature = Linear::new(&mut p, "init.feature", d.hidden_width, d.feature_dim, rng);
        let init_head = Linear::new(&mut p, "init.head", d.feature_dim, 2, rng);
        let memory = (d.num_stages > 1).then(|| {
            let scale = 1.0 / (d.word_dim as f64).sqrt();
            let mut proj = |name: &str, rows: usize, cols: usize, rng: &mut Rng| {
                let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
                p.insert(name, Tensor::new(vec![rows, cols], data).expect("sized"))
            };
            let key = proj("memory.key", d.word_dim, d.memory_dim, rng);
            let value = proj("memory.value", d.word_dim, d.memory_dim, rng);
            let query = proj("memory.query", d.feature_dim, d.memory_dim, rng);
            MemoryStage {
                key,
                value,
                query,
                gate: Linear::new(&mut p, "memory.gate", d.feature_dim + d.memory_dim, d.feature_dim, rng),
                transform: Linear::new(&mut p, "memory.transform", d.memory_dim, d.feature_dim, rng),
                head: Linear::new(&mut p, "memory.head", d.feature_dim, 2, rng),
            }
        });
        let match_proj = Linear::new(&mut p, "match.proj", d.feature_dim, d.sentence_dim, rng);
        Ok(Generator {
            dims,
            num_contexts,
            params: p,
            sentence_table,
            word_table,
            ca_mu,
            ca_log_var,
            init_hidden,
            init_feature,
            init_head,
            memory,
            match_proj,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zeroes the sample head of the initial stage.
    pub fn zero_initial_head(&mut self) {
        self.init_head.zero(&mut self.params);
    }

    /// Looks up sentence embeddings `[B, sentence_dim]` and the word sets
    /// `[B * T, word_dim]` for `labels`.
    pub fn embed(&self, g: &mut Graph, bound: &Bound, labels: &[usize]) -> Result<(Var, Var)> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_contexts) {
            return Err(Error::Range {
                what: "label",
                value: bad,
                limit: self.num_contexts,
            });
        }
        let s = g.gather_rows(bound[self.sentence_table], labels)?;
        let t = self.dims.num_words;
        let word_rows: Vec<usize> = labels.iter().flat_map(|&l| (0..t).map(move |j| l * t + j)).collect();
        let words = g.gather_rows(bound[self.word_table], &word_rows)?;
        Ok((s, words))
    }

    /// Conditioning augmentation: `c = mu(s) + exp(log_var(s) / 2) * eps`.
    ///
    /// `eps` is supplied by the caller (`[B, sentence_dim]`); pass zeros to
    /// get `c = mu`.
    pub fn ca_encode(&self, g: &mut Graph, bound: &Bound, s: Var, eps: Var) -> Result<(Var, SentenceStats)> {
        let mu = self.ca_mu.forward(g, bound, s)?;
        let raw = self.ca_log_var.forward(g, bound, s)?;
        let log_var = g.clamp(raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;
        let half = g.scale(log_var, 0.5)?;
        let std = g.exp(half)?;
        let noise = g.mul(std, eps)?;
        let c = g.add(mu, noise)?;
        Ok((c, SentenceStats { mu, log_var }))
    }

    /// Initial stage: MLP on `concat(c, z)` to the feature `R0`, then a
    /// bounded linear head to the sample `x0`.
    pub fn initial(&self, g: &mut Graph, bound: &Bound, c: Var, z: Var) -> Result<StageOutput> {
        let mut h = g.concat_lastdim(&[c, z])?;
        for layer in &self.init_hidden {
            let a = layer.forward(g, bound, h)?;
            h = g.relu(a)?;
        }
        let feature = self.init_feature.forward(g, bound, h)?;
        let sample = self.init_head.forward(g, bound, feature)?;
        let sample = bounded_sample(g, sample)?;
        Ok(StageOutput { sample, feature })
    }

    /// Memory refinement of `r_prev` `[B, feature_dim]` against the word
    /// sets `words` `[B * T, word_dim]`.
    pub fn memory_refine(&self, g: &mut Graph, bound: &Bound, r_prev: Var, words: Var) -> Result<RefineOutput> {
        let mem = self
            .memory
            .as_ref()
            .ok_or_else(|| Error::Contract("generator has no refinement stage".into()))?;
        let t = self.dims.num_words;
        let batch = g.value(r_prev).shape()[0];
        if g.value(words).shape()[0] != batch * t {
            return Err(Error::shape("memory_refine", g.value(r_prev).shape(), g.value(words).shape()));
        }
        let m = self.dims.memory_dim;
        let keys = g.matmul(words, bound[mem.key])?;
        let keys = g.reshape(keys, &[batch, t, m])?;
        let values = g.matmul(words, bound[mem.value])?;
        let values = g.reshape(values, &[batch, t, m])?;
        let query = g.matmul(r_prev, bound[mem.query])?;
        let attention = memory_address(g, query, keys)?;
        let read = memory_read(g, attention, values)?;
        let gate_in = g.concat_lastdim(&[r_prev, read])?;
        let gate_logits = mem.gate.forward(g, bound, gate_in)?;
        let gate = g.sigmoid(gate_logits)?;
        let transformed = mem.transform.forward(g, bound, read)?;
        let feature = gated_update(g, gate, transformed, r_prev)?;
        let sample = mem.head.forward(g, bound, feature)?;
        let sample = bounded_sample(g, sample)?;
        Ok(RefineOutput {
            stage: StageOutput { sample, feature },
            attention,
            gate,
        })
    }

    /// All stages from a conditioned vector and latent batch.
    pub fn stages(&self, g: &mut Graph, bound: &Bound, c: Var, z: Var, words: Var) -> Result<Vec<StageOutput>> {
        let first = self.initial(g, bound, c, z)?;
        let mut out = vec![first];
        if self.memory.is_some() {
            out.push(self.memory_refine(g, bound, first.feature, words)?.stage);
        }
        Ok(out)
    }

    /// Projects a stage feature into sentence-embedding space for the
    /// matching loss.
    pub fn match_features(&self, g: &mut Graph, bound: &Bound, feature: Var) -> Result<Var> {
        self.match_proj.forward(g, bound, feature)
    }

    /// Current sentence embeddings of `labels`, `[B, sentence_dim]`, read
    /// straight from the table.
    pub fn sentence_embeddings(&self, labels: &[usize]) -> Result<Tensor> {
        let table = self.params.get(self.sentence_table);
        let d = self.dims.sentence_dim;
        let mut data = Vec::with_capacity(labels.len() * d);
        for &l in labels {
            if l >= self.num_contexts {
                return Err(Error::Range {
                    what: "label",
                    value: l,
                    limit: self.num_contexts,
                });
            }
            data.extend_from_slice(&table.data()[l * d..(l + 1) * d]);
        }
        Tensor::new(vec![labels.len(), d], data)
    }

    /// Forward-only pass: final-stage samples for `labels`, with explicit
    /// CA noise and latents.
    pub fn generate(&self, labels: &[usize], ca_eps: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let (s, words) = self.embed(&mut g, &bound, labels)?;
        let eps = g.constant(ca_eps.clone());
        let (c, _) = self.ca_encode(&mut g, &bound, s, eps)?;
        let zv = g.constant(z.clone());
        let stages = self.stages(&mut g, &bound, c, zv, words)?;
        let last = stages.last().expect("at least one stage");
        Ok(g.value(last.sample).clone())
    }
}

/// Graph variables of a paired forward pass. Rows `0..P` of every stage
/// come from `z1` and rows `P..2P` from `z2`; row `i` and row `P + i` share
/// label and conditioned vector.
#[derive(Clone, Debug)]
pub struct PairedForward {
    /// Sentence embeddings of the `P` examples.
    pub sentence: Var,
    pub stats: SentenceStats,
    /// Labels of all `2P` rows.
    pub labels: Vec<usize>,
    /// Sentence embeddings of all `2P` rows.
    pub sentence_rows: Var,
    pub stages: Vec<StageOutput>,
}

impl Generator {
    /// Runs the generator on `pair.z1` and `pair.z2` with one conditioned
    /// vector per example (from `ca_eps`, `[P, sentence_dim]`).
    pub fn paired_forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        labels: &[usize],
        ca_eps: &Tensor,
        pair: &NoisePair,
    ) -> Result<PairedForward> {
        let p = labels.len();
        let (sentence, _) = self.embed(g, bound, labels)?;
        let eps = g.constant(ca_eps.clone());
        let (c, stats) = self.ca_encode(g, bound, sentence, eps)?;
        let twice: Vec<usize> = (0..p).chain(0..p).collect();
        let c2 = g.gather_rows(c, &twice)?;
        let labels2: Vec<usize> = labels.iter().chain(labels).copied().collect();
        let (sentence_rows, words) = self.embed(g, bound, &labels2)?;
        let mut z = pair.z1().data().to_vec();
        z.extend_from_slice(pair.z2().data());
        let z = g.constant(Tensor::new(vec![2 * p, self.dims.noise_dim], z)?);
        let stages = self.stages(g, bound, c2, z, words)?;
        Ok(PairedForward {
            sentence,
            stats,
            labels: labels2,
            sentence_rows,
            stages,
        })
    }
}

impl PairSampler for Generator {
    fn sample_pairs(&self, context: usize, n_pairs: usize, rng: &mut Rng) -> Result<PairDraw> {
        let labels = vec![context; n_pairs];
        let eps = sample_noise(self.dims.sentence_dim, n_pairs, rng)?;
        let z1 = sample_noise(self.dims.noise_dim, n_pairs, rng)?;
        let z2 = sample_noise(self.dims.noise_dim, n_pairs, rng)?;
        let pair = NoisePair::new(z1, z2)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let fwd = self.paired_forward(&mut g, &bound, &labels, &eps, &pair)?;
        let last = fwd.stages.last().expect("at least one stage");
        let points = tensor_points(g.value(last.sample));
        let (first, second) = points.split_at(n_pairs);
        let d = self.dims.noise_dim;
        let latent_l1 = pair
            .z1()
            .data()
            .chunks(d)
            .zip(pair.z2().data().chunks(d))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
            .collect();
        Ok(PairDraw {
            first: first.to_vec(),
            second: second.to_vec(),
            latent_l1,
        })
    }
}

/// Scaled dot-product key addressing: `softmax(q · k_j / sqrt(m))` over the
/// `T` keys of each example. `query: [B, m]`, `keys: [B, T, m]`.
pub fn memory_address(g: &mut Graph, query: Var, keys: Var) -> Result<Var> {
    let ks = g.value(keys).shape().to_vec();
    if ks.len() != 3 || ks[1] == 0 {
        return Err(Error::Contract(format!(
            "memory addressing needs [B, T, m] keys with T > 0, got {ks:?}"
        )));
    }
    let (batch, t, m) = (ks[0], ks[1], ks[2]);
    let q = g.reshape(query, &[batch, m, 1])?;
    let logits = g.batch_matmul(keys, q)?;
    let logits = g.reshape(logits, &[batch, t])?;
    let scaled = g.scale(logits, 1.0 / (m as f64).sqrt())?;
    g.softmax_lastdim(scaled)
}

/// Value reading `m = sum_j alpha_j v_j`. `attention: [B, T]`,
/// `values: [B, T, m]`.
pub fn memory_read(g: &mut Graph, attention: Var, values: Var) -> Result<Var> {
    let vs = g.value(values).shape().to_vec();
    let (batch, t, m) = (vs[0], vs[1], vs[2]);
    let a = g.reshape(attention, &[batch, 1, t])?;
    let read = g.batch_matmul(a, values)?;
    g.reshape(read, &[batch, m])
}

/// Response gate `g * transformed + (1 - g) * r_prev`.
pub fn gated_update(g: &mut Graph, gate: Var, transformed: Var, r_prev: Var) -> Result<Var> {
    let open = g.mul(gate, transformed)?;
    let keep = g.one_minus(gate)?;
    let carried = g.mul(keep, r_prev)?;
    g.add(open, carried)
}

struct StageDiscriminator {
    trunk: [Linear; 2],
    uncond: Linear,
    cond_hidden: Linear,
    cond_out: Linear,
}

/// One discriminator per generator stage, sharing a single parameter set.
pub struct Discriminators {
    params: ParamSet,
    stages: Vec<StageDiscriminator>,
}

impl Discriminators {
    pub fn new(dims: &ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let mut p = ParamSet::new();
        let h = dims.hidden_width;
        let stages = (0..dims.num_stages)
            .map(|i| StageDiscriminator {
                trunk: [
                    Linear::new(&mut p, &format!("d{i}.fc1"), 2, h, rng),
                    Linear::new(&mut p, &format!("d{i}.fc2"), h, h, rng),
                ],
                uncond: Linear::new(&mut p, &format!("d{i}.uncond"), h, 1, rng),
                cond_hidden: Linear::new(&mut p, &format!("d{i}.cond_fc"), h + dims.sentence_dim, h, rng),
                cond_out: Linear::new(&mut p, &format!("d{i}.cond_out"), h, 1, rng),
            })
            .collect::<Vec<_>>();
        for st in &stages {
            st.trunk[0].scale(&mut p, D_INPUT_GAIN);
        }
        Ok(Discriminators { params: p, stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zeroes the final layer of both heads of every stage.
    pub fn zero_heads(&mut self) {
        for s in &self.stages {
            s.uncond.zero(&mut self.params);
            s.cond_out.zero(&mut self.params);
        }
    }

    /// Unconditional and conditional probabilities, each `[B]`, for samples
    /// `x: [B, 2]` under sentence embeddings `s: [B, sentence_dim]`.
    pub fn discriminate(&self, g: &mut Graph, bound: &Bound, stage: usize, x: Var, s: Var) -> Result<(Var, Var)> {
        let d = self.stages.get(stage).ok_or(Error::Range {
            what: "discriminator stage",
            value: stage,
            limit: self.stages.len(),
        })?;
        let batch = g.value(x).shape()[0];
        let mut h = x;
        for layer in &d.trunk {
            let a = layer.forward(g, bound, h)?;
            h = g.relu(a)?;
        }
        let u = d.uncond.forward(g, bound, h)?;
        let u = g.reshape(u, &[batch])?;
        let d_uncond = g.sigmoid(u)?;
        let joint = g.concat_lastdim(&[h, s])?;
        let ch = d.cond_hidden.forward(g, bound, joint)?;
        let ch = g.relu(ch)?;
        let c = d.cond_out.forward(g, bound, ch)?;
        let c = g.reshape(c, &[batch])?;
        let d_cond = g.sigmoid(c)?;
        Ok((d_uncond, d_cond))
    }
}
