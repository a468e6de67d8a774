use crate::autodiff::{Bound, Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{sample_noise, ConditionalMixtureSpec, ContextBatch};
use crate::error::{Error, Result};
use crate::losses::{
    ca_kl_loss, discriminator_loss, generator_adversarial_loss, matching_loss, mode_seeking_penalty,
    total_generator_loss, GeneratorTerms, LossBreakdown,
};
use crate::metrics::{evaluate, MetricsRecord};
use crate::models::{Discriminators, Generator, NoisePair, PairedForward};
use crate::rng::{stream_rng, Stream};

use super::adam::{adam_step, AdamState};
use super::TrainConfig;

/// Losses of one completed step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub d_loss: f64,
}

/// Generator, discriminators and both optimizers, advanced one
/// discriminator update and one generator update per step.
pub struct Trainer {
    config: TrainConfig,
    spec: ConditionalMixtureSpec,
    generator: Generator,
    discriminators: Discriminators,
    adam_g: AdamState,
    adam_d: AdamState,
    step: u64,
    last: Option<StepReport>,
}

impl Trainer {
    pub fn new(config: TrainConfig, spec: ConditionalMixtureSpec) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(
            config.dims.clone(),
            spec.num_contexts(),
            &mut stream_rng(config.seed, Stream::Init, 0),
        )?;
        let discriminators = Discriminators::new(&config.dims, &mut stream_rng(config.seed, Stream::Init, 1))?;
        let adam_g = AdamState::new(generator.params());
        let adam_d = AdamState::new(discriminators.params());
        Ok(Trainer {
            config,
            spec,
            generator,
            discriminators,
            adam_g,
            adam_d,
            step: 0,
            last: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn spec(&self) -> &ConditionalMixtureSpec {
        &self.spec
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.generator
    }

    pub fn discriminators(&self) -> &Discriminators {
        &self.discriminators
    }

    pub fn discriminators_mut(&mut self) -> &mut Discriminators {
        &mut self.discriminators
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn last_report(&self) -> Option<&StepReport> {
        self.last.as_ref()
    }

    pub fn set_lambda_ms(&mut self, lambda_ms: f64) {
        self.config.loss_weights.lambda_ms = lambda_ms;
    }

    /// Draws the batch for the current step from the data stream and trains
    /// on it.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let mut rng = stream_rng(self.config.seed, Stream::Data, self.step);
        let batch = ContextBatch::sample(&self.spec, self.config.batch_size, &mut rng)?;
        self.step_on(&batch)
    }

    /// One discriminator half-step followed by one generator half-step on
    /// `batch`. Noise comes from the noise and CA streams of the current
    /// step, so the result depends only on the parameters and the step
    /// index.
    ///
    /// A non-finite value anywhere aborts with [`Error::NumericalAbort`].
    pub fn step_on(&mut self, batch: &ContextBatch) -> Result<StepReport> {
        let step = self.step;
        let result = self.try_step(batch);
        match result {
            Ok(report) => {
                self.step += 1;
                self.last = Some(report.clone());
                Ok(report)
            }
            Err(e @ (Error::NonFinite { .. } | Error::Domain { .. })) => Err(Error::NumericalAbort {
                step,
                detail: format!("{e}; last finite losses: {}", self.describe_last()),
            }),
            Err(e) => Err(e),
        }
    }

    fn describe_last(&self) -> String {
        match &self.last {
            None => "none (first step)".into(),
            Some(r) => format!(
                "step {} total {} adv {} ca {} matching {} ms_penalty {} d {}",
                r.step,
                r.breakdown.total,
                r.breakdown.adv_total(),
                r.breakdown.ca,
                r.breakdown.matching,
                r.breakdown.ms_penalty,
                r.d_loss
            ),
        }
    }

    fn try_step(&mut self, batch: &ContextBatch) -> Result<StepReport> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::Contract(format!("batch of {b} is too small")));
        }
        let dims = self.config.dims.clone();
        let mut noise = stream_rng(self.config.seed, Stream::Noise, self.step);
        let mut ca = stream_rng(self.config.seed, Stream::CaEps, self.step);
        let p = self.config.pair_mode.pairs(b);
        let labels = &batch.labels[..p];
        let eps = sample_noise(dims.sentence_dim, p, &mut ca)?;
        let z1 = sample_noise(dims.noise_dim, p, &mut noise)?;
        let z2 = sample_noise(dims.noise_dim, p, &mut noise)?;
        let pair = NoisePair::new(z1, z2)?;

        // One generator pass serves both half-steps: its first (up to) `b` rows,
        // detached, are the discriminator's fake batch, and the same graph
        // is later scored by the updated discriminators.
        let mut g = Graph::new();
        let gb = self.generator.params().bind(&mut g, true);
        let fwd = self.generator.paired_forward(&mut g, &gb, labels, &eps, &pair)?;
        let fake_rows: Vec<usize> = (0..b.min(2 * p)).collect();
        let fakes: Vec<Tensor> = fwd
            .stages
            .iter()
            .map(|st| g.value(st.sample).clone())
            .map(|t| take_rows(&t, &fake_rows))
            .collect();
        let fake_s = take_rows(g.value(fwd.sentence_rows), &fake_rows);
        let d_loss = self.discriminator_half_step(batch, &fakes, &fake_s)?;
        let breakdown = self.generator_half_step(g, &gb, &fwd, &pair)?;
        if !breakdown.total.is_finite() || !d_loss.is_finite() {
            return Err(Error::NonFinite { op: "train_step" });
        }
        Ok(StepReport {
            step: self.step,
            breakdown,
            d_loss,
        })
    }

    /// Real and fake rows go through each stage's discriminator as one
    /// batch.
    fn discriminator_half_step(&mut self, batch: &ContextBatch, fakes: &[Tensor], fake_s: &Tensor) -> Result<f64> {
        let b = batch.len();
        let real_s = self.generator.sentence_embeddings(&batch.labels)?;
        let mut g = Graph::new();
        let db = self.discriminators.params().bind(&mut g, true);
        let s = g.constant(stack_rows(&real_s, fake_s)?);
        let real_idx: Vec<usize> = (0..b).collect();
        let fake_idx: Vec<usize> = (b..b + fake_s.shape()[0]).collect();
        let real = batch.real_tensor();
        let mut total: Option<Var> = None;
        for (i, fake) in fakes.iter().enumerate() {
            let x = g.constant(stack_rows(&real, fake)?);
            let (u, c) = self.discriminators.discriminate(&mut g, &db, i, x, s)?;
            let ru = g.gather_rows(u, &real_idx)?;
            let fu = g.gather_rows(u, &fake_idx)?;
            let rc = g.gather_rows(c, &real_idx)?;
            let fc = g.gather_rows(c, &fake_idx)?;
            let l = discriminator_loss(&mut g, ru, fu, rc, fc)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.expect("at least one stage");
        let value = g.value(total).item()?;
        let grads = g.backward(total)?;
        let params = self.discriminators.params_mut();
        params.accumulate(&db, &grads);
        adam_step(params, &mut self.adam_d, &self.config.adam())?;
        params.zero_grad();
        Ok(value)
    }

    fn generator_half_step(
        &mut self,
        mut g: Graph,
        gb: &Bound,
        fwd: &PairedForward,
        pair: &NoisePair,
    ) -> Result<LossBreakdown> {
        let p = fwd.labels.len() / 2;
        let db = self.discriminators.params().bind(&mut g, false);
        // the discriminators judge samples, not the embedding table
        let s_fixed = g.constant(g.value(fwd.sentence_rows).clone());
        let mut adv = Vec::with_capacity(fwd.stages.len());
        for (i, stage) in fwd.stages.iter().enumerate() {
            let (du, dc) = self.discriminators.discriminate(&mut g, &db, i, stage.sample, s_fixed)?;
            adv.push(generator_adversarial_loss(&mut g, du, dc)?);
        }
        let ca = ca_kl_loss(&mut g, fwd.stats.mu, fwd.stats.log_var)?;
        let last = *fwd.stages.last().expect("at least one stage");
        let features = self.generator.match_features(&mut g, gb, last.feature)?;
        let matching = matching_loss(&mut g, features, fwd.sentence_rows, &fwd.labels, self.config.matching_tau)?;
        let first: Vec<usize> = (0..p).collect();
        let second: Vec<usize> = (p..2 * p).collect();
        let x1 = g.gather_rows(last.sample, &first)?;
        let x2 = g.gather_rows(last.sample, &second)?;
        let (ms_ratio, ms_penalty) = mode_seeking_penalty(
            &mut g,
            x1,
            x2,
            pair.z1(),
            pair.z2(),
            self.config.loss_weights.epsilon_ms,
        )?;
        let terms = GeneratorTerms {
            adv_per_stage: adv,
            ca,
            matching,
            ms_ratio,
            ms_penalty,
        };
        let (total, breakdown) = total_generator_loss(&mut g, &terms, &self.config.loss_weights)?;
        let grads = g.backward(total)?;
        let params = self.generator.params_mut();
        params.accumulate(gb, &grads);
        adam_step(params, &mut self.adam_g, &self.config.adam())?;
        params.zero_grad();
        Ok(breakdown)
    }

    /// Scores the current generator; the evaluation stream is keyed by
    /// `epoch`.
    pub fn evaluate(&self, epoch: usize) -> Result<MetricsRecord> {
        let mut rng = stream_rng(self.config.seed, Stream::Eval, epoch as u64);
        let mut record = evaluate(&self.generator, &self.spec, self.config.n_eval, &mut rng)?;
        record.epoch = epoch;
        record.lambda_ms = self.config.loss_weights.lambda_ms;
        Ok(record)
    }

    /// Parameters, optimizer moments and step counter. `metadata` is stored
    /// verbatim.
    pub fn to_checkpoint(&self, metadata: impl Into<String>) -> Checkpoint {
        let mut c = Checkpoint::new(metadata);
        c.store_params("g.", self.generator.params());
        c.store_params("d.", self.discriminators.params());
        for (prefix, params, state) in [
            ("adam_g", self.generator.params(), &self.adam_g),
            ("adam_d", self.discriminators.params(), &self.adam_d),
        ] {
            for (((_, name, _), m), v) in params.iter().zip(state.m()).zip(state.v()) {
                c.insert(format!("{prefix}.m.{name}"), m.clone());
                c.insert(format!("{prefix}.v.{name}"), v.clone());
            }
            c.insert(format!("{prefix}.t"), Tensor::scalar(state.t() as f64));
        }
        c.insert("state.step", Tensor::scalar(self.step as f64));
        c
    }

    /// Rebuilds a trainer from [`Trainer::to_checkpoint`] output.
    pub fn from_checkpoint(config: TrainConfig, spec: ConditionalMixtureSpec, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config, spec)?;
        ckpt.load_params("g.", t.generator.params_mut())?;
        ckpt.load_params("d.", t.discriminators.params_mut())?;
        t.adam_g = load_adam(ckpt, "adam_g", t.generator.params())?;
        t.adam_d = load_adam(ckpt, "adam_d", t.discriminators.params())?;
        t.step = counter(ckpt, "state.step")?;
        Ok(t)
    }
}

fn take_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let w = t.numel() / t.shape()[0].max(1);
    let data = rows.iter().flat_map(|&r| t.data()[r * w..(r + 1) * w].iter().copied()).collect();
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("row count matches")
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape("stack_rows", a.shape(), b.shape()));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.shape()[0] + b.shape()[0], a.shape()[1]], data)
}

fn counter(ckpt: &Checkpoint, name: &str) -> Result<u64> {
    let v = ckpt.scalar(name)?;
    if !(v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53)) {
        return Err(Error::Checkpoint(format!("entry `{name}` is not a counter: {v}")));
    }
    Ok(v as u64)
}

fn load_adam(ckpt: &Checkpoint, prefix: &str, params: &crate::autodiff::ParamSet) -> Result<AdamState> {
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (_, name, _) in params.iter() {
        m.push(ckpt.require(&format!("{prefix}.m.{name}"))?.clone());
        v.push(ckpt.require(&format!("{prefix}.v.{name}"))?.clone());
    }
    let t = counter(ckpt, &format!("{prefix}.t"))?;
    AdamState::from_parts(params, m, v, t).map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))
}
