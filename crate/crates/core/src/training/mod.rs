//! Alternating discriminator/generator optimization, run directories and
//! lambda sweeps.

mod adam;
mod run;
mod sweep;
mod trainer;

use std::fmt;
use std::str::FromStr;

pub use adam::{adam_step, AdamConfig, AdamState, ADAM_EPSILON};
pub use run::{resume_run, train_run, RunOptions, RunOutcome, CSV_HEADER};
pub use sweep::{sweep, Aggregate, CellResult, SweepOptions, SweepSummary, POINTS_HEADER, SUMMARY_HEADER};
pub use trainer::{StepReport, Trainer};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_MATCHING_TAU};
use crate::models::ModelDims;

/// How the latent pairs of the mode-seeking term are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PairMode {
    /// Every batch example gets its own `(z1, z2)` pair, so the generator
    /// runs on twice the batch.
    #[default]
    PerExample,
    /// The first half of the batch is paired; the generator runs on one
    /// batch worth of rows.
    SplitBatch,
}

impl PairMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PairMode::PerExample => "per_example",
            PairMode::SplitBatch => "split_batch",
        }
    }

    /// Number of pairs drawn for a batch of `batch_size`.
    pub fn pairs(self, batch_size: usize) -> usize {
        match self {
            PairMode::PerExample => batch_size,
            PairMode::SplitBatch => batch_size / 2,
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_example" => Ok(PairMode::PerExample),
            "split_batch" => Ok(PairMode::SplitBatch),
            _ => Err(format!("expected per_example or split_batch, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss_weights: LossWeights,
    pub dims: ModelDims,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Evaluate and checkpoint every this many epochs.
    pub eval_every: usize,
    /// Generated samples per context at each evaluation.
    pub n_eval: usize,
    pub matching_tau: f64,
    pub pair_mode: PairMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_weights: LossWeights::default(),
            dims: ModelDims::default(),
            epochs: 400,
            steps_per_epoch: 50,
            batch_size: 64,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 1,
            eval_every: 50,
            n_eval: 2000,
            matching_tau: DEFAULT_MATCHING_TAU,
            pair_mode: PairMode::PerExample,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.beta1, self.beta2)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        self.dims.validate()?;
        self.adam().validate()?;
        if self.batch_size < 2 {
            return Err(Error::Contract(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.pair_mode.pairs(self.batch_size) == 0 {
            return Err(Error::Contract("batch too small for mode-seeking pairs".into()));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Contract("steps_per_epoch must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Contract("eval_every must be positive".into()));
        }
        if self.n_eval < 4 {
            return Err(Error::Contract(format!("n_eval must be at least 4, got {}", self.n_eval)));
        }
        if !(self.matching_tau > 0.0 && self.matching_tau.is_finite()) {
            return Err(Error::Contract(format!("matching_tau must be positive, got {}", self.matching_tau)));
        }
        Ok(())
    }

    /// Epochs at which an evaluation row and checkpoint are written.
    pub fn is_eval_epoch(&self, epoch: usize) -> bool {
        epoch % self.eval_every == 0 || epoch == self.epochs
    }
}
