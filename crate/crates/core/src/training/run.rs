use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

use super::trainer::{StepReport, Trainer};

pub const CSV_HEADER: &str =
    "epoch,lambda_ms,seed,frechet,modes_covered,hq_ratio,mean_ms_ratio,adv_loss,ca_loss,matching_loss,ms_penalty,d_loss";

const SNAPSHOT: &str = "config.snapshot";
const METRICS: &str = "metrics.csv";
const CHECKPOINTS: &str = "checkpoints";
const EPOCH_LOSSES: &str = "run.epoch_losses";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Return after this epoch's work (and its checkpoint, if any), as if
    /// the process had been interrupted.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    /// Last evaluation written to `metrics.csv`.
    pub final_record: MetricsRecord,
    pub epochs_completed: usize,
    pub finished: bool,
}

/// Epoch means of the logged loss columns.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct EpochLosses {
    adv: f64,
    ca: f64,
    matching: f64,
    ms_penalty: f64,
    d: f64,
}

impl EpochLosses {
    fn mean(reports: &[StepReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mut e = EpochLosses::default();
        for r in reports {
            e.adv += r.breakdown.adv_total();
            e.ca += r.breakdown.ca;
            e.matching += r.breakdown.matching;
            e.ms_penalty += r.breakdown.ms_penalty;
            e.d += r.d_loss;
        }
        EpochLosses {
            adv: e.adv / n,
            ca: e.ca / n,
            matching: e.matching / n,
            ms_penalty: e.ms_penalty / n,
            d: e.d / n,
        }
    }

    fn to_tensor(self) -> Tensor {
        Tensor::vector(vec![self.adv, self.ca, self.matching, self.ms_penalty, self.d])
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.data() {
            &[adv, ca, matching, ms_penalty, d] => Ok(EpochLosses {
                adv,
                ca,
                matching,
                ms_penalty,
                d,
            }),
            _ => Err(Error::Checkpoint(format!("`{EPOCH_LOSSES}` must hold 5 values"))),
        }
    }
}

fn csv_row(record: &MetricsRecord, seed: u64, losses: Option<EpochLosses>) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{}",
        record.epoch,
        record.lambda_ms,
        seed,
        record.frechet,
        record.modes_covered,
        record.hq_ratio,
        record.mean_ms_ratio
    );
    match losses {
        Some(l) => row.push_str(&format!(",{},{},{},{},{}", l.adv, l.ca, l.matching, l.ms_penalty, l.d)),
        None => row.push_str(",,,,,"),
    }
    row
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Creates `root/name`, or `root/name-1`, `root/name-2`, ... if taken.
pub(crate) fn fresh_dir(root: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for i in 0.. {
        let candidate = if i == 0 {
            root.join(name)
        } else {
            root.join(format!("{name}-{i}"))
        };
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&candidate, e)),
        }
    }
    unreachable!()
}

pub(crate) fn default_run_name(cfg: &ExperimentConfig) -> String {
    format!("lms{}_seed{}", cfg.train.loss_weights.lambda_ms, cfg.train.seed)
}

fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(CHECKPOINTS).join(format!("epoch_{epoch}"))
}

/// Trains one configuration in a fresh run directory under the config's
/// output root.
///
/// The directory receives `config.snapshot`, `metrics.csv` (one row per
/// evaluation, starting with the untrained model at epoch 0) and
/// `checkpoints/epoch_<n>` at every evaluation epoch. The final epoch is
/// always evaluated and checkpointed.
pub fn train_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let name = cfg.run_name.clone().unwrap_or_else(|| default_run_name(cfg));
    let run_dir = fresh_dir(&cfg.output_root(), &name)?;
    let snapshot = cfg.to_text();
    fs::write(run_dir.join(SNAPSHOT), &snapshot).map_err(|e| Error::io(run_dir.join(SNAPSHOT), e))?;
    let ckpt_dir = run_dir.join(CHECKPOINTS);
    fs::create_dir(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics = run_dir.join(METRICS);
    append_line(&metrics, CSV_HEADER)?;

    let trainer = Trainer::new(cfg.train.clone(), spec)?;
    let record = trainer.evaluate(0)?;
    trainer.to_checkpoint(snapshot.clone()).write(&checkpoint_path(&run_dir, 0))?;
    append_line(&metrics, &csv_row(&record, cfg.train.seed, None))?;
    if opts.stop_after_epoch == Some(0) && cfg.train.epochs > 0 {
        return Ok(RunOutcome {
            run_dir,
            final_record: record,
            epochs_completed: 0,
            finished: false,
        });
    }
    drive(trainer, &snapshot, run_dir, 0, record, opts)
}

/// Continues a run from its latest checkpoint. Rows already in
/// `metrics.csv` are kept; the completed file matches an uninterrupted run.
pub fn resume_run(run_dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let snapshot_path = run_dir.join(SNAPSHOT);
    let snapshot = fs::read_to_string(&snapshot_path).map_err(|e| Error::io(&snapshot_path, e))?;
    let cfg = ExperimentConfig::parse(&snapshot)?;
    let ckpt_dir = run_dir.join(CHECKPOINTS);
    let mut latest = None;
    for entry in fs::read_dir(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&ckpt_dir, e))?;
        let name = entry.file_name();
        if let Some(epoch) = name.to_str().and_then(|n| n.strip_prefix("epoch_")).and_then(|n| n.parse::<usize>().ok()) {
            latest = latest.max(Some(epoch));
        }
    }
    let epoch = latest.ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", ckpt_dir.display())))?;
    let ckpt = Checkpoint::read(&checkpoint_path(run_dir, epoch))?;
    let trainer = Trainer::from_checkpoint(cfg.train.clone(), cfg.spec()?, &ckpt)?;
    let expected = (epoch * cfg.train.steps_per_epoch) as u64;
    if trainer.step() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint epoch_{epoch} holds step {}, expected {expected}",
            trainer.step()
        )));
    }

    let metrics = run_dir.join(METRICS);
    let text = fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let last_logged = text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next()?.parse::<usize>().ok())
        .max();
    let record = trainer.evaluate(epoch)?;
    if last_logged.is_none_or(|e| e < epoch) {
        // interrupted between checkpoint and log line
        let losses = ckpt.get(EPOCH_LOSSES).map(EpochLosses::from_tensor).transpose()?;
        append_line(&metrics, &csv_row(&record, cfg.train.seed, losses))?;
    }
    drive(trainer, &snapshot, run_dir.to_path_buf(), epoch, record, opts)
}

fn drive(
    mut trainer: Trainer,
    snapshot: &str,
    run_dir: PathBuf,
    start_epoch: usize,
    mut record: MetricsRecord,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let cfg = trainer.config().clone();
    let metrics = run_dir.join(METRICS);
    let mut reports = Vec::with_capacity(cfg.steps_per_epoch);
    for epoch in start_epoch + 1..=cfg.epochs {
        reports.clear();
        for _ in 0..cfg.steps_per_epoch {
            reports.push(trainer.train_step()?);
        }
        if cfg.is_eval_epoch(epoch) {
            let losses = EpochLosses::mean(&reports);
            record = trainer.evaluate(epoch)?;
            let mut ckpt = trainer.to_checkpoint(snapshot);
            ckpt.insert(EPOCH_LOSSES, losses.to_tensor());
            ckpt.write(&checkpoint_path(&run_dir, epoch))?;
            append_line(&metrics, &csv_row(&record, cfg.seed, Some(losses)))?;
        }
        if opts.stop_after_epoch == Some(epoch) && epoch < cfg.epochs {
            return Ok(RunOutcome {
                run_dir,
                final_record: record,
                epochs_completed: epoch,
                finished: false,
            });
        }
    }
    Ok(RunOutcome {
        run_dir,
        final_record: record,
        epochs_completed: cfg.epochs,
        finished: true,
    })
}
