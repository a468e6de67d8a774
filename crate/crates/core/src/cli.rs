//! Command-line front end: `train`, `eval`, `sweep`, `inspect-checkpoint`.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime failure, 3 numerical abort.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::training::{resume_run, sweep, train_run, RunOptions, RunOutcome, SweepOptions, Trainer, POINTS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const EVAL_CSV_HEADER: &str = "epoch,lambda_ms,seed,frechet,modes_covered,hq_ratio,mean_ms_ratio";

#[derive(Parser, Debug)]
#[command(
    name = "mslab",
    version,
    about = "Conditional GAN training with a mode-seeking regularizer",
    after_help = "Runs are created under --out, the config's output_dir, $MSLAB_OUTPUT_ROOT, or ./runs, in that order."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run, or continue an interrupted one with --resume.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train every (lambda, seed) cell and aggregate the final metrics.
    Sweep(SweepArgs),
    /// Print a checkpoint's version, config and tensor table.
    InspectCheckpoint { path: PathBuf },
}

/// Overrides applied on top of a config file, in this order: `--set`
/// entries, then the dedicated flags.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Any config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output root; runs are created inside it.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run (or sweep) directory name inside the output root.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file.
    #[arg(required_unless_present = "resume")]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda_ms: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
    /// Continue the run in RUN_DIR from its latest checkpoint.
    #[arg(long, value_name = "RUN_DIR", conflicts_with_all = ["config", "lambda_ms", "seed", "set", "epochs", "steps_per_epoch", "batch_size", "lr", "out", "name"])]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Samples per context (default: the run's n_eval).
    #[arg(long)]
    n_eval: Option<usize>,
    /// Evaluation seed (default: the run's seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    config: PathBuf,
    /// Comma-separated mode-seeking weights.
    #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
    lambdas: Vec<f64>,
    /// Comma-separated seeds.
    #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
    seeds: Vec<u64>,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: u32,
    #[command(flatten)]
    overrides: Overrides,
}

/// Why a command failed.
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run(args: impl IntoIterator<Item = OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::InspectCheckpoint { path } => cmd_inspect(&path, out).map_err(Failure::from),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::NumericalAbort { .. } => EXIT_NUMERICAL,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) -> std::result::Result<(), Failure> {
    let usage = |e: Error| Failure::Usage(e.to_string());
    for entry in &o.set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{entry}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    let numeric: [(&str, Option<String>); 4] = [
        ("epochs", o.epochs.map(|v| v.to_string())),
        ("steps_per_epoch", o.steps_per_epoch.map(|v| v.to_string())),
        ("batch_size", o.batch_size.map(|v| v.to_string())),
        ("lr", o.lr.map(|v| v.to_string())),
    ];
    for (k, v) in numeric {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(usage)?;
        }
    }
    if let Some(dir) = &o.out {
        cfg.output_dir = Some(dir.clone());
    }
    if let Some(name) = &o.name {
        cfg.set("run_name", name).map_err(usage)?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let outcome = if let Some(dir) = &a.resume {
        resume_run(dir, &RunOptions::default())?
    } else {
        let path = a.config.as_deref().expect("clap requires a config without --resume");
        let mut cfg = ExperimentConfig::load(path)?;
        apply_overrides(&mut cfg, &a.overrides)?;
        if let Some(l) = a.lambda_ms {
            cfg.set("lambda_ms", &l.to_string()).map_err(|e| Failure::Usage(e.to_string()))?;
        }
        if let Some(s) = a.seed {
            cfg.set("seed", &s.to_string()).map_err(|e| Failure::Usage(e.to_string()))?;
        }
        train_run(&cfg, &RunOptions::default())?
    };
    report_run(&outcome, out);
    Ok(EXIT_OK)
}

fn report_run(o: &RunOutcome, out: &mut dyn Write) {
    let _ = writeln!(out, "run directory: {}", o.run_dir.display());
    let _ = writeln!(out, "epochs completed: {}", o.epochs_completed);
    let _ = write!(out, "{}", describe(&o.final_record));
}

/// Human-readable multi-line summary of one evaluation.
pub fn describe(r: &MetricsRecord) -> String {
    let per_context: Vec<String> = r.modes_covered_per_context.iter().map(|m| m.to_string()).collect();
    let frechets: Vec<String> = r.frechet_per_context.iter().map(|f| format!("{f:.6}")).collect();
    format!(
        "epoch          {}\n\
         lambda_ms      {}\n\
         modes covered  {}/{} (per context: {})\n\
         frechet        {:.6} (per context: {})\n\
         hq_ratio       {:.4}\n\
         mean_ms_ratio  {:.6}\n",
        r.epoch,
        r.lambda_ms,
        r.modes_covered,
        r.total_modes,
        per_context.join(" "),
        r.frechet,
        frechets.join(" "),
        r.hq_ratio,
        r.mean_ms_ratio
    )
}

pub fn eval_csv_row(r: &MetricsRecord, seed: u64) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.epoch, r.lambda_ms, seed, r.frechet, r.modes_covered, r.hq_ratio, r.mean_ms_ratio
    )
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    let mut cfg = ExperimentConfig::parse(&ckpt.metadata)
        .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;
    if let Some(n) = a.n_eval {
        cfg.set("n_eval", &n.to_string()).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let trainer = Trainer::from_checkpoint(cfg.train.clone(), cfg.spec()?, &ckpt)?;
    let steps = cfg.train.steps_per_epoch.max(1) as u64;
    let epoch = (trainer.step() / steps) as usize;
    let record = trainer.evaluate(epoch)?;
    let _ = writeln!(out, "checkpoint     {}", a.checkpoint.display());
    let _ = writeln!(out, "seed           {}", cfg.train.seed);
    let _ = writeln!(out, "n_eval         {}", cfg.train.n_eval);
    let _ = write!(out, "{}", describe(&record));
    let _ = writeln!(out, "{EVAL_CSV_HEADER}");
    let _ = writeln!(out, "{}", eval_csv_row(&record, cfg.train.seed));
    Ok(EXIT_OK)
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    apply_overrides(&mut cfg, &a.overrides)?;
    for &l in &a.lambdas {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Failure::Usage(format!("lambdas must be finite and >= 0, got {l}")));
        }
    }
    let summary = sweep(&cfg, &a.lambdas, &a.seeds, &SweepOptions { jobs: a.jobs as usize })?;
    let _ = writeln!(out, "sweep directory: {}", summary.dir.display());
    for c in &summary.cells {
        let _ = match &c.outcome {
            Ok(r) => writeln!(
                out,
                "lambda {} seed {}: modes {}/{} frechet {:.6}",
                c.lambda_ms, c.seed, r.modes_covered, r.total_modes, r.frechet
            ),
            Err(e) => writeln!(out, "lambda {} seed {}: failed: {e}", c.lambda_ms, c.seed),
        };
    }
    let _ = writeln!(out, "{}", POINTS_HEADER);
    for agg in &summary.aggregates {
        let _ = writeln!(out, "{}", agg.tsv_line());
    }
    if summary.all_failed() {
        return Err(Failure::Run(Error::Contract("every sweep cell failed".into())));
    }
    Ok(EXIT_OK)
}

fn cmd_inspect(path: &Path, out: &mut dyn Write) -> Result<i32> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let _ = writeln!(out, "file     {}", path.display());
    let _ = writeln!(out, "version  {}", crate::checkpoint::VERSION);
    let _ = writeln!(out, "bytes    {}", bytes.len());
    if let Ok(step) = ckpt.scalar("state.step") {
        let _ = writeln!(out, "step     {step}");
    }
    let _ = writeln!(out, "entries  {}", ckpt.entries().len());
    for (name, t) in ckpt.entries() {
        let _ = writeln!(out, "  {name:<32} {:?}", t.shape());
    }
    let _ = writeln!(out, "config:");
    for line in ckpt.metadata.lines() {
        let _ = writeln!(out, "  {line}");
    }
    Ok(EXIT_OK)
}
