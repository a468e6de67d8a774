use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

use super::run::{default_run_name, fresh_dir, train_run, RunOptions};

pub const SUMMARY_HEADER: &str = "lambda_ms,seed,status,frechet,modes_covered,hq_ratio,mean_ms_ratio,error";
pub const POINTS_HEADER: &str = "lambda_ms\tmean_frechet\tsd_frechet\tmean_modes\tsd_modes\tmean_hq_ratio\tsd_hq_ratio\tmean_ms_ratio\tsd_ms_ratio\tn_ok";

#[derive(Clone, Debug)]
pub struct SweepOptions {
    /// Cells trained concurrently.
    pub jobs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { jobs: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub lambda_ms: f64,
    pub seed: u64,
    /// Final evaluation, or the error message of a failed cell.
    pub outcome: std::result::Result<MetricsRecord, String>,
}

/// Mean and sample standard deviation of the successful cells at one
/// lambda. With fewer than two successes the deviation is 0; with none,
/// every statistic is NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub lambda_ms: f64,
    pub n_ok: usize,
    pub frechet: (f64, f64),
    pub modes_covered: (f64, f64),
    pub hq_ratio: (f64, f64),
    pub mean_ms_ratio: (f64, f64),
}

impl Aggregate {
    pub fn tsv_line(&self) -> String {
        let (a, b, c, d) = (self.frechet, self.modes_covered, self.hq_ratio, self.mean_ms_ratio);
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.lambda_ms, a.0, a.1, b.0, b.1, c.0, c.1, d.0, d.1, self.n_ok
        )
    }
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

impl SweepSummary {
    pub fn all_failed(&self) -> bool {
        self.cells.iter().all(|c| c.outcome.is_err())
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn aggregate(lambda_ms: f64, cells: &[CellResult]) -> Aggregate {
    let ok: Vec<&MetricsRecord> = cells
        .iter()
        .filter(|c| c.lambda_ms == lambda_ms)
        .filter_map(|c| c.outcome.as_ref().ok())
        .collect();
    let stat = |f: &dyn Fn(&MetricsRecord) -> f64| mean_sd(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
    Aggregate {
        lambda_ms,
        n_ok: ok.len(),
        frechet: stat(&|r| r.frechet),
        modes_covered: stat(&|r| r.modes_covered as f64),
        hq_ratio: stat(&|r| r.hq_ratio),
        mean_ms_ratio: stat(&|r| r.mean_ms_ratio),
    }
}

fn summary_line(c: &CellResult) -> String {
    match &c.outcome {
        Ok(r) => format!(
            "{},{},ok,{},{},{},{},",
            c.lambda_ms, c.seed, r.frechet, r.modes_covered, r.hq_ratio, r.mean_ms_ratio
        ),
        Err(e) => format!("{},{},failed,,,,,\"{}\"", c.lambda_ms, c.seed, e.replace('"', "\"\"")),
    }
}

/// Trains every `(lambda, seed)` cell in its own run directory inside a
/// fresh sweep directory, then writes `sweep_summary.csv` (one row per
/// cell) and `sweep_points.tsv` (one line per lambda). A failing cell is
/// recorded and the remaining cells still run.
pub fn sweep(base: &ExperimentConfig, lambdas: &[f64], seeds: &[u64], opts: &SweepOptions) -> Result<SweepSummary> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("sweep needs at least one lambda and one seed".into()));
    }
    base.validate()?;
    for &l in lambdas {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::Contract(format!("lambda_ms must be finite and >= 0, got {l}")));
        }
    }
    let dir = fresh_dir(&base.output_root(), base.run_name.as_deref().unwrap_or("sweep"))?;
    let grid: Vec<(f64, u64)> = lambdas.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();

    let run_cell = |(lambda_ms, seed): (f64, u64)| {
        let mut cfg = base.clone();
        cfg.train.loss_weights.lambda_ms = lambda_ms;
        cfg.train.seed = seed;
        cfg.output_dir = Some(dir.clone());
        cfg.run_name = Some(default_run_name(&cfg));
        let outcome = train_run(&cfg, &RunOptions::default())
            .map(|o| o.final_record)
            .map_err(|e| e.to_string());
        CellResult {
            lambda_ms,
            seed,
            outcome,
        }
    };

    let jobs = opts.jobs.clamp(1, grid.len());
    let cells: Vec<CellResult> = if jobs == 1 {
        grid.iter().map(|&c| run_cell(c)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; grid.len()]);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&cell) = grid.get(i) else { break };
                    let result = run_cell(cell);
                    slots.lock().expect("no panics while holding the lock")[i] = Some(result);
                });
            }
        });
        slots
            .into_inner()
            .expect("workers joined")
            .into_iter()
            .map(|c| c.expect("every cell ran"))
            .collect()
    };

    let mut seen = Vec::new();
    for &l in lambdas {
        if !seen.contains(&l) {
            seen.push(l);
        }
    }
    let aggregates: Vec<Aggregate> = seen.iter().map(|&l| aggregate(l, &cells)).collect();

    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for c in &cells {
        summary.push_str(&summary_line(c));
        summary.push('\n');
    }
    let path = dir.join("sweep_summary.csv");
    fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;

    let mut points = String::from(POINTS_HEADER);
    points.push('\n');
    for a in &aggregates {
        points.push_str(&a.tsv_line());
        points.push('\n');
    }
    let path = dir.join("sweep_points.tsv");
    fs::write(&path, points).map_err(|e| Error::io(&path, e))?;

    Ok(SweepSummary { dir, cells, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[7.0]), (7.0, 0.0));
        assert!(mean_sd(&[]).0.is_nan());
    }

    #[test]
    fn failed_cells_are_quoted() {
        let c = CellResult {
            lambda_ms: 1.0,
            seed: 2,
            outcome: Err("bad, \"thing\"".into()),
        };
        assert_eq!(summary_line(&c), "1,2,failed,,,,,\"bad, \"\"thing\"\"\"");
    }
}
