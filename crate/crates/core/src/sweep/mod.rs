//! Grid sweeps over the two bin weights `(beta_2, beta_1)`: configuration,
//! parallel execution in deterministic order, the `runs.csv` format, per-metric
//! reports and hull selection over result tables.

mod config;
mod records;
mod report;

pub use config::{apply_overrides, set_path, DatasetSpec, Grid, GridAxis, SweepConfig};
pub use records::{
    fmt_f64, parse_f64, read_runs, write_runs, RunRecord, METRIC_COLUMNS, RUNS_FORMAT_VERSION, RUN_COLUMNS,
};
pub use report::{
    hull_table, plot_matrix, report, write_report, Best, Direction, HullRow, HullSelection, Report, REPORT_METRICS,
};

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::datasets::Dataset;
use crate::distributions::splitmix64;
use crate::error::{Error, Result};
use crate::hvae::{BetaVector, HvaeModel};
use crate::metrics::{EvalOptions, Evaluator, RunMetrics};
use crate::training::{train, TrainingTrace, GRAD_CLIP_NORM};

/// Training seed of grid cell `index`.
pub fn cell_seed(global_seed: u64, index: usize) -> u64 {
    splitmix64(global_seed ^ index as u64)
}

/// One point of the β grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub grid_i: usize,
    pub grid_j: usize,
    pub beta_2: f64,
    pub beta_1: f64,
}

/// Cells in grid order: `beta_2` index major, `beta_1` index minor.
pub fn cells(grid: &Grid) -> Vec<Cell> {
    let (b2, b1) = (grid.beta_2.values(), grid.beta_1.values());
    let mut out = Vec::with_capacity(b2.len() * b1.len());
    for (i, &beta_2) in b2.iter().enumerate() {
        for (j, &beta_1) in b1.iter().enumerate() {
            out.push(Cell {
                index: out.len(),
                grid_i: i,
                grid_j: j,
                beta_2,
                beta_1,
            });
        }
    }
    out
}

/// Datasets and evaluation context shared by every run of a config.
pub struct Workspace {
    pub config: SweepConfig,
    pub train: Dataset,
    pub eval: Dataset,
}

impl Workspace {
    pub fn new(config: SweepConfig) -> Result<Self> {
        config.validate()?;
        let (train, eval) = config.dataset.build()?;
        if train.dim() != config.model.data_dim {
            return Err(Error::Config(format!(
                "dataset has dimension {} but model.data_dim is {}",
                train.dim(),
                config.model.data_dim
            )));
        }
        Ok(Self { config, train, eval })
    }

    pub fn evaluator(&self) -> Result<Evaluator<'_>> {
        let opts = EvalOptions {
            probe_layers: self.config.probe_layers()?.to_vec(),
            ..self.config.eval.clone()
        };
        Evaluator::new(&self.train, &self.eval, opts)
    }

    /// Trains with `betas` and `seed`, then evaluates.
    pub fn run(&self, evaluator: &Evaluator<'_>, betas: &BetaVector, seed: u64) -> Result<RunOutcome> {
        let spec = crate::training::TrainSpec {
            seed,
            ..self.config.train.clone()
        };
        let start = Instant::now();
        let (model, trace) = train(&self.config.model, &self.train, betas, &spec)?;
        let metrics = evaluator.evaluate(&model)?;
        Ok(RunOutcome {
            model,
            trace,
            metrics,
            seed,
            betas: betas.clone(),
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// CSV row for a finished run.
    pub fn record(&self, cell: &Cell, outcome: &RunOutcome) -> Result<RunRecord> {
        let [upper, _] = self.config.bins()?;
        let mut r = RunRecord::from_metrics(
            cell.grid_i,
            cell.grid_j,
            cell.beta_2,
            cell.beta_1,
            outcome.seed,
            self.config.train.steps,
            &outcome.metrics,
            upper.len(),
            self.config.probe_layers()?,
        );
        if self.config.record_wall_time {
            r.wall_ms = outcome.wall_ms;
        }
        Ok(r)
    }
}

/// A trained and evaluated model.
pub struct RunOutcome {
    pub model: HvaeModel,
    pub trace: TrainingTrace,
    pub metrics: RunMetrics,
    pub seed: u64,
    pub betas: BetaVector,
    pub wall_ms: u64,
}

/// Status token written for a failed cell.
pub fn failure_status(err: &Error) -> &'static str {
    match err {
        Error::Divergence { .. } => "diverged",
        Error::NonFinite(_) => "non_finite",
        _ => "error",
    }
}

/// Rows in grid order plus measured wall times.
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub wall_ms: Vec<u64>,
    /// Full evaluation of each successful cell, in grid order.
    pub metrics: Vec<Option<RunMetrics>>,
    /// `(cell index, message)` for every failed cell.
    pub failures: Vec<(usize, String)>,
}

/// Default parallelism: `HITLAB_JOBS` if set, else the available cores.
pub fn default_jobs() -> usize {
    std::env::var("HITLAB_JOBS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&j| j >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every grid cell with at most `jobs` concurrent trainings. Failed
/// cells become rows with a failure status; the sweep fails only when every
/// cell does.
pub fn run_sweep(ws: &Workspace) -> Result<SweepResult> {
    let evaluator = ws.evaluator()?;
    let grid = cells(&ws.config.grid);
    let jobs = ws.config.jobs.unwrap_or_else(default_jobs);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    let steps = ws.config.train.steps;

    let results: Vec<(RunRecord, u64, std::result::Result<RunMetrics, String>)> = pool.install(|| {
        grid.par_iter()
            .map(|cell| {
                let seed = cell_seed(ws.config.seed, cell.index);
                let start = Instant::now();
                let attempt = ws
                    .config
                    .betas_for(cell.beta_2, cell.beta_1)
                    .and_then(|b| ws.run(&evaluator, &b, seed))
                    .and_then(|o| Ok((ws.record(cell, &o)?, o.metrics)));
                let ms = start.elapsed().as_millis() as u64;
                match attempt {
                    Ok((r, m)) => (r, ms, Ok(m)),
                    Err(e) => {
                        let status = failure_status(&e);
                        let r = RunRecord::failed(cell.grid_i, cell.grid_j, cell.beta_2, cell.beta_1, seed, steps, status);
                        (r, ms, Err(e.to_string()))
                    }
                }
            })
            .collect()
    });

    let mut out = SweepResult {
        records: Vec::with_capacity(results.len()),
        wall_ms: Vec::with_capacity(results.len()),
        metrics: Vec::with_capacity(results.len()),
        failures: Vec::new(),
    };
    for (idx, (r, ms, outcome)) in results.into_iter().enumerate() {
        match outcome {
            Ok(m) => out.metrics.push(Some(m)),
            Err(e) => {
                out.metrics.push(None);
                out.failures.push((idx, e));
            }
        }
        out.records.push(r);
        out.wall_ms.push(ms);
    }
    if out.records.iter().all(|r| !r.is_ok()) {
        let first = out.failures.first().map(|(_, e)| e.clone()).unwrap_or_default();
        return Err(Error::NonFinite(format!("every grid cell failed; first failure: {first}")));
    }
    Ok(out)
}

/// Settings recorded in the leading comments of `runs.csv`.
pub fn run_metadata(cfg: &SweepConfig) -> Result<Vec<(String, String)>> {
    let t = &cfg.train;
    let compact = |v: serde_json::Value| v.to_string();
    Ok(vec![
        ("seed".into(), cfg.seed.to_string()),
        ("dataset".into(), compact(serde_json::to_value(&cfg.dataset)?)),
        ("model".into(), compact(serde_json::to_value(&cfg.model)?)),
        ("bins".into(), compact(serde_json::to_value(cfg.bins()?)?)),
        ("steps".into(), t.steps.to_string()),
        ("batch_size".into(), t.batch_size.to_string()),
        ("learning_rate".into(), fmt_f64(t.learning_rate)),
        (
            "optimizer".into(),
            format!("adam({},{},{})", fmt_f64(t.adam_beta1), fmt_f64(t.adam_beta2), fmt_f64(t.adam_eps)),
        ),
        ("grad_clip_norm".into(), fmt_f64(GRAD_CLIP_NORM)),
        ("schedule".into(), "constant lr, no early stopping".into()),
        ("eval".into(), compact(serde_json::to_value(&cfg.eval)?)),
    ])
}

/// Writes `runs.csv`, `timings.csv` and the resolved `config.json` into `dir`.
pub fn write_sweep(dir: &Path, cfg: &SweepConfig, result: &SweepResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let runs = std::fs::File::create(dir.join("runs.csv"))?;
    write_runs(std::io::BufWriter::new(runs), &run_metadata(cfg)?, &result.records)?;
    let mut w = csv::Writer::from_path(dir.join("timings.csv"))?;
    w.write_record(["grid_i", "grid_j", "wall_ms", "status"])?;
    for (r, ms) in result.records.iter().zip(&result.wall_ms) {
        w.write_record([r.grid_i.to_string(), r.grid_j.to_string(), ms.to_string(), r.status.clone()])?;
    }
    w.flush()?;
    std::fs::write(dir.join("config.json"), cfg.to_json()?)?;
    Ok(())
}
