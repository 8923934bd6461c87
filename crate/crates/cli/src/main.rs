//! `hitlab`: train single models, run β-grid sweeps, evaluate checkpoints,
//! and select or summarize sweep results.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hitlab::hvae::BetaVector;
use hitlab::sweep::{
    apply_overrides, cell_seed, hull_table, read_runs, run_sweep, write_report, write_sweep, SweepConfig, Workspace,
};
use hitlab::training::{load_checkpoint, save_checkpoint};
use hitlab::Error;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "hitlab", version, about = "Hierarchical VAE rate-control laboratory")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON config file; the built-in desk default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent training runs.
    #[arg(long, global = true, env = "HITLAB_JOBS")]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `dot.path=value` (repeatable), e.g. `train.steps=200`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint.json and metrics.json.
    Train {
        /// Comma-separated β values: one per layer (top-first), or two bin weights `beta_2,beta_1`.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 1.0])]
        beta: Vec<f64>,
    },
    /// Train every cell of the β grid and write runs.csv.
    Sweep {
        /// Print the resolved config and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Mark the upper convex hull of two columns of a CSV table.
    Hull {
        #[arg(long)]
        csv: PathBuf,
        /// Rate column.
        #[arg(long, default_value = "R_total")]
        x: String,
        /// Metric column.
        #[arg(long)]
        y: String,
        /// Treat smaller metric values as better.
        #[arg(long)]
        minimize: bool,
    },
    /// Best cell per metric and plot-ready grid matrices for a runs.csv.
    Report {
        #[arg(long)]
        csv: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        e if e.is_io() => 4,
        Error::NonFinite(_) | Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hitlab: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> hitlab::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train { beta } => cmd_train(g, beta),
        Command::Sweep { dry_run } => cmd_sweep(g, *dry_run),
        Command::Eval { checkpoint } => cmd_eval(g, checkpoint),
        Command::Hull { csv, x, y, minimize } => cmd_hull(g, csv, x, y, *minimize),
        Command::Report { csv } => cmd_report(g, csv),
    }
}

fn load_config(g: &Global) -> hitlab::Result<SweepConfig> {
    let base: Value = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: not valid JSON: {e}", path.display())))?
        }
        None => serde_json::to_value(SweepConfig::desk_default())?,
    };
    let mut value = apply_overrides(base, &g.overrides)?;
    if let Some(seed) = g.seed {
        value["seed"] = json!(seed);
    }
    if let Some(jobs) = g.jobs {
        value["jobs"] = json!(jobs);
    }
    if let Some(out) = &g.out {
        value["out"] = json!(out);
    }
    SweepConfig::from_value(value)
}

fn write_json(path: &Path, value: &Value) -> hitlab::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_train(g: &Global, beta: &[f64]) -> hitlab::Result<()> {
    let cfg = load_config(g)?;
    let layers = cfg.model.layers();
    let betas = match beta.len() {
        n if n == layers => BetaVector::new(beta.to_vec()),
        2 => cfg.betas_for(beta[0], beta[1]),
        n => Err(Error::Config(format!(
            "--beta takes {layers} per-layer values or 2 bin weights, got {n}"
        ))),
    }
    .map_err(|e| Error::Config(e.to_string()))?;
    let ws = Workspace::new(cfg)?;
    let evaluator = ws.evaluator()?;
    let seed = cell_seed(ws.config.seed, 0);
    let outcome = ws.run(&evaluator, &betas, seed)?;

    let out = &ws.config.out;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&outcome.model, seed, &betas, out.join("checkpoint.json"))?;
    let summary = json!({
        "seed": seed,
        "betas": betas.as_slice(),
        "steps": ws.config.train.steps,
        "final_minibatch": outcome.trace.last(),
        "metrics": outcome.metrics,
    });
    write_json(&out.join("metrics.json"), &summary)?;
    std::fs::write(out.join("config.json"), ws.config.to_json()?)?;
    let m = &outcome.metrics;
    println!(
        "trained {} steps: D={:.4} R={:.4} elbo={:.4} psnr={:.2} is={:.3}",
        ws.config.train.steps, m.distortion, m.total_rate, m.elbo, m.psnr, m.is
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(g: &Global, dry_run: bool) -> hitlab::Result<()> {
    let cfg = load_config(g)?;
    if dry_run {
        println!("{}", cfg.to_json()?);
        return Ok(());
    }
    let ws = Workspace::new(cfg)?;
    let result = run_sweep(&ws)?;
    for (idx, msg) in &result.failures {
        eprintln!("hitlab: cell {idx} failed: {msg}");
    }
    write_sweep(&ws.config.out, &ws.config, &result)?;
    let ok = result.records.iter().filter(|r| r.is_ok()).count();
    println!(
        "{ok}/{} cells ok; wrote {}",
        result.records.len(),
        ws.config.out.join("runs.csv").display()
    );
    Ok(())
}

fn cmd_eval(g: &Global, checkpoint: &Path) -> hitlab::Result<()> {
    let cfg = load_config(g)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let cfg = SweepConfig {
        model: ckpt.config.clone(),
        ..cfg
    };
    let ws = Workspace::new(cfg)?;
    let metrics = ws.evaluator()?.evaluate(&model)?;
    let summary = json!({
        "checkpoint": checkpoint,
        "seed": ckpt.seed,
        "betas": ckpt.betas,
        "metrics": metrics,
    });
    let text = serde_json::to_string_pretty(&summary)?;
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("eval.json"), &text)?;
    }
    println!("{text}");
    Ok(())
}

fn output_dir(g: &Global, input: &Path) -> PathBuf {
    g.out.clone().unwrap_or_else(|| {
        input
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

fn cmd_hull(g: &Global, csv_path: &Path, x: &str, y: &str, minimize: bool) -> hitlab::Result<()> {
    let text = std::fs::read_to_string(csv_path)?;
    let (annotated, selection) = hull_table(&text, x, y, !minimize)?;
    let dir = output_dir(g, csv_path);
    std::fs::create_dir_all(&dir)?;
    let stem = csv_path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    let csv_out = dir.join(format!("{stem}_hull_{y}.csv"));
    let json_out = dir.join(format!("selection_{y}.json"));
    std::fs::write(&csv_out, annotated)?;
    write_json(&json_out, &serde_json::to_value(&selection)?)?;
    for h in &selection.hull {
        println!("row {}: {x}={} {y}={}", h.row, h.x, h.y);
    }
    for (row, why) in &selection.excluded {
        eprintln!("hitlab: row {row} excluded: {why}");
    }
    println!("wrote {} and {}", csv_out.display(), json_out.display());
    Ok(())
}

fn cmd_report(g: &Global, csv_path: &Path) -> hitlab::Result<()> {
    let (_, records) = read_runs(std::fs::File::open(csv_path)?)?;
    let dir = output_dir(g, csv_path);
    let rep = write_report(&records, &dir)?;
    println!("{} cells, {} failed", rep.cells, rep.failed);
    for b in &rep.best {
        println!(
            "{:<15} best at (i={}, j={}) beta_2={} beta_1={}: {}",
            b.metric, b.grid_i, b.grid_j, b.beta_2, b.beta_1, b.value
        );
    }
    println!("wrote {}", dir.join("report.json").display());
    Ok(())
}
