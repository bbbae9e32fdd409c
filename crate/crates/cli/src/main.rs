use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sparseconvmil::bench::{bench_csv, run_bench, BenchSetting};
use sparseconvmil::checkpoint::load_checkpoint;
use sparseconvmil::config::RunConfig;
use sparseconvmil::data::{generate_synthetic, read_dataset, write_dataset, Split, SynthSpec, Task};
use sparseconvmil::gradcheck::run_all;
use sparseconvmil::model::Method;
use sparseconvmil::training::{evaluate, train};

#[derive(Parser)]
#[command(name = "smil", version, about = "Sparse-input convolutional multiple instance learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bag dataset.
    Gen(GenArgs),
    /// Train one model and write checkpoints plus a per-epoch metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write the metrics as JSON.
    Eval(EvalArgs),
    /// Train several methods with identical seeds and compare them.
    Bench(BenchArgs),
    /// Run every finite-difference gradient check.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long)]
    bags: usize,
    #[arg(long, default_value_t = 32)]
    tiles_per_bag: usize,
    #[arg(long, default_value_t = 4096)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    n_types: usize,
    /// Adjacency threshold in cells of the reference downsampling.
    #[arg(long, default_value_t = 2)]
    adjacency_d: usize,
    #[arg(long, default_value_t = 128)]
    reference_downsampling: usize,
    #[arg(long, default_value_t = 0.5)]
    noise_sigma: f64,
    /// Patch side length in pixels.
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 0.6)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    validation_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, required = true)]
    methods: Vec<Method>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; receives bench.csv and per-run artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Optional downsampling sweep, applied to every method.
    #[arg(long, value_delimiter = ',')]
    downsampling: Vec<usize>,
    /// Optional tiles-per-bag sweep, applied to every method.
    #[arg(long, value_delimiter = ',')]
    tiles: Vec<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: sparseconvmil::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: sparseconvmil::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: sparseconvmil::Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let spec = SynthSpec {
        task: a.task,
        n_bags: a.bags,
        tiles_per_bag: a.tiles_per_bag,
        n_types: a.n_types,
        patch_h: a.patch,
        patch_w: a.patch,
        grid: a.grid,
        adjacency_d: a.adjacency_d,
        reference_downsampling: a.reference_downsampling,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
        train_fraction: a.train_fraction,
        validation_fraction: a.validation_fraction,
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec)?;
    write_dataset(&a.out, &ds).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!("wrote {} bags to {}", ds.bags.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ds = read_dataset(&a.data)?;
    let outcome = train(&ds, &cfg, Some(&a.out))?;
    let best = &outcome.history[outcome.best_epoch.saturating_sub(1)];
    println!(
        "best epoch {} (validation CE {:.4}, AUC {:.3}); artifacts in {}",
        outcome.best_epoch,
        best.metrics.cross_entropy,
        best.metrics.macro_auc,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let ds = read_dataset(&a.data)?;
    let mut cfg = ck.config.clone();
    cfg.resolve_for(&ds)?;
    if cfg.model != ck.model.config {
        bail!("checkpoint {} does not match dataset {}", a.model.display(), a.data.display());
    }
    let bags = ds.split(a.split);
    let report = evaluate(&ck.model, &bags, ck.config.training.seed)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(&a.out, json).with_context(|| format!("writing {}", a.out.display()))?;
    println!("balanced accuracy {:.4}, macro AUC {:.4}", report.balanced_accuracy, report.macro_auc);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ds = read_dataset(&a.data)?;
    let ds_values: Vec<Option<usize>> = if a.downsampling.is_empty() {
        vec![None]
    } else {
        a.downsampling.iter().copied().map(Some).collect()
    };
    let tile_values: Vec<Option<usize>> = if a.tiles.is_empty() {
        vec![None]
    } else {
        a.tiles.iter().copied().map(Some).collect()
    };
    let mut settings = Vec::new();
    for &method in &a.methods {
        for &downsampling in &ds_values {
            for &n_tiles in &tile_values {
                settings.push(BenchSetting {
                    method,
                    downsampling,
                    n_tiles,
                });
            }
        }
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let rows = run_bench(&ds, &cfg, &settings, Some(&a.out))?;
    let path = a.out.join("bench.csv");
    std::fs::write(&path, bench_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", bench_csv(&rows));
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = run_all(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:48} rel {:.2e} (tol {:.0e}, {} coords)",
            r.name, r.max_rel_error, r.tolerance, r.checked
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // help and version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
