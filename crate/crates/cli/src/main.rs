use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vifo::harness::{
    config_dir, evaluate_run, resolve_threads, run_bench, run_sinusoid, run_train, run_verify, write_bench_csv,
    write_metrics_csv, write_sinusoid_csv, MetricsRow, SinusoidConfig, TrainConfig, VerifyHooks,
};

#[derive(Debug, Parser)]
#[command(name = "vifo", version, about = "Train, evaluate and benchmark output-space variational networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an ensemble from a config file and evaluate it.
    Train(TrainArgs),
    /// Re-evaluate the models of a finished run.
    Evaluate(EvaluateArgs),
    /// Time training epochs of base, vifo and vi.
    Bench(BenchArgs),
    /// Run the numeric self-checks; exits non-zero if any fails.
    Verify(VerifyArgs),
    /// Fit the 1-D sinusoid and write the predictive band on a grid.
    SinusoidDemo(SinusoidArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// Run seed; member i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta_aux: Option<f64>,
    #[arg(long)]
    ensemble_size: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.eta_aux {
            cfg.eta_aux = e;
        }
        if let Some(n) = self.ensemble_size {
            cfg.ensemble_size = n;
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML or JSON run config (a previous run's manifest.json also works).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "vifo-run")]
    out_dir: PathBuf,
    /// Headered CSV of out-of-distribution feature rows.
    #[arg(long)]
    ood: Option<PathBuf>,
    /// Worker threads for ensemble members.
    #[arg(long, env = "VIFO_THREADS")]
    threads: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory written by `vifo train`.
    #[arg(long)]
    out_dir: PathBuf,
    /// Config whose dataset to evaluate on; defaults to the run's own.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ood: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "vifo-bench")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Also write the report to `<out-dir>/verify.json`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SinusoidArgs {
    /// TOML overrides for the demo settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "vifo-sinusoid")]
    out_dir: PathBuf,
    #[arg(long)]
    eta_aux: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config(path: &Path) -> Result<(TrainConfig, PathBuf)> {
    let cfg = TrainConfig::load(path)?;
    Ok((cfg, config_dir(path)))
}

fn print_rows(rows: &[MetricsRow]) {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!("{:<10} {:>9} {:>7} {:>7} {:>8} {:>7} {:>8}", "seed", "nll", "acc", "ece", "entropy", "auroc", "seconds");
    for r in rows {
        println!(
            "{:<10} {:>9.4} {:>7} {:>7} {:>8} {:>7} {:>8.2}",
            r.seed,
            r.nll,
            opt(r.acc),
            opt(r.ece),
            opt(r.entropy),
            opt(r.auroc),
            r.seconds
        );
    }
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let (mut cfg, dir) = load_config(&args.config)?;
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    cfg.resolve_paths(&dir);
    let threads = resolve_threads(args.threads);
    let (manifest, _) = run_train(&cfg, &dir, &args.out_dir, threads, args.ood.as_deref())?;
    print_rows(&manifest.metrics);
    eprintln!("wrote {}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let (cfg, dir) = match &args.config {
        Some(p) => {
            let (mut c, d) = load_config(p)?;
            c.resolve_paths(&d);
            (Some(c), d)
        }
        None => (None, args.out_dir.clone()),
    };
    let cfg = match (cfg, args.seed) {
        (Some(mut c), Some(s)) => {
            c.seed = s;
            Some(c)
        }
        (c, _) => c,
    };
    let (rows, _) = evaluate_run(&args.out_dir, cfg, &dir, args.ood.as_deref())?;
    write_metrics_csv(&args.out_dir.join("eval_metrics.csv"), &rows)?;
    print_rows(&rows);
    Ok(ExitCode::SUCCESS)
}

fn bench(args: BenchArgs) -> Result<ExitCode> {
    let (mut cfg, dir) = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let rows = run_bench(&cfg, &dir)?;
    write_bench_csv(&args.out_dir.join("bench.csv"), &rows)?;
    println!("{:<6} {:>4} {:>12} {:>12} {:>12} {:>8}", "method", "M", "median_s", "mean_s", "std_s", "params");
    for r in &rows {
        println!(
            "{:<6} {:>4} {:>12.6} {:>12.6} {:>12.6} {:>8}",
            r.method, r.m, r.median_seconds, r.mean_seconds, r.std_seconds, r.params
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(args: VerifyArgs) -> Result<ExitCode> {
    let report = run_verify(args.seed, &VerifyHooks::default());
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("verify.json"), &json).with_context(|| format!("writing {}", dir.display()))?;
    }
    println!("{json}");
    if report.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed checks: {}", report.failures().join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn sinusoid(args: SinusoidArgs) -> Result<ExitCode> {
    let mut sc = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml_config(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SinusoidConfig::default(),
    };
    if let Some(e) = args.eta_aux {
        sc.eta_aux = e;
    }
    if let Some(s) = args.seed {
        sc.seed = s;
    }
    if !(sc.eta_aux >= 0.0) {
        bail!("--eta-aux must be non-negative");
    }
    let result = run_sinusoid(&sc)?;
    let path = args.out_dir.join(format!("sinusoid_eta_aux_{}_seed_{}.csv", sc.eta_aux, sc.seed));
    write_sinusoid_csv(&path, &result.rows)?;
    println!(
        "{}",
        serde_json::json!({
            "eta_aux": sc.eta_aux,
            "seed": sc.seed,
            "train_rmse": result.train_rmse,
            "gap_mean_std": result.gap_mean_std,
            "grid_points": result.rows.len(),
            "csv": path,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn toml_config(text: &str) -> Result<SinusoidConfig> {
    Ok(SinusoidConfig::from_toml(text)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench(a),
        Command::Verify(a) => verify(a),
        Command::SinusoidDemo(a) => sinusoid(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
