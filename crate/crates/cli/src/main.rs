mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{network_spec, parse_config, render, DatasetKind, RunConfig};
use ghn_core::data::{load_cifar10, load_mnist_idx, Dataset};
use ghn_core::ghd::{surface_csv, surface_sample, SurfaceOp};
use ghn_core::layers::{Network, NetworkKind, parse_arch};
use ghn_core::real::{Dtype, Real};
use ghn_core::train::{
    compare_bn_experiment, evaluate, load_checkpoint, save_checkpoint, train, Checkpoint,
};
use ghn_core::verify::{algebra_suite, distributivity_suite, gradient_suite, kernel_oracle_suite};
use ghn_core::{GhnError, Result};

#[derive(Parser)]
#[command(name = "ghn", about = "Generalized hamming network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (falls back to GHN_DATA_DIR)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for metrics and checkpoints
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Numeric precision: r32 or r64
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics plus a final checkpoint
    Train(RunFlags),
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        flags: RunFlags,
        /// Checkpoint file to load
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Paired GHN vs baseline+batch-norm run with output-statistics correlation
    CompareBn(RunFlags),
    /// Sample a GHD-derived surface to CSV
    Surface {
        /// One of: ghd, fuzziness, mu, dmu_da
        #[arg(long)]
        op: String,
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        min: f64,
        #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
        max: f64,
        #[arg(long, default_value_t = 0.01)]
        step: f64,
        /// Output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the algebra, distributivity, gradient, and kernel-oracle suites
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train(flags) => {
            let cfg = resolve_config(&flags)?;
            with_precision(&cfg, |p| match p {
                Dtype::R32 => cmd_train::<f32>(&cfg),
                Dtype::R64 => cmd_train::<f64>(&cfg),
            })
        }
        Command::Eval { flags, checkpoint } => {
            let cfg = resolve_config(&flags)?;
            with_precision(&cfg, |p| match p {
                Dtype::R32 => cmd_eval::<f32>(&cfg, &checkpoint),
                Dtype::R64 => cmd_eval::<f64>(&cfg, &checkpoint),
            })
        }
        Command::CompareBn(flags) => {
            let cfg = resolve_config(&flags)?;
            with_precision(&cfg, |p| match p {
                Dtype::R32 => cmd_compare_bn::<f32>(&cfg),
                Dtype::R64 => cmd_compare_bn::<f64>(&cfg),
            })
        }
        Command::Surface {
            op,
            min,
            max,
            step,
            out,
        } => cmd_surface(&op, min, max, step, out.as_deref()),
        Command::Selftest { seed } => cmd_selftest(seed),
    }
}

fn with_precision(
    cfg: &RunConfig,
    f: impl FnOnce(Dtype) -> Result<ExitCode>,
) -> Result<ExitCode> {
    f(cfg.precision)
}

/// Precedence: flags > config file > defaults. GHN_DATA_DIR backs the data
/// directory when neither a flag nor a config value names one.
fn resolve_config(flags: &RunFlags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => parse_config(&fs::read_to_string(path)?)?,
        None => {
            return Err(GhnError::InvalidArgument(
                "--config is required for this subcommand".into(),
            ))
        }
    };
    if let Some(d) = &flags.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    if cfg.data_dir.is_none() {
        if let Ok(d) = std::env::var("GHN_DATA_DIR") {
            cfg.data_dir = Some(PathBuf::from(d));
        }
    }
    if let Some(d) = &flags.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = flags.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = flags.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = flags.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = flags.steps {
        cfg.train.steps = s;
    }
    if let Some(p) = &flags.precision {
        cfg.precision = match p.as_str() {
            "r32" => Dtype::R32,
            "r64" => Dtype::R64,
            _ => {
                return Err(GhnError::InvalidArgument(format!(
                    "unknown precision `{p}`, expected r32 or r64"
                )))
            }
        };
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.data_dir.as_deref().ok_or_else(|| {
        GhnError::InvalidArgument(
            "no data directory: pass --data-dir, set GHN_DATA_DIR, or add `dir` to [data]".into(),
        )
    })
}

fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dir = data_dir(cfg)?;
    match cfg.dataset {
        DatasetKind::Mnist => {
            let train = load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_mnist_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            Ok((train, test))
        }
        DatasetKind::Cifar10 => {
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect();
            let train = load_cifar10(&batches)?;
            let test = load_cifar10(&[dir.join("test_batch.bin")])?;
            Ok((train, test))
        }
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn cmd_train<F: Real>(cfg: &RunConfig) -> Result<ExitCode> {
    let (ds_train, ds_test) = load_datasets(cfg)?;
    ensure_out_dir(cfg)?;
    let spec = network_spec(cfg)?;
    let mut net = Network::<F>::init(&spec, cfg.train.seed)?;
    let log = train(&mut net, &ds_train, Some(&ds_test), &cfg.train)?;
    fs::write(cfg.out_dir.join("metrics.csv"), log.scalar_csv())?;
    fs::write(cfg.out_dir.join("layer_stats.csv"), log.layer_stats_csv())?;
    let ckpt = Checkpoint::capture(&net, cfg.train.steps, &render(cfg));
    save_checkpoint(&ckpt, &cfg.out_dir.join("final.ckpt"))?;
    let (acc, loss) = evaluate(&mut net, &ds_test, cfg.train.batch_size)?;
    println!("final test accuracy {acc:.4}, mean loss {loss:.4}");
    println!("metrics written to {}", cfg.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval<F: Real>(cfg: &RunConfig, checkpoint: &Path) -> Result<ExitCode> {
    let (_, ds_test) = load_datasets(cfg)?;
    let spec = network_spec(cfg)?;
    let mut net = Network::<F>::init(&spec, cfg.train.seed)?;
    let ckpt = load_checkpoint(checkpoint)?;
    ckpt.apply(&mut net)?;
    let (acc, loss) = evaluate(&mut net, &ds_test, cfg.train.batch_size)?;
    println!("step {}: test accuracy {acc:.4}, mean loss {loss:.4}", ckpt.step);
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare_bn<F: Real>(cfg: &RunConfig) -> Result<ExitCode> {
    if !matches!(cfg.kind, NetworkKind::Ghn) {
        return Err(GhnError::InvalidArgument(
            "compare-bn derives both arms itself; configure kind = ghn".into(),
        ));
    }
    let (ds_train, ds_test) = load_datasets(cfg)?;
    ensure_out_dir(cfg)?;
    let ops = parse_arch(&cfg.arch)?;
    let report = compare_bn_experiment::<F>(
        &ops,
        cfg.dataset.input_shape(),
        &ds_train,
        Some(&ds_test),
        &cfg.train,
    )?;
    fs::write(cfg.out_dir.join("compare_bn.csv"), report.csv())?;
    println!(
        "pearson: mean {:.4}, max {:.4}, min {:.4} (batch stream {:016x})",
        report.corr_mean, report.corr_max, report.corr_min, report.batch_checksum
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_surface(
    op: &str,
    min: f64,
    max: f64,
    step: f64,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let which = SurfaceOp::parse(op).ok_or_else(|| {
        GhnError::InvalidArgument(format!(
            "unknown surface op `{op}`, expected ghd, fuzziness, mu, or dmu_da"
        ))
    })?;
    let samples = surface_sample(which, (min, max), (min, max), step)?;
    let csv = surface_csv(&samples);
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, csv)?;
            println!("{} rows written to {}", samples.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(seed: u64) -> Result<ExitCode> {
    let mut reports = Vec::new();
    reports.extend(algebra_suite(10_000, seed));
    reports.extend(distributivity_suite(1000, seed));
    reports.extend(gradient_suite::<f32>(seed));
    reports.extend(gradient_suite::<f64>(seed));
    reports.extend(kernel_oracle_suite::<f32>(100, seed, 1e-4));
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!("{status}  {}  {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", reports.len(), failed);
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
