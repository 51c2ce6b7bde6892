//! `hexres` command-line entry point.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hexres::bench::{run_bench, BenchConfig};
use hexres::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hexres::cifar::{load_batches, synthetic_dataset, CifarDataset, SplitSpec};
use hexres::gradcheck::{layer_suite, model_check};
use hexres::hexconv::verify_sweep;
use hexres::resnet::{build_network, count_parameters, published_param_counts, ArchConfig, ShortcutMode};
use hexres::train::{evaluate, train, TrainConfig, TrainData, TrainState};
use hexres::Rng;

const SWEEP_TOLERANCE: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "hexres", version, about = "Hexagonal-convolution residual networks on CIFAR-10")]
struct Cli {
    /// Worker threads for the convolution kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network, writing metrics and a checkpoint every epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation or test split.
    Eval(EvalArgs),
    /// Compare the fast hex convolution against the reference gather.
    VerifyHexconv {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Finite-difference gradient checks for every layer and a small network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Network depth for the full-model check (6n+2).
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, value_enum, default_value_t = Shortcut::HexProjection)]
        shortcut: Shortcut,
        /// Probed elements per parameter tensor.
        #[arg(long, default_value_t = 3)]
        probes: usize,
    },
    /// Print the number of trainable parameters.
    CountParams {
        #[arg(long, default_value_t = 20)]
        depth: usize,
        #[arg(long, value_enum, default_value_t = Shortcut::HexProjection)]
        shortcut: Shortcut,
    },
    /// Time the hex fast path against a square 3×3 convolution.
    Bench {
        #[arg(long, default_value_t = 16)]
        in_channels: usize,
        #[arg(long, default_value_t = 32)]
        out_channels: usize,
        #[arg(long, default_value_t = 32)]
        spatial: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Shortcut {
    #[value(name = "identity_pad")]
    IdentityPad,
    #[value(name = "projection_1x1")]
    Projection1x1,
    #[value(name = "hex_projection")]
    HexProjection,
}

impl From<Shortcut> for ShortcutMode {
    fn from(s: Shortcut) -> Self {
        match s {
            Shortcut::IdentityPad => ShortcutMode::IdentityPad,
            Shortcut::Projection1x1 => ShortcutMode::Projection1x1,
            Shortcut::HexProjection => ShortcutMode::HexProjection,
        }
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long, env = "CIFAR10_DIR")]
    data_dir: Option<PathBuf>,
    /// Use the generated class-patterned stand-in dataset.
    #[arg(long, conflicts_with = "data_dir")]
    synthetic: bool,
    #[arg(long, default_value_t = 0)]
    synthetic_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<CifarDataset> {
        match (&self.data_dir, self.synthetic) {
            (Some(dir), false) => load_batches(dir).with_context(|| format!("loading CIFAR-10 from {}", dir.display())),
            (None, true) => Ok(synthetic_dataset(50_000, 10_000, self.synthetic_seed)),
            _ => bail!("no dataset: pass --data-dir, set CIFAR10_DIR, or pass --synthetic"),
        }
    }

    fn describe(&self) -> String {
        match &self.data_dir {
            Some(dir) if !self.synthetic => format!("cifar10 at {}", dir.display()),
            _ => format!("synthetic (seed {})", self.synthetic_seed),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 20)]
    depth: usize,
    #[arg(long, value_enum, default_value_t = Shortcut::HexProjection)]
    shortcut: Shortcut,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 182)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-3)]
    weight_decay: f64,
    /// Iterations at which the learning rate is divided by 10.
    #[arg(long, value_delimiter = ',', default_value = "32000,48000,64000")]
    lr_drops: Vec<u64>,
    /// Exempt batch-norm scale and shift from weight decay.
    #[arg(long)]
    no_decay_norm: bool,
    /// Train on only the first N images of the training split.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Validate on only the first N images of the validation split.
    #[arg(long)]
    val_limit: Option<usize>,
    /// Receives metrics.jsonl and checkpoint.bin.
    #[arg(long, default_value = "runs/hexres")]
    out_dir: PathBuf,
    /// Continue from a checkpoint; architecture and schedule come from it,
    /// except --epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Validation,
    Test,
}

fn echo(lines: &[(&str, String)]) {
    for (k, v) in lines {
        eprintln!("config {k}: {v}");
    }
}

fn write_checkpoint(dir: &Path, state: &TrainState) -> hexres::Result<()> {
    let tmp = dir.join("checkpoint.bin.tmp");
    let path = dir.join("checkpoint.bin");
    save_checkpoint(&tmp, &Checkpoint::capture(state))?;
    fs::rename(&tmp, &path).map_err(|source| hexres::Error::Io { path, source })
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut state = match &args.resume {
        Some(path) => {
            let mut s = load_checkpoint(path)?.restore()?;
            s.cfg.epochs = args.epochs;
            s
        }
        None => {
            let arch = ArchConfig::new(args.depth, args.shortcut.into())?;
            let cfg = TrainConfig {
                epochs: args.epochs,
                batch_size: args.batch_size,
                lr: args.lr,
                momentum: args.momentum,
                weight_decay: args.weight_decay,
                lr_drops: args.lr_drops.clone(),
                seed: args.seed,
                decay_norm: !args.no_decay_norm,
                train_limit: args.train_limit,
                val_limit: args.val_limit,
            };
            TrainState::new(arch, cfg)?
        }
    };
    echo(&[
        ("data", args.data.describe()),
        ("arch", serde_json::to_string(&state.arch)?),
        ("train", serde_json::to_string(&state.cfg)?),
        ("out_dir", args.out_dir.display().to_string()),
        ("resume", format!("{:?}", args.resume)),
        ("start_epoch", state.epoch.to_string()),
    ]);
    let dataset = args.data.load()?;
    let data = TrainData::prepare(&dataset, &SplitSpec::new(state.cfg.seed), &state.cfg)?;
    drop(dataset);
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let metrics_path = args.out_dir.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    train(&mut state, &data, |rec, st| {
        let line = rec.to_json_line();
        println!("{line}");
        writeln!(metrics, "{line}").map_err(|e| hexres::Error::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
        write_checkpoint(&args.out_dir, st)
    })?;
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    echo(&[
        ("checkpoint", args.checkpoint.display().to_string()),
        ("data", args.data.describe()),
        ("split", format!("{:?}", args.split).to_lowercase()),
        ("batch_size", args.batch_size.to_string()),
        ("arch", serde_json::to_string(&ckpt.arch)?),
    ]);
    let mut state = ckpt.restore()?;
    let dataset = args.data.load()?;
    let split = SplitSpec::new(state.cfg.seed);
    let cfg = TrainConfig {
        train_limit: None,
        val_limit: None,
        ..state.cfg.clone()
    };
    let data = TrainData::prepare(&dataset, &split, &cfg)?;
    let records = match args.split {
        Split::Validation => &data.validation,
        Split::Test => &dataset.test,
    };
    let ev = evaluate(&mut state.model, records, &data.stats, args.batch_size)?;
    println!(
        "{}",
        serde_json::json!({
            "images": records.len(),
            "loss": ev.loss,
            "top1": ev.top1,
            "top5": ev.top5,
        })
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Train(args) => run_train(&args)?,
        Command::Eval(args) => run_eval(&args)?,
        Command::VerifyHexconv { cases, seed } => {
            echo(&[("cases", cases.to_string()), ("seed", seed.to_string())]);
            let report = verify_sweep(cases, seed)?;
            println!("cases: {}", report.cases);
            println!("max abs deviation: {:e}", report.max_abs_dev);
            println!("worst input shape: {:?}", report.worst_shape);
            let ok = report.max_abs_dev < SWEEP_TOLERANCE;
            println!("{} (tolerance {SWEEP_TOLERANCE:e})", if ok { "PASS" } else { "FAIL" });
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Gradcheck {
            seed,
            depth,
            shortcut,
            probes,
        } => {
            let mode: ShortcutMode = shortcut.into();
            echo(&[
                ("seed", seed.to_string()),
                ("depth", depth.to_string()),
                ("shortcut", mode.to_string()),
                ("probes", probes.to_string()),
            ]);
            let mut results = layer_suite(seed)?;
            results.extend(
                model_check(depth, mode, seed, probes)?
                    .into_iter()
                    .map(|r| hexres::gradcheck::CheckResult {
                        name: format!("model {}", r.name),
                        ..r
                    }),
            );
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok  " } else { "FAIL" };
                failed += usize::from(!r.passed());
                let skipped = if r.skipped > 0 { format!(" ({} kink probes skipped)", r.skipped) } else { String::new() };
                println!("{status} {:<48} rel error {:.3e} < {:.0e}{skipped}", r.name, r.rel_error, r.tolerance);
            }
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::CountParams { depth, shortcut } => {
            let mode: ShortcutMode = shortcut.into();
            echo(&[("depth", depth.to_string()), ("shortcut", mode.to_string())]);
            let arch = ArchConfig::new(depth, mode)?;
            let net = build_network::<f32>(&arch, &mut Rng::new(0))?;
            println!("{}", count_parameters(&net));
            if let Some((baseline, hex)) = published_param_counts(depth) {
                eprintln!("published: baseline (1x1 projection) {baseline}, hex {hex}");
            }
        }
        Command::Bench {
            in_channels,
            out_channels,
            spatial,
            batch,
            repeats,
            seed,
        } => {
            let cfg = BenchConfig {
                in_channels,
                out_channels,
                spatial,
                batch,
                repeats,
                seed,
            };
            echo(&[("bench", format!("{cfg:?}"))]);
            print!("{}", run_bench(&cfg)?.render());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
