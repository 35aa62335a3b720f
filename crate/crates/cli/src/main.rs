use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tmunet::bench::{self, TimingRecord};
use tmunet::experiment::{self, FINAL_CHECKPOINT};
use tmunet::flops::estimate_flops;
use tmunet::gradcheck::suite::{self, Scope};
use tmunet::io::config::RunConfig;
use tmunet::model::{ModelConfig, Preset, TmUnet};
use tmunet::nn::ParamStore;

#[derive(Parser, Debug)]
#[command(
    name = "tmunet",
    version,
    about = "Train, evaluate and benchmark token-memory U-Net segmentation models"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each one overrides the matching key of
/// the config file.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Channel preset: tiny, small, medium or large.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Image side length in pixels.
    #[arg(long, global = true, value_name = "N")]
    size: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Extra `key=value` assignment, applied after the file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on synthetic shapes or a directory of image/mask pairs.
    Train,
    /// Score a checkpoint on the held-out split.
    Eval {
        /// Defaults to OUT/model.ckpt.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Time the memory cell in chunkwise and recurrent mode.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [1024, 2048, 4096])]
        lens: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [16, 64])]
        chunks: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Compare analytic gradients with central differences at 64-bit.
    Gradcheck {
        /// primitives, cell, xlstm, mstm, model or all.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Forward-pass FLOPs and parameter count of a preset.
    Flops,
}

impl Common {
    /// Defaults, then the file, then `--set` pairs, then dedicated flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        for pair in &self.set {
            let Some((k, v)) = pair.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{pair}`");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("model.preset", self.preset.clone()),
            ("data.size", self.size.map(|v| v.to_string())),
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            (
                "paths.out",
                self.out.as_ref().map(|p| p.display().to_string()),
            ),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_train(cfg: &RunConfig) -> Result<()> {
    let out = experiment::train_run(cfg, |r| {
        eprintln!(
            "epoch {:>4}  lr {:.3e}  loss {:.6}  {} ms",
            r.epoch, r.lr, r.mean_loss, r.wall_ms
        )
    })?;
    let last = out
        .checkpoints
        .last()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    println!(
        "trained {} epochs; final checkpoint {last}",
        out.log.records.len()
    );
    Ok(())
}

fn run_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let default = cfg.out.join(FINAL_CHECKPOINT);
    let path = checkpoint.unwrap_or(&default);
    let report = experiment::eval_run(cfg, path)
        .with_context(|| format!("evaluating {}", path.display()))?;
    let hd = report
        .mean_hd()
        .map(|d| format!("{d:.3}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "images {}  dice {:.2}  iou {:.2}  f1 {:.2}  hd {hd} (undefined for {})",
        report.images.len(),
        100.0 * report.mean_dice(),
        100.0 * report.mean_iou(),
        100.0 * report.mean_f1(),
        report.hd_missing()
    );
    Ok(())
}

fn run_bench(
    cfg: &RunConfig,
    lens: &[usize],
    chunks: &[usize],
    head_dim: usize,
    reps: usize,
) -> Result<()> {
    if lens.is_empty() || chunks.is_empty() || head_dim == 0 {
        bail!("bench needs at least one length, one chunk size and a positive head dimension");
    }
    let records = bench::sweep(lens, chunks, head_dim, reps, cfg.train.seed)?;
    let mut csv = format!("{}\n", TimingRecord::HEADER);
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("timing.csv");
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Returns whether every case passed.
fn run_gradcheck(scope: &str, seed: Option<u64>) -> Result<bool> {
    let scope: Scope = scope.parse()?;
    let cases = suite::run(scope, seed.unwrap_or(suite::DEFAULT_SEED))?;
    for c in &cases {
        println!("{c}");
    }
    let worst = |composite: bool| {
        cases
            .iter()
            .filter(|c| (c.tolerance > suite::PRIMITIVE_TOLERANCE) == composite)
            .map(|c| c.max_rel_error)
            .fold(None, |a: Option<f64>, e| Some(a.map_or(e, |a| a.max(e))))
    };
    let fmt = |v: Option<f64>| v.map(|e| format!("{e:.3e}")).unwrap_or_else(|| "-".into());
    let failed = cases.iter().filter(|c| !c.passed()).count();
    println!(
        "{} cases, {failed} failed; max rel error primitives {} composites {}",
        cases.len(),
        fmt(worst(false)),
        fmt(worst(true))
    );
    Ok(failed == 0)
}

fn gflops(cfg: &ModelConfig, size: usize) -> Result<f64> {
    Ok(estimate_flops(cfg, size, size)? as f64 / 1e9)
}

fn run_flops(cfg: &RunConfig, size: usize) -> Result<()> {
    let mut store = ParamStore::<f32>::new();
    TmUnet::new(
        &mut store,
        &cfg.model,
        &mut tmunet::train::seeded_rng(0, tmunet::train::stream::INIT),
    )?;
    let params = store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.value.numel())
        .sum::<usize>();
    let g = gflops(&cfg.model, size)?;
    let mut medium = cfg.model.clone();
    medium.channels.channels = ModelConfig::preset(Preset::Medium).channels.channels;
    let gm = gflops(&medium, size)?;
    let ch: Vec<String> = cfg
        .model
        .channels
        .channels
        .iter()
        .map(|c| c.to_string())
        .collect();
    println!("channels {}  input {size}x{size}", ch.join(","));
    println!("params {:.3} M", params as f64 / 1e6);
    println!("flops {g:.3} G");
    println!("ratio vs medium {:.3}", g / gm);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let cfg = cli.common.resolve()?;
    match &cli.command {
        Command::Train => run_train(&cfg)?,
        Command::Eval { checkpoint } => run_eval(&cfg, checkpoint.as_deref())?,
        Command::Bench {
            lens,
            chunks,
            head_dim,
            reps,
        } => run_bench(&cfg, lens, chunks, *head_dim, *reps)?,
        Command::Gradcheck { scope } => return run_gradcheck(scope, cli.common.seed),
        Command::Flops => run_flops(&cfg, cli.common.size.unwrap_or(512))?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("tmunet: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
