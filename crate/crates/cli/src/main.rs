use std::path::PathBuf;

use anyhow::{Context, Result};
use cadnet_cli::ablate::{ablate, format_table};
use cadnet_cli::eval::{eval, task_name};
use cadnet_cli::infer::{infer, DETECTION_DIR};
use cadnet_cli::train::{train, MODEL_FILE};
use cadnet_cli::{plot, tile, ExperimentConfig};
use cadnet_core::evaluation::format_report;
use cadnet_core::geometry::BoxKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cadnet", version, about = "Context-aware rotated object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Obb,
    Hbb,
    Both,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Cut training images into patches and write a manifest.
    Tile(Common),
    /// Train a model and log per-iteration losses.
    Train(Common),
    /// Detect objects in the test images.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score detection files against the test ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/detections`.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        task: Task,
    },
    /// Train and score all eight switch combinations.
    Ablate(Common),
    /// Render detection overlays and attention maps.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.synthetic.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Tile(c) => {
            let cfg = load(&c)?;
            let records = tile::tile(&cfg)?;
            println!("wrote {} patches to {}", records.len(), cfg.out.join(tile::PATCH_DIR).display());
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let r = train(&cfg)?;
            if let Some(last) = r.log.last() {
                println!("iteration {} total loss {:.4}", last.iteration, last.total);
            }
            println!("checkpoint {}", r.checkpoint.display());
        }
        Command::Infer { common, checkpoint } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join(MODEL_FILE));
            let out = infer(&cfg, &ckpt).context("inference failed")?;
            let n: usize = out.obb.values().map(Vec::len).sum();
            println!("{n} oriented detections in {}", out.dir.display());
        }
        Command::Eval { common, detections, task } => {
            let cfg = load(&common)?;
            let dir = detections.unwrap_or_else(|| cfg.out.join(DETECTION_DIR));
            let kinds: &[BoxKind] = match task {
                Task::Obb => &[BoxKind::Oriented],
                Task::Hbb => &[BoxKind::Horizontal],
                Task::Both => &[BoxKind::Oriented, BoxKind::Horizontal],
            };
            for &kind in kinds {
                let r = eval(&cfg, &dir, kind)?;
                println!("[{}]\n{}", task_name(kind), format_report(&r));
            }
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            print!("{}", format_table(&ablate(&cfg)?));
        }
        Command::Plot { common, checkpoint } => {
            let cfg = load(&common)?;
            let paths = plot::plot(&cfg, checkpoint.as_deref())?;
            println!("wrote {} figures", paths.len());
        }
    }
    Ok(())
}
