use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use vig_unet_cli::commands;
use vig_unet_cli::RunConfig;

#[derive(Parser)]
#[command(name = "vig-unet", version, about = "Graph-network U-Net for binary image segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (key=value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on `data_dir` and write checkpoints and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report mean IoU and Dice of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score every sample instead of the validation split.
        #[arg(long)]
        all: bool,
    },
    /// Write the predicted mask of one image.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print output shapes and parameter counts per module.
    Info {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic dataset of ellipse masks.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common, out } => {
            let mut cfg = common.load()?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            println!("{}", commands::CSV_HEADER);
            let outcome = commands::cmd_train(&cfg, |row| println!("{}", row.to_csv())).context("training failed")?;
            println!(
                "best val IoU {:.4} at epoch {}; checkpoints in {}",
                outcome.best_iou,
                outcome.best_epoch,
                outcome.output_dir.display()
            );
        }
        Command::Eval { common, checkpoint, all } => {
            let cfg = common.load()?;
            let rep = commands::cmd_eval(&cfg, &checkpoint, all).context("evaluation failed")?;
            println!("samples {}", rep.per_sample.len());
            println!("mean IoU {:.4}", rep.mean_iou);
            println!("mean Dice {:.4}", rep.mean_dice);
        }
        Command::Predict {
            common,
            checkpoint,
            image,
            out,
        } => {
            let cfg = common.load()?;
            let mask = commands::cmd_predict(&cfg, &checkpoint, &image, &out).context("prediction failed")?;
            let fg = mask.pixels().filter(|p| p[0] == 255).count();
            println!("wrote {} ({}x{}, {fg} foreground pixels)", out.display(), mask.width(), mask.height());
        }
        Command::Info { common } => {
            let cfg = common.load()?;
            print!("{}", commands::cmd_info(&cfg.model)?);
        }
        Command::Gen { out, count, size, seed } => {
            commands::cmd_gen(&out, count, size, seed)?;
            println!("wrote {count} pairs of {size}x{size} to {}", out.display());
        }
    }
    Ok(())
}
