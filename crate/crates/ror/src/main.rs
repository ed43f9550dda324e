//! Command-line entry point chaining the full workflow:
//! `generate → train → eval → remove`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ror::dataforge::{generate_dataset, Split};
use ror::runner::{
    evaluate, load_gen_config, load_train_config, remove, train, Checkpoint,
};

#[derive(Parser)]
#[command(
    name = "ror",
    about = "Referring object removal: synthesize data, train, evaluate, remove."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a referring-removal dataset.
    Generate {
        /// Generation config (TOML); all keys optional.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a generated dataset.
    Train {
        /// Training config (TOML); may name a `profile`.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (from `generate`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one dataset split.
    Eval {
        /// Checkpoint file (from `train`).
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Split to score: train, val, or test.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Report JSON path; a sibling .csv is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Remove whatever an expression designates from one image.
    Remove {
        /// Checkpoint file (from `train`).
        #[arg(long)]
        ckpt: PathBuf,
        /// Input PNG at the checkpoint's resolution.
        #[arg(long)]
        image: PathBuf,
        /// Referring expression, e.g. "remove the red disc".
        #[arg(long)]
        expr: String,
        /// Output directory for mask.png and output.png.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> ror::Result<()> {
    match Cli::parse().command {
        Command::Generate { config, out, seed } => {
            let mut cfg = load_gen_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let manifest = generate_dataset(&cfg, &out)?;
            println!(
                "generated {} pairs (train {}, val {}, test {}; small {}, medium {}, large {}) in {}",
                manifest.pairs.len(),
                manifest.train,
                manifest.val,
                manifest.test,
                manifest.small,
                manifest.medium,
                manifest.large,
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = load_train_config(&config)?;
            let outcome = train(&cfg, &data, &out)?;
            let tail = if outcome.early_stopped {
                " (early stop)"
            } else {
                ""
            };
            println!(
                "trained {} steps{tail}; checkpoint {}, log {}",
                outcome.steps_run,
                outcome.checkpoint.display(),
                outcome.log.display()
            );
            if let Some(loss) = outcome.final_loss {
                println!(
                    "final loss: total {:.4} (seg {:.4}, rec {:.4}, adv {:.4})",
                    loss.total, loss.seg, loss.rec, loss.adv
                );
            }
        }
        Command::Eval {
            ckpt,
            data,
            split,
            report,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let outcome = evaluate(&ckpt, &data, split, &report)?;
            let r = &outcome.report;
            println!(
                "{} expressions: IoU {:.4}, PSNR full {:.2} dB, hole {:.2} dB, SSIM {:.4}",
                outcome.rows.len(),
                r.iou,
                r.psnr_full,
                r.psnr_hole,
                r.ssim
            );
            println!(
                "fid_proxy {:.4} (proxy — not Inception-FID), params {}, FLOPs {}, {:.2} FPS",
                r.fid_proxy, r.param_count, r.flops_estimate, r.fps
            );
            println!(
                "report {}, rows {}",
                outcome.report_path.display(),
                outcome.csv_path.display()
            );
        }
        Command::Remove {
            ckpt,
            image,
            expr,
            out,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let outcome = remove(&ckpt, &image, &expr, &out)?;
            println!(
                "mask {}, output {}",
                outcome.mask_png.display(),
                outcome.output_png.display()
            );
            if outcome.low_confidence {
                println!(
                    "low confidence: best mask probability {:.3} is below the threshold — \
                     the expression may not match anything in this image",
                    outcome.max_prob
                );
            }
            if outcome.used_fallback {
                println!("note: filling used the learned fallback patch on some scale");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
