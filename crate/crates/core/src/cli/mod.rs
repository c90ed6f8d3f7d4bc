//! The `secpnet` command line.
//!
//! Exit codes: 0 on success, 2 for usage errors, 1 for any other failure.

pub mod harness;
pub mod overlay;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{decode_image, decode_mask, generate_phantom, load_dataset, write_dataset, encode_mask, FoldSplit};
use crate::error::{Error, Result};
use crate::metrics::{emit_table, Metric, TableFormat};
use crate::networks::{predict_mask, VariantId};
use crate::training::load_checkpoint;

use harness::{ablate, cross_validate, evaluate, split_for, worker_threads, write_fold_report, RunConfig};
use overlay::{overlay_render, OverlaySpec};

#[derive(Debug, Parser)]
#[command(name = "secpnet", version, about = "Multi-organ segmentation with SE-connection pyramid U-Nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        patients: usize,
        #[arg(long, default_value_t = 4)]
        slices: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated staged training of one variant.
    Train {
        #[arg(long)]
        variant: VariantId,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one test fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        report: PathBuf,
        /// `split.json` written by `train`; overrides --folds/--split-seed.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Must equal the `train.seed` used for training.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// All six variants over all folds, with Dice and Jaccard tables.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Segment one image file into a mask file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render prediction vs. ground truth as a P6 PPM.
    Overlay {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file of the sample.
        #[arg(long)]
        sample: PathBuf,
        /// Ground-truth mask; defaults to the dataset layout's `masks/<id>.mask`.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Paint a single organ instead of all of them.
        #[arg(long)]
        organ: Option<u8>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn default_mask_path(image: &Path) -> Result<PathBuf> {
    let stem = image.file_stem().ok_or_else(|| Error::Usage(format!("no file name in {}", image.display())))?;
    let dir = image.parent().and_then(Path::parent).unwrap_or(Path::new("."));
    Ok(dir.join("masks").join(stem).with_extension("mask"))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { seed, patients, slices, size, out } => {
            let samples = generate_phantom(seed, patients, slices, size)?;
            let manifest = write_dataset(&out, &samples)?;
            log::info!("wrote {} slices to {}", samples.len(), manifest.display());
        }
        Command::Train { variant, data, folds, config, out } => {
            let cfg = run_config(config.as_deref())?;
            let (_, samples) = load_dataset(&data)?;
            let report = cross_validate(variant, &samples, folds, &cfg, &out)?;
            print!("{}", String::from_utf8_lossy(&emit_table(&report, TableFormat::Text)?));
        }
        Command::Eval { checkpoint, data, fold, report, split, folds, split_seed } => {
            let net = load_checkpoint(&checkpoint)?;
            let (_, samples) = load_dataset(&data)?;
            let split: FoldSplit = match split {
                Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
                None => split_for(&samples, folds, split_seed)?,
            };
            let (_, test) = split.partition(&samples, fold)?;
            let r = evaluate(&net, &test, fold)?;
            write_fold_report(&report, &r)?;
            log::info!("fold {fold}: {} slices scored, report at {}", r.slices, report.display());
        }
        Command::Ablate { data, out, folds, config } => {
            let cfg = run_config(config.as_deref())?;
            let (_, samples) = load_dataset(&data)?;
            let outcome = ablate(&samples, folds, &cfg, worker_threads()?)?;
            outcome.write(&out)?;
            print!("{}", String::from_utf8_lossy(&outcome.table(Metric::Dice, TableFormat::Text)?));
            match outcome.secp_not_worse_than_baseline() {
                Some(false) => log::warn!(
                    "SECP-Net training Dice {:.2} is below the baseline's {:.2}",
                    outcome.training_dice(VariantId::SECPNet).unwrap_or(f64::NAN),
                    outcome.training_dice(VariantId::Baseline).unwrap_or(f64::NAN)
                ),
                _ => log::info!("SECP-Net training Dice is not below the baseline's"),
            }
        }
        Command::Predict { checkpoint, image, out } => {
            let net = load_checkpoint(&checkpoint)?;
            let img = decode_image(&std::fs::read(&image)?)?;
            let [_, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
            let pred = predict_mask(&net, &img.reshape([1, 1, h, w])?)?;
            std::fs::write(&out, encode_mask(&pred)?)?;
        }
        Command::Overlay { checkpoint, sample, mask, organ, out } => {
            let net = load_checkpoint(&checkpoint)?;
            let img = decode_image(&std::fs::read(&sample)?)?;
            let mask_path = match mask {
                Some(m) => m,
                None => default_mask_path(&sample)?,
            };
            let gt = decode_mask(&std::fs::read(&mask_path)?)?;
            let [_, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
            let pred = predict_mask(&net, &img.clone().reshape([1, 1, h, w])?)?;
            let rgb = overlay_render(&img, &pred, &gt, &OverlaySpec { organ })?;
            std::fs::write(&out, rgb.to_ppm())?;
        }
    }
    Ok(())
}
