//! `voxelseg`: volumetric segmentation pipeline driver.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use thiserror::Error;
use voxelseg::checkpoint::CheckpointError;
use voxelseg::geometry::GeometryError;
use voxelseg::losses::{LossError, LossKind};
use voxelseg::nifti::NiftiError;
use voxelseg::normalize::NormalizeError;
use voxelseg::patching::{PatchError, Window};
use voxelseg::phantom::PhantomError;
use voxelseg::trainer::TrainError;
use voxelseg::vnet::VNetError;
use voxelseg::volume::VolumeError;
use voxelseg::OrientationCode;

use config::{parse_dhw, Overrides, PipelineConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("{0}")]
    Usage(String),
}

const EXIT_CODES: &str = "\
Exit codes:
  0   success
  1   unexpected internal error
  2   usage error (bad flags or arguments)
  3   invalid config
  4   input file not found
  5   other I/O failure
  6   invalid NIfTI input
  7   invalid checkpoint
  8   volume, geometry or normalisation error
  9   patch sampling or tiling error
  10  model error (e.g. extents not divisible by the network)
  11  training error (e.g. non-finite loss)
  12  metric error (mismatched or non-binary masks)
  13  phantom generation error

Environment:
  VOXELSEG_THREADS  cap on tile-level worker threads for predict and train";

#[derive(Debug, Parser)]
#[command(name = "voxelseg", version, about = "Patch-based 3D segmentation with a VNet", after_help = EXIT_CODES)]
struct Cli {
    /// JSON pipeline config; flags override its values.
    #[arg(
        long,
        global = true,
        value_name = "PATH",
        help_heading = "Global options"
    )]
    config: Option<PathBuf>,
    /// Seed for phantoms, patch sampling and training.
    #[arg(
        long,
        global = true,
        value_name = "U64",
        help_heading = "Global options"
    )]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(
        long,
        global = true,
        value_name = "PATH",
        help_heading = "Global options"
    )]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct PatchFlags {
    /// Patch extent as d,h,w (slowest axis first).
    #[arg(long, value_name = "D,H,W", value_parser = parse_dhw)]
    patch_size: Option<[usize; 3]>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print extents, spacing, orientation and datatype of a NIfTI file.
    Info {
        /// NIfTI-1 file (.nii).
        input: PathBuf,
    },
    /// Generate seeded phantom image/mask pairs into the --out directory.
    Phantom {
        /// Number of phantoms; seeds run upward from the configured seed.
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Permute and flip axes to a canonical orientation.
    Reorient {
        /// NIfTI-1 file to reorient.
        input: PathBuf,
        /// Target orientation code.
        #[arg(long, value_name = "CODE", default_value = "RAS")]
        target: OrientationCode,
    },
    /// Normalise intensities per the config, or binarise a label.
    Normalize {
        /// NIfTI-1 image or label.
        input: PathBuf,
        /// Treat the input as a label and binarise it (> 0 becomes 1).
        #[arg(long)]
        label: bool,
    },
    /// Draw class-balanced training patches with a JSON manifest.
    SamplePatches {
        /// Source image.
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Binary label matching the image.
        #[arg(long, value_name = "PATH")]
        label: PathBuf,
        /// Number of patches to draw.
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[command(flatten)]
        patch: PatchFlags,
    },
    /// Train a VNet and write a checkpoint plus a metric log.
    Train {
        /// Training image (repeatable; defaults to io.train_images).
        #[arg(long = "image", value_name = "PATH")]
        images: Vec<PathBuf>,
        /// Training label, paired with --image in order.
        #[arg(long = "label", value_name = "PATH")]
        labels: Vec<PathBuf>,
        /// Held-out image for periodic Dice evaluation (repeatable).
        #[arg(long = "held-out-image", value_name = "PATH")]
        held_out_images: Vec<PathBuf>,
        /// Held-out label, paired with --held-out-image in order.
        #[arg(long = "held-out-label", value_name = "PATH")]
        held_out_labels: Vec<PathBuf>,
        /// Metric log path; defaults to the checkpoint path with .log.
        #[arg(long, value_name = "PATH")]
        log: Option<PathBuf>,
        /// Training loss.
        #[arg(long, value_name = "jaccard|dice|tversky")]
        loss: Option<LossKind>,
        /// Tversky alpha; beta is 1 - alpha.
        #[arg(long, value_name = "F64")]
        alpha: Option<f64>,
        #[command(flatten)]
        patch: PatchFlags,
    },
    /// Tiled prediction: probability volume plus a 0.5-thresholded mask.
    Predict {
        /// Normalised NIfTI-1 image.
        input: PathBuf,
        /// Model checkpoint written by train.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Mask path; defaults to <out stem>_mask.nii.
        #[arg(long, value_name = "PATH")]
        mask_out: Option<PathBuf>,
        #[command(flatten)]
        patch: PatchFlags,
        /// Tile overlap as d,h,w; defaults to half the patch.
        #[arg(long, value_name = "D,H,W", value_parser = parse_dhw)]
        overlap: Option<[usize; 3]>,
        /// Blending window for overlapping tiles.
        #[arg(long, value_name = "uniform|hann")]
        window: Option<Window>,
    },
    /// Print Jaccard, Dice and Tversky between two binary masks.
    Evaluate {
        /// Predicted binary mask.
        prediction: PathBuf,
        /// Reference binary mask.
        truth: PathBuf,
        /// Tversky alpha; beta is 1 - alpha.
        #[arg(long, value_name = "F64")]
        alpha: Option<f64>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let code = if let Some(e) = cause.downcast_ref::<CliError>() {
            match e {
                CliError::Usage(_) => 2,
                CliError::ConfigInvalid(_) => 3,
                CliError::FileNotFound(_) => 4,
            }
        } else if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                4
            } else {
                5
            }
        } else if cause.is::<NiftiError>() {
            6
        } else if cause.is::<CheckpointError>() {
            7
        } else if cause.is::<VolumeError>()
            || cause.is::<GeometryError>()
            || cause.is::<NormalizeError>()
        {
            8
        } else if cause.is::<PatchError>() {
            9
        } else if cause.is::<VNetError>() {
            10
        } else if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::Patch(_) => 9,
                TrainError::Model(_) | TrainError::Tensor(_) => 10,
                TrainError::Loss(_) => 12,
                TrainError::Volume(_) => 8,
                _ => 11,
            }
        } else if cause.is::<LossError>() {
            12
        } else if cause.is::<PhantomError>() {
            13
        } else {
            continue;
        };
        return code;
    }
    1
}

fn require_out(out: Option<&Path>) -> anyhow::Result<&Path> {
    out.ok_or_else(|| CliError::Usage("this command needs --out".into()).into())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = Overrides {
        seed: cli.seed,
        ..Overrides::default()
    };
    match &cli.command {
        Command::SamplePatches { patch, .. } => overrides.patch_size = patch.patch_size,
        Command::Train {
            loss, alpha, patch, ..
        } => {
            overrides.patch_size = patch.patch_size;
            overrides.loss = *loss;
            overrides.alpha = *alpha;
        }
        Command::Predict {
            patch,
            overlap,
            window,
            ..
        } => {
            overrides.patch_size = patch.patch_size;
            overrides.overlap = *overlap;
            overrides.window = *window;
        }
        Command::Evaluate { alpha, .. } => overrides.alpha = *alpha,
        _ => {}
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cli.out.as_deref();

    match cli.command {
        Command::Info { input } => commands::info(&input),
        Command::Phantom { count } => commands::phantom(&cfg, require_out(out)?, count),
        Command::Reorient { input, target } => {
            commands::reorient_cmd(&input, require_out(out)?, target)
        }
        Command::Normalize { input, label } => {
            commands::normalize(&cfg, &input, require_out(out)?, label)
        }
        Command::SamplePatches {
            image,
            label,
            count,
            ..
        } => commands::sample_patches(&cfg, &image, &label, count, require_out(out)?),
        Command::Train {
            images,
            labels,
            held_out_images,
            held_out_labels,
            log,
            ..
        } => commands::train_cmd(
            &cfg,
            commands::TrainInputs {
                images,
                labels,
                held_out_images,
                held_out_labels,
                log,
            },
            require_out(out)?,
        ),
        Command::Predict {
            input,
            checkpoint,
            mask_out,
            ..
        } => commands::predict(&cfg, &input, &checkpoint, require_out(out)?, mask_out),
        Command::Evaluate {
            prediction, truth, ..
        } => commands::evaluate(&cfg, &prediction, &truth),
    }
}

fn main() -> ExitCode {
    let command = Cli::command().mut_subcommands(|sub| sub.after_help(EXIT_CODES));
    let cli = Cli::from_arg_matches(&command.get_matches()).unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
