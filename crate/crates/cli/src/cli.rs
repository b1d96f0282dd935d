//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use poseguard_classifier::{BackboneScale, Variant};
use poseguard_core::autolabel::BuildOptions;
use poseguard_core::evaluation::Interpolation;
use poseguard_core::transforms::{FarPlacement, DEFAULT_VALUE_SCALE};

use crate::commands::{self, TrainArgs, TransformOp};
use crate::config::Config;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "poseguard",
    version,
    about = "Pose-guided handgun detection experiments"
)]
pub struct Cli {
    /// TOML config file (falls back to $POSEGUARD_CONFIG).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for per-image parallelism.
    #[arg(long, short = 'j', global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// More log output (repeatable).
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RegionArgs {
    /// Minimum elbow and wrist confidence.
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    /// Box centre offset past the wrist, in forearm lengths.
    #[arg(long)]
    pub extension_k: Option<f64>,
    /// Box side in forearm lengths.
    #[arg(long)]
    pub scale_s: Option<f64>,
    /// IoU at which the two hand boxes of a person merge.
    #[arg(long)]
    pub merge_iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Hrc,
    #[value(name = "hrc_p", alias = "hrc-p", alias = "hrcp")]
    HrcP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Full,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OpArg {
    Flip,
    Dark,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlacementArg {
    TopLeft,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpolationArg {
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the hand regions of every image (and debug crops).
    ExtractRegions {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        region: RegionArgs,
        /// Skip writing debug crops.
        #[arg(long)]
        no_crops: bool,
    },
    /// Crop, label and store hand regions for training.
    BuildDataset {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also store the pose half of each region.
        #[arg(long)]
        with_pose: bool,
        /// IoMin with a ground-truth box at which a region is a handgun.
        #[arg(long)]
        iomin_threshold: Option<f64>,
        #[command(flatten)]
        region: RegionArgs,
    },
    /// Train a region classifier on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, value_enum)]
        backbone: Option<BackboneArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Per-epoch loss file (default: next to the checkpoint).
        #[arg(long)]
        loss_trace: Option<PathBuf>,
        /// Start the appearance branch from this checkpoint.
        #[arg(long, value_name = "CKPT")]
        init_appearance: Option<PathBuf>,
        /// Check inputs and print the run header without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Detect handguns in every image of a manifest.
    Detect {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Detections CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-image diagnostics (default: next to the detections file).
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        #[command(flatten)]
        region: RegionArgs,
    },
    /// Score a detections file against the manifest's ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON report to write.
        #[arg(long)]
        out: PathBuf,
        /// PR-curve CSV (default: next to the report).
        #[arg(long)]
        pr_curve: Option<PathBuf>,
        #[arg(long)]
        iomin: Option<f64>,
        #[arg(long)]
        score: Option<f64>,
        #[arg(long, value_enum)]
        interpolation: Option<InterpolationArg>,
    },
    /// Apply the flip, dark or far transform to a whole manifest.
    Transform {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        op: OpArg,
        #[arg(long)]
        out: PathBuf,
        /// HSV value multiplier for `dark`.
        #[arg(long, default_value_t = DEFAULT_VALUE_SCALE)]
        value_scale: f64,
        /// Where `far` places the shrunken content.
        #[arg(long, value_enum, default_value = "top-left")]
        placement: PlacementArg,
    },
}

fn apply_region(cfg: &mut Config, a: &RegionArgs) {
    let r = &mut cfg.region;
    if let Some(v) = a.conf_threshold {
        r.conf_threshold = v;
    }
    if let Some(v) = a.extension_k {
        r.extension_k = v;
    }
    if let Some(v) = a.scale_s {
        r.scale_s = v;
    }
    if let Some(v) = a.merge_iou {
        r.merge_iou = v;
    }
}

/// Folds command-line overrides into the configuration.
fn apply_overrides(cfg: &mut Config, cli: &Cli) {
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    match &cli.command {
        Command::ExtractRegions { region, .. } | Command::Detect { region, .. } => {
            apply_region(cfg, region)
        }
        Command::BuildDataset {
            region,
            iomin_threshold,
            ..
        } => {
            apply_region(cfg, region);
            if let Some(v) = iomin_threshold {
                cfg.label.iomin_threshold = *v;
            }
        }
        Command::Train {
            variant,
            backbone,
            epochs,
            batch_size,
            seed,
            learning_rate,
            ..
        } => {
            if let Some(v) = variant {
                cfg.model.variant = match v {
                    VariantArg::Hrc => Variant::Hrc,
                    VariantArg::HrcP => Variant::HrcP,
                };
            }
            if let Some(b) = backbone {
                cfg.model.backbone_scale = match b {
                    BackboneArg::Full => BackboneScale::Full,
                    BackboneArg::Reduced => BackboneScale::Reduced,
                };
            }
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.seed = seed.unwrap_or(t.seed);
            t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
        }
        Command::Eval {
            iomin,
            score,
            interpolation,
            ..
        } => {
            let e = &mut cfg.eval;
            e.iomin_threshold = iomin.unwrap_or(e.iomin_threshold);
            e.score_threshold = score.unwrap_or(e.score_threshold);
            if let Some(i) = interpolation {
                e.interpolation = match i {
                    InterpolationArg::AllPoint => Interpolation::AllPoint,
                    InterpolationArg::ElevenPoint => Interpolation::ElevenPoint,
                };
            }
        }
        Command::Transform { .. } => {}
    }
}

/// Resolves configuration and runs the selected command. Progress and
/// summaries go to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::resolve(cli.config.as_deref())?;
    apply_overrides(&mut cfg, &cli);
    cfg.validate()?;
    if let Some(n) = cfg.jobs {
        // a pool may already exist when run in-process more than once
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }

    match cli.command {
        Command::ExtractRegions {
            manifest,
            out,
            no_crops,
            ..
        } => {
            let s = commands::extract_regions(&manifest, &out, &cfg.region, !no_crops)?;
            println!(
                "{} regions from {} images written to {}",
                s.regions,
                s.images,
                out.join(commands::REGIONS_FILE).display()
            );
        }
        Command::BuildDataset {
            manifest,
            out,
            with_pose,
            ..
        } => {
            let opts = BuildOptions {
                params: cfg.region,
                style: cfg.render,
                with_pose,
                iomin_threshold: cfg.label.iomin_threshold,
            };
            let m = commands::build_dataset(&manifest, &out, &opts)?;
            println!(
                "{} regions ({} handgun, {} no_handgun) written to {}; {} images failed, {} regions excluded for missing pose",
                m.regions,
                m.handgun,
                m.no_handgun,
                out.display(),
                m.failures.len(),
                m.pose_skipped.len()
            );
        }
        Command::Train {
            dataset,
            out,
            loss_trace,
            init_appearance,
            dry_run,
            ..
        } => {
            let args = TrainArgs {
                dataset,
                out: out.clone(),
                model: cfg.model,
                train: cfg.train.clone(),
                loss_trace,
                init_appearance,
                dry_run,
            };
            let Some(s) = commands::train_model(&args, &mut |h| println!("{h}"))? else {
                return Ok(());
            };
            println!(
                "initial loss {} final loss {} training accuracy {}; checkpoint {}",
                s.initial_loss,
                s.final_loss,
                s.train_accuracy,
                out.display()
            );
        }
        Command::Detect {
            manifest,
            checkpoint,
            out,
            diagnostics,
            ..
        } => {
            let s = commands::detect(
                &manifest,
                &checkpoint,
                &out,
                diagnostics.as_deref(),
                &cfg.region,
                &cfg.render,
            )?;
            println!(
                "{} detections in {} images ({} failed) written to {}",
                s.detections,
                s.images,
                s.failed,
                out.display()
            );
        }
        Command::Eval {
            detections,
            manifest,
            out,
            pr_curve,
            ..
        } => {
            let r = commands::eval(&detections, &manifest, &out, pr_curve.as_deref(), &cfg.eval)?;
            println!(
                "precision@{s}={} recall@{s}={} AP={} (tp={} fp={} fn={})",
                r.precision_05,
                r.recall_05,
                r.ap,
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                s = cfg.eval.score_threshold
            );
        }
        Command::Transform {
            manifest,
            op,
            out,
            value_scale,
            placement,
        } => {
            let op = match op {
                OpArg::Flip => TransformOp::Flip,
                OpArg::Dark => TransformOp::Dark { value_scale },
                OpArg::Far => TransformOp::Far {
                    placement: match placement {
                        PlacementArg::TopLeft => FarPlacement::TopLeft,
                        PlacementArg::Center => FarPlacement::Center,
                    },
                },
            };
            let n = commands::transform(&manifest, op, &out)?;
            println!(
                "{n} images written to {}",
                out.join(commands::TRANSFORMED_MANIFEST).display()
            );
        }
    }
    Ok(())
}
