//! Subcommand implementations. Each command reads and validates all of its
//! inputs before it writes anything.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use poseguard_classifier::checkpoint::{load_checkpoint, save_checkpoint};
use poseguard_classifier::{train, Model, ModelConfig, TrainConfig};
use poseguard_core::autolabel::{
    build_region_dataset, crop_and_resize, load_rgb, read_region_dataset, write_region_dataset,
    BuildOptions, DatasetMetadata, METADATA_FILE,
};
use poseguard_core::evaluation::{emit_pr_curve, evaluate, EvalConfig, EvalReport, ImageEval};
use poseguard_core::hand_region::{image_regions, HandRegion, RegionParams};
use poseguard_core::keypoints::{
    load_manifest, manifest_to_string, DatasetManifest, KeypointFile, ManifestEntry,
};
use poseguard_core::pose_render::RenderStyle;
use poseguard_core::transforms::{darken, far_transform, hflip, FarPlacement, Sample};
use poseguard_core::GroundTruthBox;
use rayon::prelude::*;

use crate::error::CliError;
use crate::pipeline::{
    default_diagnostics_path, detect_batch, detections_csv, diagnostics_jsonl, read_detections,
    write_file,
};

pub const REGIONS_FILE: &str = "regions.csv";
pub const TRANSFORMED_MANIFEST: &str = "manifest.jsonl";

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::output(path, e))
}

fn save_png(image: &RgbImage, path: &Path) -> Result<(), CliError> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::output(path, e))
}

fn load_entry(
    entry: &ManifestEntry,
) -> Result<(RgbImage, Vec<poseguard_core::Skeleton>), CliError> {
    let skeletons = entry.load_skeletons()?;
    let image = load_rgb(&entry.image)?;
    Ok((image, skeletons))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractSummary {
    pub images: usize,
    pub regions: usize,
}

/// Writes `regions.csv` (one row per clipped hand region) and, with
/// `with_crops`, a 256x256 debug crop per region under `crops/`.
pub fn extract_regions(
    manifest_path: &Path,
    out_dir: &Path,
    params: &RegionParams,
    with_crops: bool,
) -> Result<ExtractSummary, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let per_image: Vec<(String, Vec<HandRegion>, Vec<RgbImage>)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let (image, skeletons) = load_entry(e)?;
            let (w, h) = image.dimensions();
            let regions = image_regions(&skeletons, params, w, h);
            let crops = if with_crops {
                regions
                    .iter()
                    .map(|r| crop_and_resize(&image, &r.bbox))
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                Vec::new()
            };
            Ok((e.image_id.clone(), regions, crops))
        })
        .collect::<Result<_, CliError>>()?;

    create_dir(out_dir)?;
    if with_crops {
        create_dir(&out_dir.join("crops"))?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "image_id",
        "person_id",
        "side",
        "x_min",
        "y_min",
        "x_max",
        "y_max",
        "anchor_x",
        "anchor_y",
        "anchor_confidence",
        "crop",
    ])
    .expect("in-memory write");
    let mut n = 0;
    for (image_id, regions, crops) in &per_image {
        for (i, r) in regions.iter().enumerate() {
            let crop_path = if with_crops {
                let rel = format!("crops/{n:06}.png");
                save_png(&crops[i], &out_dir.join(&rel))?;
                rel
            } else {
                String::new()
            };
            let b = r.bbox;
            w.write_record([
                image_id.clone(),
                r.person_id.to_string(),
                r.side.as_str().to_string(),
                b.x_min().to_string(),
                b.y_min().to_string(),
                b.x_max().to_string(),
                b.y_max().to_string(),
                r.anchor_wrist.x.to_string(),
                r.anchor_wrist.y.to_string(),
                r.anchor_wrist.confidence.to_string(),
                crop_path,
            ])
            .expect("in-memory write");
            n += 1;
        }
    }
    let index = out_dir.join(REGIONS_FILE);
    write_file(&index, &w.into_inner().expect("in-memory flush"))?;
    Ok(ExtractSummary {
        images: per_image.len(),
        regions: n,
    })
}

/// Builds and writes the labelled region dataset. Entries that fail to load
/// are reported and skipped.
pub fn build_dataset(
    manifest_path: &Path,
    out_dir: &Path,
    opts: &BuildOptions,
) -> Result<DatasetMetadata, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let ds = build_region_dataset(&manifest, opts);
    for f in &ds.failures {
        log::warn!("{}: skipped: {}", f.image_id, f.message);
    }
    write_region_dataset(&ds, out_dir).map_err(|e| CliError::output(out_dir, e))?;
    Ok(ds.metadata())
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss_trace: Option<PathBuf>,
    pub init_appearance: Option<PathBuf>,
    /// Validate inputs and report the run header without training.
    pub dry_run: bool,
}

/// `model.ckpt` → `model.losses.csv`.
pub fn default_loss_trace_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("losses.csv")
}

/// One-line description of a training run.
pub fn run_header(model: &ModelConfig, cfg: &TrainConfig, items: usize) -> String {
    format!(
        "variant={} backbone={} batch_size={} epochs={} learning_rate={} seed={} items={items}",
        model.variant,
        model.backbone_scale,
        cfg.batch_size,
        cfg.epochs,
        cfg.learning_rate,
        cfg.seed
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub header: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

pub fn loss_trace_csv(initial: f64, epochs: &[f64]) -> String {
    let mut s = format!("epoch,loss\n0,{initial}\n");
    for (i, l) in epochs.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

/// Trains a model on a dataset directory written by [`build_dataset`].
/// `on_start` receives the run header before the first epoch. Returns `None`
/// for a dry run.
pub fn train_model(
    args: &TrainArgs,
    on_start: &mut dyn FnMut(&str),
) -> Result<Option<TrainSummary>, CliError> {
    args.train.validate()?;
    let meta_path = args.dataset.join(METADATA_FILE);
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", meta_path.display())))?;
    let meta: DatasetMetadata = serde_json::from_str(&meta_text)
        .map_err(|e| CliError::Data(format!("{}: {e}", meta_path.display())))?;
    if args.model.variant.uses_pose() && !meta.with_pose {
        return Err(CliError::Data(format!(
            "{} needs pose halves but {} was built without --with-pose",
            args.model.variant,
            args.dataset.display()
        )));
    }
    let regions = read_region_dataset(&args.dataset)?;
    if regions.is_empty() {
        return Err(CliError::Data(format!(
            "{} contains no regions",
            args.dataset.display()
        )));
    }
    let mut model = Model::new(args.model, args.train.seed);
    if let Some(path) = &args.init_appearance {
        let donor = load_checkpoint(path, None)?;
        model.load_appearance_from(&donor.model)?;
    }
    let header = run_header(&args.model, &args.train, regions.len());
    on_start(&header);
    if args.dry_run {
        return Ok(None);
    }
    let ckpt = train(model, &regions, &args.train)?;
    let meta = ckpt.meta.clone().expect("training records metadata");
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_checkpoint(&ckpt, &args.out).map_err(|e| CliError::output(&args.out, e))?;
    let trace = args
        .loss_trace
        .clone()
        .unwrap_or_else(|| default_loss_trace_path(&args.out));
    write_file(
        &trace,
        loss_trace_csv(meta.initial_loss, &meta.epoch_losses).as_bytes(),
    )?;
    Ok(Some(TrainSummary {
        header,
        initial_loss: meta.initial_loss,
        final_loss: meta.final_loss,
        train_accuracy: meta.train_accuracy,
        epoch_losses: meta.epoch_losses,
    }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectSummary {
    pub images: usize,
    pub failed: usize,
    pub detections: usize,
}

pub fn detect(
    manifest_path: &Path,
    checkpoint: &Path,
    out: &Path,
    diagnostics: Option<&Path>,
    params: &RegionParams,
    style: &RenderStyle,
) -> Result<DetectSummary, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let ckpt = load_checkpoint(checkpoint, None)?;
    let batch = detect_batch(&manifest, &ckpt.model, params, style);
    write_file(out, detections_csv(&batch.results).as_bytes())?;
    let sidecar = diagnostics
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_diagnostics_path(out));
    write_file(&sidecar, diagnostics_jsonl(&batch).as_bytes())?;
    Ok(DetectSummary {
        images: batch.results.len(),
        failed: batch.failures.len(),
        detections: batch.results.iter().map(|r| r.detections.len()).sum(),
    })
}

/// Groups detections by manifest entry.
pub fn image_evals(
    manifest: &DatasetManifest,
    detections: Vec<(String, poseguard_core::Detection)>,
) -> Result<Vec<ImageEval>, CliError> {
    let mut evals: Vec<ImageEval> = manifest
        .entries
        .iter()
        .map(|e| ImageEval {
            image_id: e.image_id.clone(),
            detections: Vec::new(),
            ground_truths: e.gt_boxes(),
        })
        .collect();
    let index: std::collections::HashMap<&str, usize> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.image_id.as_str(), i))
        .collect();
    for (image_id, det) in detections {
        let i = *index.get(image_id.as_str()).ok_or_else(|| {
            CliError::Data(format!("detection for unknown image id {image_id:?}"))
        })?;
        evals[i].detections.push(det);
    }
    Ok(evals)
}

/// `report.json` → `report.pr_curve.csv`.
pub fn default_pr_curve_path(report: &Path) -> PathBuf {
    report.with_extension("pr_curve.csv")
}

pub fn eval(
    detections: &Path,
    manifest_path: &Path,
    out: &Path,
    pr_curve: Option<&Path>,
    config: &EvalConfig,
) -> Result<EvalReport, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let dets = read_detections(detections)?;
    let report = evaluate(&image_evals(&manifest, dets)?, config)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(out, format!("{json}\n").as_bytes())?;
    let curve = pr_curve
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_pr_curve_path(out));
    emit_pr_curve(&report, &curve).map_err(|e| CliError::output(&curve, e))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformOp {
    Flip,
    Dark { value_scale: f64 },
    Far { placement: FarPlacement },
}

fn apply(op: TransformOp, sample: &Sample) -> Result<Sample, CliError> {
    Ok(match op {
        TransformOp::Flip => hflip(sample),
        TransformOp::Dark { value_scale } => Sample {
            image: darken(&sample.image, value_scale)?,
            ..sample.clone()
        },
        TransformOp::Far { placement } => far_transform(sample, placement)?,
    })
}

/// Writes transformed images, keypoint files and a manifest into `out_dir`.
/// Image ids are kept; output paths are relative to `out_dir`.
pub fn transform(manifest_path: &Path, op: TransformOp, out_dir: &Path) -> Result<usize, CliError> {
    if let TransformOp::Dark { value_scale } = op {
        if !(value_scale > 0.0 && value_scale <= 1.0) {
            return Err(poseguard_core::transforms::TransformError::ValueScale(value_scale).into());
        }
    }
    let manifest = load_manifest(manifest_path)?;
    let samples: Vec<Sample> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let (image, skeletons) = load_entry(e)?;
            apply(
                op,
                &Sample {
                    image,
                    boxes: e.boxes.clone(),
                    skeletons,
                },
            )
        })
        .collect::<Result<_, CliError>>()?;

    create_dir(&out_dir.join("images"))?;
    create_dir(&out_dir.join("keypoints"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (entry, sample)) in manifest.entries.iter().zip(&samples).enumerate() {
        let image = out_dir.join(format!("images/{i:06}.png"));
        let keypoints = out_dir.join(format!("keypoints/{i:06}.json"));
        save_png(&sample.image, &image)?;
        write_file(
            &keypoints,
            KeypointFile::from_skeletons(&sample.skeletons)
                .to_json()
                .as_bytes(),
        )?;
        entries.push(ManifestEntry {
            image_id: entry.image_id.clone(),
            image,
            keypoints,
            boxes: sample
                .boxes
                .iter()
                .map(|g| GroundTruthBox {
                    bbox: g.bbox,
                    image_id: entry.image_id.clone(),
                })
                .collect(),
        });
    }
    let out_manifest = DatasetManifest { entries };
    write_file(
        &out_dir.join(TRANSFORMED_MANIFEST),
        manifest_to_string(&out_manifest, out_dir).as_bytes(),
    )?;
    Ok(samples.len())
}
