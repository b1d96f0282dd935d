//! Region-classification dataset construction: hand regions are cropped,
//! resized to 256x256 and labelled handgun when they overlap a ground-truth
//! box at the IoMin threshold.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{intersect, iomin, BBox, GroundTruthBox};
use crate::hand_region::{image_regions, HandSide, RegionParams};
use crate::keypoints::{DatasetManifest, IngestError, ManifestEntry};
use crate::pose_render::{
    normalize_skeleton, render_canvas, select_half, BinaryRaster, HalfSide, PoseHalf, RenderError,
    RenderStyle,
};

pub const CROP_SIZE: u32 = 256;
pub const DEFAULT_IOMIN_THRESHOLD: f64 = 0.5;

pub const INDEX_FILE: &str = "index.csv";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("box {0:?} does not overlap the {1}x{2} image")]
    CropOutside([f64; 4], u32, u32),
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("dataset index: {0}")]
    Index(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LabelError + '_ {
    move |source| LabelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLabel {
    Handgun,
    NoHandgun,
}

impl RegionLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegionLabel::Handgun => "handgun",
            RegionLabel::NoHandgun => "no_handgun",
        }
    }

    /// Class index used by the classifier: 0 = handgun, 1 = no handgun.
    pub fn class_index(&self) -> usize {
        match self {
            RegionLabel::Handgun => 0,
            RegionLabel::NoHandgun => 1,
        }
    }
}

impl std::str::FromStr for RegionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "handgun" => Ok(RegionLabel::Handgun),
            "no_handgun" => Ok(RegionLabel::NoHandgun),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionSource {
    pub image_id: String,
    pub person_id: usize,
    pub side: HandSide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRegion {
    pub crop: RgbImage,
    pub label: RegionLabel,
    pub pose_half: Option<PoseHalf>,
    pub source: RegionSource,
}

/// Handgun iff some ground-truth box overlaps the region at IoMin >= `threshold`.
pub fn label_region(region_box: &BBox, gts: &[GroundTruthBox], threshold: f64) -> RegionLabel {
    let best = gts
        .iter()
        .map(|g| iomin(region_box, &g.bbox))
        .fold(0.0_f64, f64::max);
    if !gts.is_empty() && best >= threshold {
        RegionLabel::Handgun
    } else {
        RegionLabel::NoHandgun
    }
}

/// Crops `bbox` (clipped to the image) and resamples it to 256x256 bilinearly.
/// Pixel centres sit at half-integer coordinates.
pub fn crop_and_resize(image: &RgbImage, bbox: &BBox) -> Result<RgbImage, LabelError> {
    let (w, h) = image.dimensions();
    let outside = || LabelError::CropOutside(bbox.to_array(), w, h);
    let frame = BBox::new(0.0, 0.0, w as f64, h as f64).map_err(|_| outside())?;
    let clipped = intersect(bbox, &frame).ok_or_else(outside)?;
    Ok(resample_bilinear(image, &clipped, CROP_SIZE, CROP_SIZE))
}

pub(crate) fn resample_bilinear(image: &RgbImage, src: &BBox, out_w: u32, out_h: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let sx = src.width() / out_w as f64;
    let sy = src.height() / out_h as f64;
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    RgbImage::from_fn(out_w, out_h, |u, v| {
        let fx = (src.x_min() + (u as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
        let fy = (src.y_min() + (v as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let x0 = x0 as u32;
        let y0 = y0 as u32;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let p00 = image.get_pixel(x0, y0).0;
        let p10 = image.get_pixel(x1, y0).0;
        let p01 = image.get_pixel(x0, y1).0;
        let p11 = image.get_pixel(x1, y1).0;
        let mut out = [0u8; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
            let bottom = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
            out[c] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(out)
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, LabelError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| LabelError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub params: RegionParams,
    pub style: RenderStyle,
    pub with_pose: bool,
    pub iomin_threshold: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            params: RegionParams::default(),
            style: RenderStyle::default(),
            with_pose: false,
            iomin_threshold: DEFAULT_IOMIN_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryFailure {
    pub image_id: String,
    pub message: String,
}

/// A region dropped from the pose-fused dataset because its skeleton could
/// not be normalized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseSkip {
    pub source: RegionSource,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct RegionDataset {
    pub regions: Vec<LabeledRegion>,
    pub failures: Vec<EntryFailure>,
    pub pose_skipped: Vec<PoseSkip>,
    pub with_pose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub regions: usize,
    pub handgun: usize,
    pub no_handgun: usize,
    pub with_pose: bool,
    pub failures: Vec<EntryFailure>,
    pub pose_skipped: Vec<PoseSkip>,
}

impl RegionDataset {
    pub fn count(&self, label: RegionLabel) -> usize {
        self.regions.iter().filter(|r| r.label == label).count()
    }

    pub fn metadata(&self) -> DatasetMetadata {
        DatasetMetadata {
            regions: self.regions.len(),
            handgun: self.count(RegionLabel::Handgun),
            no_handgun: self.count(RegionLabel::NoHandgun),
            with_pose: self.with_pose,
            failures: self.failures.clone(),
            pose_skipped: self.pose_skipped.clone(),
        }
    }
}

struct EntryOutput {
    regions: Vec<LabeledRegion>,
    pose_skipped: Vec<PoseSkip>,
}

fn build_entry(entry: &ManifestEntry, opts: &BuildOptions) -> Result<EntryOutput, LabelError> {
    let skeletons = entry.load_skeletons()?;
    let image = load_rgb(&entry.image)?;
    let (w, h) = image.dimensions();
    let mut out = EntryOutput {
        regions: Vec::new(),
        pose_skipped: Vec::new(),
    };
    for skeleton in &skeletons {
        let regions = image_regions(std::slice::from_ref(skeleton), &opts.params, w, h);
        if regions.is_empty() {
            continue;
        }
        // pose canvas is rendered once per person and shared by both hands
        let pose = opts.with_pose.then(|| {
            normalize_skeleton(skeleton)
                .map(|ns| {
                    let canvas = render_canvas(&ns, &opts.style);
                    (ns, canvas)
                })
                .map_err(|e| e.to_string())
        });
        for region in regions {
            let source = RegionSource {
                image_id: entry.image_id.clone(),
                person_id: region.person_id,
                side: region.side,
            };
            let pose_half = match &pose {
                None => None,
                Some(rendered) => {
                    let half = rendered
                        .as_ref()
                        .map_err(Clone::clone)
                        .and_then(|(ns, canvas)| {
                            select_half(&region, ns, canvas, &opts.style).map_err(|e| e.to_string())
                        });
                    match half {
                        Ok(half) => Some(half),
                        Err(reason) => {
                            log::warn!(
                                "{} person {} {}: excluded from pose dataset: {reason}",
                                source.image_id,
                                source.person_id,
                                source.side.as_str()
                            );
                            out.pose_skipped.push(PoseSkip { source, reason });
                            continue;
                        }
                    }
                }
            };
            let crop = crop_and_resize(&image, &region.bbox)?;
            out.regions.push(LabeledRegion {
                crop,
                label: label_region(&region.bbox, &entry.boxes, opts.iomin_threshold),
                pose_half,
                source,
            });
        }
    }
    Ok(out)
}

/// Extracts, labels and crops the hand regions of every manifest entry.
/// Entries that fail to load are reported in `failures` and skipped. Output
/// is sorted by source triple.
pub fn build_region_dataset(manifest: &DatasetManifest, opts: &BuildOptions) -> RegionDataset {
    let per_entry: Vec<(String, Result<EntryOutput, LabelError>)> = manifest
        .entries
        .par_iter()
        .map(|e| (e.image_id.clone(), build_entry(e, opts)))
        .collect();

    let mut ds = RegionDataset {
        with_pose: opts.with_pose,
        ..Default::default()
    };
    for (image_id, result) in per_entry {
        match result {
            Ok(out) => {
                ds.regions.extend(out.regions);
                ds.pose_skipped.extend(out.pose_skipped);
            }
            Err(e) => {
                log::warn!("{image_id}: skipped: {e}");
                ds.failures.push(EntryFailure {
                    image_id,
                    message: e.to_string(),
                });
            }
        }
    }
    ds.regions.sort_by(|a, b| a.source.cmp(&b.source));
    ds.pose_skipped.sort_by(|a, b| a.source.cmp(&b.source));
    ds
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRecord {
    crop: String,
    pose_half: String,
    label: String,
    image_id: String,
    person_id: usize,
    side: String,
}

/// Writes `index.csv`, `metadata.json`, `crops/NNNNNN.png` and (for pose
/// datasets) `poses/NNNNNN_<side>.png` under `out_dir`. Paths in the index are
/// relative to `out_dir`.
pub fn write_region_dataset(ds: &RegionDataset, out_dir: &Path) -> Result<(), LabelError> {
    let crops = out_dir.join("crops");
    let poses = out_dir.join("poses");
    fs::create_dir_all(&crops).map_err(io_err(&crops))?;
    if ds.with_pose {
        fs::create_dir_all(&poses).map_err(io_err(&poses))?;
    }
    let index_path = out_dir.join(INDEX_FILE);
    let mut writer =
        csv::Writer::from_path(&index_path).map_err(|e| LabelError::Index(e.to_string()))?;
    for (i, r) in ds.regions.iter().enumerate() {
        let crop_rel = format!("crops/{i:06}.png");
        let crop_path = out_dir.join(&crop_rel);
        r.crop
            .save_with_format(&crop_path, image::ImageFormat::Png)
            .map_err(|e| LabelError::Image {
                path: crop_path.clone(),
                message: e.to_string(),
            })?;
        let pose_rel = match &r.pose_half {
            Some(half) => {
                let side = match half.side {
                    HalfSide::Left => "left",
                    HalfSide::Right => "right",
                };
                let rel = format!("poses/{i:06}_{side}.png");
                half.raster().save_png(&out_dir.join(&rel))?;
                rel
            }
            None => String::new(),
        };
        writer
            .serialize(IndexRecord {
                crop: crop_rel,
                pose_half: pose_rel,
                label: r.label.as_str().to_string(),
                image_id: r.source.image_id.clone(),
                person_id: r.source.person_id,
                side: r.source.side.as_str().to_string(),
            })
            .map_err(|e| LabelError::Index(e.to_string()))?;
    }
    writer.flush().map_err(io_err(&index_path))?;
    // an empty dataset still gets a header row
    if ds.regions.is_empty() {
        fs::write(
            &index_path,
            "crop,pose_half,label,image_id,person_id,side\n",
        )
        .map_err(io_err(&index_path))?;
    }
    let meta_path = out_dir.join(METADATA_FILE);
    let meta = serde_json::to_string_pretty(&ds.metadata()).expect("metadata serializes");
    fs::write(&meta_path, meta + "\n").map_err(io_err(&meta_path))?;
    Ok(())
}

/// Reads a dataset written by [`write_region_dataset`].
pub fn read_region_dataset(dir: &Path) -> Result<Vec<LabeledRegion>, LabelError> {
    let index_path = dir.join(INDEX_FILE);
    let mut reader =
        csv::Reader::from_path(&index_path).map_err(|e| LabelError::Index(e.to_string()))?;
    let mut out = Vec::new();
    for (row, record) in reader.deserialize::<IndexRecord>().enumerate() {
        let record = record.map_err(|e| LabelError::Index(format!("row {}: {e}", row + 1)))?;
        let bad = |m: String| LabelError::Index(format!("row {}: {m}", row + 1));
        let crop = load_rgb(&dir.join(&record.crop))?;
        if crop.dimensions() != (CROP_SIZE, CROP_SIZE) {
            return Err(bad(format!(
                "crop is {:?}, expected 256x256",
                crop.dimensions()
            )));
        }
        let side: HandSide = record.side.parse().map_err(bad)?;
        let pose_half = if record.pose_half.is_empty() {
            None
        } else {
            let raster = BinaryRaster::load_png(&dir.join(&record.pose_half))?;
            let side = if record.pose_half.ends_with("_right.png") {
                HalfSide::Right
            } else {
                HalfSide::Left
            };
            Some(PoseHalf::from_raster(side, raster)?)
        };
        out.push(LabeledRegion {
            crop,
            label: record.label.parse().map_err(bad)?,
            pose_half,
            source: RegionSource {
                image_id: record.image_id,
                person_id: record.person_id,
                side,
            },
        });
    }
    Ok(out)
}
