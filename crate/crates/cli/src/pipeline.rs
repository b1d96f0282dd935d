//! Image and skeletons in, handgun boxes out.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use poseguard_classifier::{ClassifierError, Model};
use poseguard_core::autolabel::{crop_and_resize, load_rgb, RegionLabel};
use poseguard_core::hand_region::{image_regions, HandSide, RegionParams};
use poseguard_core::keypoints::{DatasetManifest, ManifestEntry};
use poseguard_core::pose_render::{
    normalize_skeleton, render_canvas, select_half, HalfSide, NormalizedSkeleton, PoseCanvas,
    PoseHalf, RenderStyle,
};
use poseguard_core::{BBox, Detection, Skeleton};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DETECTIONS_HEADER: [&str; 6] = ["image_id", "x_min", "y_min", "x_max", "y_max", "score"];

/// How one hand region was classified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDiagnostic {
    pub bbox: BBox,
    pub person_id: usize,
    pub side: HandSide,
    pub score: f64,
    pub label: RegionLabel,
    /// Set when the skeleton could not be normalized and an all-zero pose
    /// half was used instead.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose_fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: String,
    pub skeletons: usize,
    pub detections: Vec<Detection>,
    pub diagnostics: Vec<RegionDiagnostic>,
}

/// Normalized skeleton and its canvas, or why normalization failed.
fn pose_for(
    skeleton: &Skeleton,
    style: &RenderStyle,
) -> Result<(NormalizedSkeleton, PoseCanvas), String> {
    let ns = normalize_skeleton(skeleton).map_err(|e| e.to_string())?;
    let canvas = render_canvas(&ns, style);
    Ok((ns, canvas))
}

/// Classifies every hand region of every skeleton and keeps those labelled
/// handgun. Under HRC_P a skeleton that fails normalization is classified
/// with an all-zero pose half and flagged in the diagnostics.
pub fn detect(
    image_id: &str,
    image: &RgbImage,
    skeletons: &[Skeleton],
    model: &Model,
    params: &RegionParams,
    style: &RenderStyle,
) -> Result<DetectionResult, ClassifierError> {
    let (w, h) = image.dimensions();
    let with_pose = model.config().variant.uses_pose();
    let mut result = DetectionResult {
        image_id: image_id.to_string(),
        skeletons: skeletons.len(),
        detections: Vec::new(),
        diagnostics: Vec::new(),
    };
    for skeleton in skeletons {
        let regions = image_regions(std::slice::from_ref(skeleton), params, w, h);
        if regions.is_empty() {
            continue;
        }
        let pose = with_pose.then(|| pose_for(skeleton, style));
        for region in regions {
            let crop = crop_and_resize(image, &region.bbox)
                .map_err(|e| ClassifierError::Input(e.to_string()))?;
            let (half, fallback) = match &pose {
                None => (None, None),
                Some(Ok((ns, canvas))) => match select_half(&region, ns, canvas, style) {
                    Ok(half) => (Some(half), None),
                    Err(e) => (Some(PoseHalf::blank(HalfSide::Left)), Some(e.to_string())),
                },
                Some(Err(reason)) => (Some(PoseHalf::blank(HalfSide::Left)), Some(reason.clone())),
            };
            if let Some(reason) = &fallback {
                log::warn!(
                    "{image_id} person {} {}: pose unavailable, using a blank pose half: {reason}",
                    region.person_id,
                    region.side.as_str()
                );
            }
            let prediction = model.predict(&crop, half.as_ref())?;
            if prediction.label == RegionLabel::Handgun {
                result.detections.push(
                    Detection::new(region.bbox, prediction.score)
                        .map_err(|e| ClassifierError::Input(e.to_string()))?,
                );
            }
            result.diagnostics.push(RegionDiagnostic {
                bbox: region.bbox,
                person_id: region.person_id,
                side: region.side,
                score: prediction.score,
                label: prediction.label,
                pose_fallback: fallback,
            });
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectFailure {
    pub image_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutput {
    /// Manifest order.
    pub results: Vec<DetectionResult>,
    pub failures: Vec<DetectFailure>,
}

fn detect_entry(
    entry: &ManifestEntry,
    model: &Model,
    params: &RegionParams,
    style: &RenderStyle,
) -> Result<DetectionResult, String> {
    let skeletons = entry.load_skeletons().map_err(|e| e.to_string())?;
    let image = load_rgb(&entry.image).map_err(|e| e.to_string())?;
    detect(&entry.image_id, &image, &skeletons, model, params, style).map_err(|e| e.to_string())
}

/// Runs [`detect`] on every entry in parallel. Failed entries are recorded
/// and skipped; results keep manifest order.
pub fn detect_batch(
    manifest: &DatasetManifest,
    model: &Model,
    params: &RegionParams,
    style: &RenderStyle,
) -> BatchOutput {
    let outcomes: Vec<_> = manifest
        .entries
        .par_iter()
        .map(|e| (e.image_id.clone(), detect_entry(e, model, params, style)))
        .collect();
    let mut out = BatchOutput::default();
    for (image_id, outcome) in outcomes {
        match outcome {
            Ok(r) => out.results.push(r),
            Err(message) => {
                log::warn!("{image_id}: skipped: {message}");
                out.failures.push(DetectFailure { image_id, message });
            }
        }
    }
    out
}

/// Detections as CSV. Floats use the shortest representation that parses
/// back to the same value.
pub fn detections_csv(results: &[DetectionResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DETECTIONS_HEADER).expect("in-memory write");
    for r in results {
        for d in &r.detections {
            let b = d.bbox;
            w.write_record([
                r.image_id.clone(),
                b.x_min().to_string(),
                b.y_min().to_string(),
                b.x_max().to_string(),
                b.y_max().to_string(),
                d.score().to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

#[derive(Serialize)]
struct DiagnosticsLine<'a> {
    image_id: &'a str,
    skeletons: Option<usize>,
    regions: &'a [RegionDiagnostic],
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

/// One JSON object per image: results first, then failures.
pub fn diagnostics_jsonl(out: &BatchOutput) -> String {
    let mut s = String::new();
    for r in &out.results {
        let line = DiagnosticsLine {
            image_id: &r.image_id,
            skeletons: Some(r.skeletons),
            regions: &r.diagnostics,
            error: None,
        };
        s.push_str(&serde_json::to_string(&line).expect("diagnostics serialize"));
        s.push('\n');
    }
    for f in &out.failures {
        let line = DiagnosticsLine {
            image_id: &f.image_id,
            skeletons: None,
            regions: &[],
            error: Some(&f.message),
        };
        s.push_str(&serde_json::to_string(&line).expect("diagnostics serialize"));
        s.push('\n');
    }
    s
}

/// `detections.csv` → `detections.diagnostics.jsonl`.
pub fn default_diagnostics_path(detections: &Path) -> PathBuf {
    detections.with_extension("diagnostics.jsonl")
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::output(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::output(path, e))?;
    f.write_all(contents).map_err(|e| CliError::output(path, e))
}

/// Reads a detections file back as `(image_id, detection)` pairs in file
/// order.
pub fn read_detections(path: &Path) -> Result<Vec<(String, Detection)>, CliError> {
    let data = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| data(e.to_string()))?;
    let headers = reader.headers().map_err(|e| data(e.to_string()))?.clone();
    if headers.iter().ne(DETECTIONS_HEADER) {
        return Err(data(format!(
            "expected header {}, found {}",
            DETECTIONS_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| data(e.to_string()))?;
        let row = i + 2;
        let num = |k: usize| -> Result<f64, CliError> {
            rec[k].trim().parse::<f64>().map_err(|_| {
                data(format!(
                    "row {row}: {} is not a number: {:?}",
                    DETECTIONS_HEADER[k], &rec[k]
                ))
            })
        };
        let bbox = BBox::new(num(1)?, num(2)?, num(3)?, num(4)?)
            .map_err(|e| data(format!("row {row}: {e}")))?;
        let det = Detection::new(bbox, num(5)?).map_err(|e| data(format!("row {row}: {e}")))?;
        out.push((rec[0].to_string(), det));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use poseguard_classifier::{BackboneScale, ModelConfig, Variant};
    use poseguard_core::geometry::body25;
    use poseguard_core::Keypoint2D;

    fn model(variant: Variant) -> Model {
        Model::new(ModelConfig::new(variant, BackboneScale::Reduced), 1)
    }

    fn arm_only() -> Skeleton {
        let mut s = Skeleton::empty(0);
        s.keypoints[body25::R_ELBOW] = Keypoint2D::new(100.0, 100.0, 0.9);
        s.keypoints[body25::R_WRIST] = Keypoint2D::new(80.0, 100.0, 0.9);
        s
    }

    #[test]
    fn no_skeletons_no_detections() {
        let img = RgbImage::new(64, 48);
        let r = detect(
            "a",
            &img,
            &[],
            &model(Variant::Hrc),
            &RegionParams::default(),
            &RenderStyle::default(),
        )
        .unwrap();
        assert_eq!(r.skeletons, 0);
        assert!(r.detections.is_empty() && r.diagnostics.is_empty());
    }

    #[test]
    fn skeleton_without_arms_yields_nothing() {
        let img = RgbImage::new(64, 48);
        let mut s = Skeleton::empty(0);
        s.keypoints[body25::NECK] = Keypoint2D::new(30.0, 10.0, 0.9);
        let r = detect(
            "a",
            &img,
            &[s],
            &model(Variant::HrcP),
            &RegionParams::default(),
            &RenderStyle::default(),
        )
        .unwrap();
        assert_eq!(r.skeletons, 1);
        assert!(r.diagnostics.is_empty());
    }

    #[test]
    fn unnormalizable_skeleton_falls_back_to_blank_pose() {
        let img = RgbImage::new(200, 200);
        let params = RegionParams::default();
        let style = RenderStyle::default();
        let r = detect(
            "a",
            &img,
            &[arm_only()],
            &model(Variant::HrcP),
            &params,
            &style,
        )
        .unwrap();
        assert_eq!(r.diagnostics.len(), 1);
        assert!(r.diagnostics[0].pose_fallback.is_some());

        let r = detect(
            "a",
            &img,
            &[arm_only()],
            &model(Variant::Hrc),
            &params,
            &style,
        )
        .unwrap();
        assert_eq!(r.diagnostics.len(), 1);
        assert!(r.diagnostics[0].pose_fallback.is_none());
    }

    #[test]
    fn detections_are_the_handgun_diagnostics() {
        let img = RgbImage::from_pixel(200, 200, image::Rgb([120, 60, 30]));
        let r = detect(
            "a",
            &img,
            &[arm_only()],
            &model(Variant::Hrc),
            &RegionParams::default(),
            &RenderStyle::default(),
        )
        .unwrap();
        let hits: Vec<_> = r
            .diagnostics
            .iter()
            .filter(|d| d.label == RegionLabel::Handgun)
            .map(|d| (d.bbox, d.score))
            .collect();
        let dets: Vec<_> = r.detections.iter().map(|d| (d.bbox, d.score())).collect();
        assert_eq!(hits, dets);
        assert!(r
            .diagnostics
            .iter()
            .all(|d| (d.score >= 0.5) == (d.label == RegionLabel::Handgun)));
    }
}
