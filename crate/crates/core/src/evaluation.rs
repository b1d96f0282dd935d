//! Detection metrics with IoMin matching: TP/FP/FN counts, precision and
//! recall at a score cut, PASCAL-style average precision and PR curves.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iomin, BBox, Detection};

pub const DEFAULT_IOMIN_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation undefined: the dataset has no ground-truth boxes")]
    NoGroundTruth,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMatch {
    /// Index into the detection list.
    pub detection: usize,
    /// Matched ground-truth index, `None` for a false positive.
    pub ground_truth: Option<usize>,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub counts: Counts,
    /// In processing order (descending score).
    pub matches: Vec<DetectionMatch>,
}

/// Detection indices by descending score; equal scores keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()));
    order
}

/// Greedy one-to-one matching of one image's detections to its ground truth.
///
/// Detections are visited by descending score; each takes the still
/// unmatched ground-truth box with the highest IoMin at or above
/// `iomin_threshold` (lowest index on ties), otherwise it is a false positive.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iomin_threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::with_capacity(dets.len());
    let mut counts = Counts::default();
    for d in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iomin(&dets[d].bbox, gt);
            if o >= iomin_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, o)) => {
                taken[g] = true;
                counts.tp += 1;
                matches.push(DetectionMatch {
                    detection: d,
                    ground_truth: Some(g),
                    overlap: o,
                });
            }
            None => {
                counts.fp += 1;
                matches.push(DetectionMatch {
                    detection: d,
                    ground_truth: None,
                    overlap: 0.0,
                });
            }
        }
    }
    counts.fn_ = gts.len() - counts.tp;
    MatchResult { counts, matches }
}

/// Precision (1 when nothing was detected) and recall.
pub fn precision_recall(counts: &Counts) -> Result<(f64, f64), EvalError> {
    let positives = counts.tp + counts.fn_;
    if positives == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let detected = counts.tp + counts.fp;
    let precision = if detected == 0 {
        1.0
    } else {
        counts.tp as f64 / detected as f64
    };
    Ok((precision, counts.tp as f64 / positives as f64))
}

/// One image's detections and ground truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEval {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<BBox>,
}

/// Cumulative operating point after including every detection scoring at
/// least `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iomin_threshold: f64,
    pub score_threshold: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iomin_threshold: DEFAULT_IOMIN_THRESHOLD,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            interpolation: Interpolation::AllPoint,
        }
    }
}

fn total_ground_truth(images: &[ImageEval]) -> usize {
    images.iter().map(|i| i.ground_truths.len()).sum()
}

/// Operating points at every distinct detection score, descending.
pub fn operating_points(
    images: &[ImageEval],
    iomin_threshold: f64,
) -> Result<Vec<OperatingPoint>, EvalError> {
    let positives = total_ground_truth(images);
    if positives == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut scored: Vec<(f64, bool)> = images
        .iter()
        .flat_map(|img| {
            match_detections(&img.detections, &img.ground_truths, iomin_threshold)
                .matches
                .into_iter()
                .map(|m| {
                    (
                        img.detections[m.detection].score(),
                        m.ground_truth.is_some(),
                    )
                })
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = scored.get(i + 1).is_none_or(|next| next.0 != score);
        if group_ends {
            points.push(OperatingPoint {
                threshold: score,
                tp,
                fp,
                recall: tp as f64 / positives as f64,
                precision: tp as f64 / (tp + fp) as f64,
            });
        }
    }
    Ok(points)
}

/// Precision envelope: each point's precision replaced by the best precision
/// at equal or higher recall.
fn envelope(points: &[OperatingPoint]) -> Vec<f64> {
    let mut env = vec![0.0; points.len()];
    let mut best = 0.0_f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].precision);
        env[i] = best;
    }
    env
}

/// Average precision in percent.
pub fn average_precision(
    images: &[ImageEval],
    iomin_threshold: f64,
    interpolation: Interpolation,
) -> Result<f64, EvalError> {
    let positives = total_ground_truth(images);
    let points = operating_points(images, iomin_threshold)?;
    Ok(ap_from_points(&points, positives, interpolation))
}

fn ap_from_points(
    points: &[OperatingPoint],
    positives: usize,
    interpolation: Interpolation,
) -> f64 {
    match interpolation {
        Interpolation::AllPoint => {
            let env = envelope(points);
            let mut ap = 0.0;
            let mut prev_tp = 0;
            for (p, e) in points.iter().zip(&env) {
                if p.tp > prev_tp {
                    ap += (p.tp - prev_tp) as f64 / positives as f64 * e;
                    prev_tp = p.tp;
                }
            }
            ap * 100.0
        }
        Interpolation::ElevenPoint => {
            let sum: f64 = (0..=10)
                .map(|k| {
                    let r = k as f64 / 10.0;
                    points
                        .iter()
                        .filter(|p| p.recall >= r)
                        .map(|p| p.precision)
                        .fold(0.0, f64::max)
                })
                .sum();
            sum / 11.0 * 100.0
        }
    }
}

/// Enveloped PR staircase in ascending recall, starting at recall 0.
/// Interior points of constant-precision runs are dropped. With no
/// detections the curve is the single point (0, 1).
pub fn pr_curve(points: &[OperatingPoint]) -> Vec<PrPoint> {
    if points.is_empty() {
        return vec![PrPoint {
            recall: 0.0,
            precision: 1.0,
        }];
    }
    let env = envelope(points);
    let mut raw = vec![PrPoint {
        recall: 0.0,
        precision: env[0],
    }];
    let mut prev_tp = 0;
    for (p, e) in points.iter().zip(&env) {
        if p.tp > prev_tp {
            raw.push(PrPoint {
                recall: p.recall,
                precision: *e,
            });
            prev_tp = p.tp;
        }
    }
    let mut curve: Vec<PrPoint> = Vec::with_capacity(raw.len());
    for (i, p) in raw.iter().enumerate() {
        let interior = i > 0
            && i + 1 < raw.len()
            && raw[i - 1].precision == p.precision
            && raw[i + 1].precision == p.precision;
        if !interior {
            curve.push(*p);
        }
    }
    curve
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision_05: f64,
    pub recall_05: f64,
    /// Percent.
    pub ap: f64,
    pub pr_curve: Vec<PrPoint>,
    pub counts: Counts,
    pub config: EvalConfig,
}

pub fn evaluate(images: &[ImageEval], config: &EvalConfig) -> Result<EvalReport, EvalError> {
    let positives = total_ground_truth(images);
    if positives == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut counts = Counts::default();
    for img in images {
        let kept: Vec<Detection> = img
            .detections
            .iter()
            .filter(|d| d.score() >= config.score_threshold)
            .copied()
            .collect();
        counts += match_detections(&kept, &img.ground_truths, config.iomin_threshold).counts;
    }
    let (precision_05, recall_05) = precision_recall(&counts)?;
    let points = operating_points(images, config.iomin_threshold)?;
    Ok(EvalReport {
        precision_05,
        recall_05,
        ap: ap_from_points(&points, positives, config.interpolation),
        pr_curve: pr_curve(&points),
        counts,
        config: *config,
    })
}

pub fn pr_curve_csv(report: &EvalReport) -> String {
    let mut out = String::from("recall,precision\n");
    for p in &report.pr_curve {
        out.push_str(&format!("{},{}\n", p.recall, p.precision));
    }
    out
}

/// Writes the PR curve as `recall,precision` rows.
pub fn emit_pr_curve(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    fs::write(path, pr_curve_csv(report))?;
    Ok(())
}
