//! Square hand-region proposals extrapolated from the elbow -> wrist vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{body25, intersect, iou, BBox, Keypoint2D, Skeleton};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegionParamsError {
    #[error("conf_threshold must lie in [0, 1], got {0}")]
    ConfThreshold(f64),
    #[error("scale_s must be positive, got {0}")]
    Scale(f64),
    #[error("merge_iou must lie in (0, 1], got {0}")]
    MergeIou(f64),
    #[error("extension_k must be finite, got {0}")]
    Extension(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Left,
    Right,
    Merged,
}

impl HandSide {
    pub fn as_str(&self) -> &'static str {
        match self {
            HandSide::Left => "left",
            HandSide::Right => "right",
            HandSide::Merged => "merged",
        }
    }
}

impl std::str::FromStr for HandSide {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(HandSide::Left),
            "right" => Ok(HandSide::Right),
            "merged" => Ok(HandSide::Merged),
            other => Err(format!("unknown hand side {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandRegion {
    pub bbox: BBox,
    pub person_id: usize,
    pub side: HandSide,
    pub anchor_wrist: Keypoint2D,
    /// BODY_25 index of `anchor_wrist`.
    pub anchor_index: usize,
}

/// Free parameters of region extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionParams {
    /// Minimum elbow and wrist confidence.
    pub conf_threshold: f64,
    /// How far past the wrist the box centre sits, in forearm lengths.
    pub extension_k: f64,
    /// Box side in forearm lengths.
    pub scale_s: f64,
    /// IoU at or above which the two hand boxes of a person are merged.
    pub merge_iou: f64,
}

impl Default for RegionParams {
    fn default() -> Self {
        Self {
            conf_threshold: 0.3,
            extension_k: 0.5,
            scale_s: 1.5,
            merge_iou: 0.4,
        }
    }
}

impl RegionParams {
    pub fn validate(&self) -> Result<(), RegionParamsError> {
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(RegionParamsError::ConfThreshold(self.conf_threshold));
        }
        if !(self.scale_s > 0.0 && self.scale_s.is_finite()) {
            return Err(RegionParamsError::Scale(self.scale_s));
        }
        if !(self.merge_iou > 0.0 && self.merge_iou <= 1.0) {
            return Err(RegionParamsError::MergeIou(self.merge_iou));
        }
        if !self.extension_k.is_finite() {
            return Err(RegionParamsError::Extension(self.extension_k));
        }
        Ok(())
    }
}

/// Square box of side `scale_s * |w - e|` centred at `w + extension_k * (w - e)`.
///
/// Returns `None` when either keypoint is below the confidence gate or the
/// forearm has zero length.
pub fn hand_box_from_forearm(
    elbow: &Keypoint2D,
    wrist: &Keypoint2D,
    params: &RegionParams,
) -> Option<BBox> {
    if !elbow.is_detected()
        || !wrist.is_detected()
        || elbow.confidence < params.conf_threshold
        || wrist.confidence < params.conf_threshold
    {
        return None;
    }
    let dx = wrist.x - elbow.x;
    let dy = wrist.y - elbow.y;
    let length = dx.hypot(dy);
    if length == 0.0 {
        return None;
    }
    let cx = wrist.x + params.extension_k * dx;
    let cy = wrist.y + params.extension_k * dy;
    BBox::square(cx, cy, params.scale_s * length).ok()
}

/// Right- and left-hand regions of one person, merged into a single region
/// when their boxes overlap at `merge_iou` or more.
pub fn extract_hand_regions(skeleton: &Skeleton, params: &RegionParams) -> Vec<HandRegion> {
    let kp = &skeleton.keypoints;
    let make = |elbow: usize, wrist: usize, side: HandSide| {
        hand_box_from_forearm(&kp[elbow], &kp[wrist], params).map(|bbox| HandRegion {
            bbox,
            person_id: skeleton.person_id,
            side,
            anchor_wrist: kp[wrist],
            anchor_index: wrist,
        })
    };
    let right = make(body25::R_ELBOW, body25::R_WRIST, HandSide::Right);
    let left = make(body25::L_ELBOW, body25::L_WRIST, HandSide::Left);

    match (right, left) {
        (Some(r), Some(l)) if iou(&r.bbox, &l.bbox) >= params.merge_iou => {
            // ties go to the right wrist
            let anchor = if l.anchor_wrist.confidence > r.anchor_wrist.confidence {
                &l
            } else {
                &r
            };
            vec![HandRegion {
                bbox: r.bbox.union_hull(&l.bbox),
                person_id: skeleton.person_id,
                side: HandSide::Merged,
                anchor_wrist: anchor.anchor_wrist,
                anchor_index: anchor.anchor_index,
            }]
        }
        (r, l) => r.into_iter().chain(l).collect(),
    }
}

/// Clips a region to `[0, width] x [0, height]`; `None` if nothing remains.
pub fn clip_to_image(region: &HandRegion, width: u32, height: u32) -> Option<HandRegion> {
    let frame = BBox::new(0.0, 0.0, width as f64, height as f64).ok()?;
    let bbox = if frame.contains(&region.bbox) {
        region.bbox
    } else {
        intersect(&region.bbox, &frame)?
    };
    Some(HandRegion { bbox, ..*region })
}

/// Extracts, merges and clips the regions of every skeleton of an image.
pub fn image_regions(
    skeletons: &[Skeleton],
    params: &RegionParams,
    width: u32,
    height: u32,
) -> Vec<HandRegion> {
    skeletons
        .iter()
        .flat_map(|s| extract_hand_regions(s, params))
        .filter_map(|r| clip_to_image(&r, width, height))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: f64, y: f64, c: f64) -> Keypoint2D {
        Keypoint2D::new(x, y, c)
    }

    fn arms(re: Keypoint2D, rw: Keypoint2D, le: Keypoint2D, lw: Keypoint2D) -> Skeleton {
        let mut s = Skeleton::empty(3);
        s.keypoints[body25::R_ELBOW] = re;
        s.keypoints[body25::R_WRIST] = rw;
        s.keypoints[body25::L_ELBOW] = le;
        s.keypoints[body25::L_WRIST] = lw;
        s
    }

    #[test]
    fn low_confidence_elbow_is_filtered() {
        let p = RegionParams::default();
        assert!(hand_box_from_forearm(&kp(0.0, 0.0, 0.1), &kp(10.0, 0.0, 1.0), &p).is_none());
    }

    #[test]
    fn box_follows_forearm() {
        let p = RegionParams::default();
        let b = hand_box_from_forearm(&kp(0.0, 0.0, 1.0), &kp(10.0, 0.0, 1.0), &p).unwrap();
        assert_eq!(b, BBox::new(7.5, -7.5, 22.5, 7.5).unwrap());
    }

    #[test]
    fn coincident_elbow_and_wrist() {
        let p = RegionParams::default();
        assert!(hand_box_from_forearm(&kp(5.0, 5.0, 1.0), &kp(5.0, 5.0, 1.0), &p).is_none());
    }

    #[test]
    fn no_arm_keypoints_no_regions() {
        assert!(extract_hand_regions(&Skeleton::empty(0), &RegionParams::default()).is_empty());
    }

    #[test]
    fn disjoint_hands_give_two_regions() {
        let s = arms(
            kp(0.0, 0.0, 1.0),
            kp(10.0, 0.0, 1.0),
            kp(200.0, 0.0, 1.0),
            kp(190.0, 0.0, 1.0),
        );
        let regions = extract_hand_regions(&s, &RegionParams::default());
        let sides: Vec<_> = regions.iter().map(|r| r.side).collect();
        assert_eq!(sides, vec![HandSide::Right, HandSide::Left]);
        assert!(regions.iter().all(|r| r.person_id == 3));
        assert_eq!(regions[1].anchor_index, body25::L_WRIST);
    }

    #[test]
    fn two_handed_grip_is_merged() {
        // right box (0,0,10,10): centre (5,5), side 10 -> forearm length 20/3
        // with k = 0.5 the wrist sits 1/3 of a forearm before the centre.
        let p = RegionParams {
            conf_threshold: 0.3,
            extension_k: 0.5,
            scale_s: 1.5,
            merge_iou: 0.4,
        };
        let len = 10.0 / 1.5;
        let right_wrist = kp(5.0 - 0.5 * len, 5.0, 0.8);
        let right_elbow = kp(5.0 - 1.5 * len, 5.0, 0.9);
        let left_wrist = kp(7.0 - 0.5 * len, 5.0, 0.95);
        let left_elbow = kp(7.0 - 1.5 * len, 5.0, 0.9);
        let s = arms(right_elbow, right_wrist, left_elbow, left_wrist);

        let rb = hand_box_from_forearm(&right_elbow, &right_wrist, &p).unwrap();
        let lb = hand_box_from_forearm(&left_elbow, &left_wrist, &p).unwrap();
        assert!((rb.x_min() - 0.0).abs() < 1e-12 && (rb.x_max() - 10.0).abs() < 1e-12);
        assert!((lb.x_min() - 2.0).abs() < 1e-12 && (lb.x_max() - 12.0).abs() < 1e-12);
        assert!((iou(&rb, &lb) - 80.0 / 120.0).abs() < 1e-9);

        let regions = extract_hand_regions(&s, &p);
        assert_eq!(regions.len(), 1);
        let m = &regions[0];
        assert_eq!(m.side, HandSide::Merged);
        assert!((m.bbox.x_min() - 0.0).abs() < 1e-12);
        assert!((m.bbox.x_max() - 12.0).abs() < 1e-12);
        assert!((m.bbox.y_min() - 0.0).abs() < 1e-12);
        assert!((m.bbox.y_max() - 10.0).abs() < 1e-12);
        assert_eq!(m.anchor_index, body25::L_WRIST);
    }

    #[test]
    fn clipping() {
        let r = HandRegion {
            bbox: BBox::new(10.0, 10.0, 20.0, 20.0).unwrap(),
            person_id: 0,
            side: HandSide::Right,
            anchor_wrist: kp(1.0, 1.0, 1.0),
            anchor_index: body25::R_WRIST,
        };
        assert_eq!(clip_to_image(&r, 100, 100), Some(r));
        let r2 = HandRegion {
            bbox: BBox::new(-5.0, -5.0, 5.0, 5.0).unwrap(),
            ..r
        };
        assert_eq!(
            clip_to_image(&r2, 100, 100).unwrap().bbox,
            BBox::new(0.0, 0.0, 5.0, 5.0).unwrap()
        );
        let r3 = HandRegion {
            bbox: BBox::new(-30.0, 10.0, -20.0, 20.0).unwrap(),
            ..r
        };
        assert!(clip_to_image(&r3, 100, 100).is_none());
    }

    #[test]
    fn params_validation() {
        assert!(RegionParams::default().validate().is_ok());
        let bad = RegionParams {
            merge_iou: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RegionParams {
            scale_s: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
