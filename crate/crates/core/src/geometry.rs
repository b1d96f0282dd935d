//! Keypoints, skeletons and axis-aligned boxes, plus the overlap measures
//! (IoU and IoMin) used for region merging, labelling and evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error(
        "degenerate box ({x_min}, {y_min}, {x_max}, {y_max}): extent must be strictly positive"
    )]
    DegenerateBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("non-finite coordinate in box")]
    NonFinite,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

/// Number of keypoints in the BODY_25 layout.
pub const NUM_KEYPOINTS: usize = 25;

/// BODY_25 keypoint indices and topology.
pub mod body25 {
    pub const NOSE: usize = 0;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    /// Used as the lumbar reference point for pose normalization.
    pub const MID_HIP: usize = 8;
    pub const R_HIP: usize = 9;
    pub const R_KNEE: usize = 10;
    pub const R_ANKLE: usize = 11;
    pub const L_HIP: usize = 12;
    pub const L_KNEE: usize = 13;
    pub const L_ANKLE: usize = 14;
    pub const R_EYE: usize = 15;
    pub const L_EYE: usize = 16;
    pub const R_EAR: usize = 17;
    pub const L_EAR: usize = 18;
    pub const L_BIG_TOE: usize = 19;
    pub const L_SMALL_TOE: usize = 20;
    pub const L_HEEL: usize = 21;
    pub const R_BIG_TOE: usize = 22;
    pub const R_SMALL_TOE: usize = 23;
    pub const R_HEEL: usize = 24;

    /// The 24 limb connections drawn by the pose estimator's renderer.
    pub const LIMBS: [(usize, usize); 24] = [
        (NECK, MID_HIP),
        (NECK, R_SHOULDER),
        (NECK, L_SHOULDER),
        (R_SHOULDER, R_ELBOW),
        (R_ELBOW, R_WRIST),
        (L_SHOULDER, L_ELBOW),
        (L_ELBOW, L_WRIST),
        (MID_HIP, R_HIP),
        (R_HIP, R_KNEE),
        (R_KNEE, R_ANKLE),
        (MID_HIP, L_HIP),
        (L_HIP, L_KNEE),
        (L_KNEE, L_ANKLE),
        (NECK, NOSE),
        (NOSE, R_EYE),
        (R_EYE, R_EAR),
        (NOSE, L_EYE),
        (L_EYE, L_EAR),
        (L_ANKLE, L_BIG_TOE),
        (L_BIG_TOE, L_SMALL_TOE),
        (L_ANKLE, L_HEEL),
        (R_ANKLE, R_BIG_TOE),
        (R_BIG_TOE, R_SMALL_TOE),
        (R_ANKLE, R_HEEL),
    ];

    /// Index of the mirrored body part (left <-> right); centre-line parts map to themselves.
    pub const MIRROR: [usize; 25] = [
        NOSE,
        NECK,
        L_SHOULDER,
        L_ELBOW,
        L_WRIST,
        R_SHOULDER,
        R_ELBOW,
        R_WRIST,
        MID_HIP,
        L_HIP,
        L_KNEE,
        L_ANKLE,
        R_HIP,
        R_KNEE,
        R_ANKLE,
        L_EYE,
        R_EYE,
        L_EAR,
        R_EAR,
        R_BIG_TOE,
        R_SMALL_TOE,
        R_HEEL,
        L_BIG_TOE,
        L_SMALL_TOE,
        L_HEEL,
    ];
}

/// A 2D keypoint in image pixels. Undetected keypoints are exactly `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint2D {
    pub const UNDETECTED: Keypoint2D = Keypoint2D {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    };

    /// Builds a keypoint, clamping the confidence into `[0, 1]`. A zero
    /// confidence yields the canonical undetected encoding.
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        let confidence = if confidence.is_nan() {
            0.0
        } else {
            confidence.clamp(0.0, 1.0)
        };
        if confidence == 0.0 {
            Self::UNDETECTED
        } else {
            Self { x, y, confidence }
        }
    }

    pub fn is_detected(&self) -> bool {
        self.confidence > 0.0
    }
}

/// One person's BODY_25 keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub keypoints: [Keypoint2D; NUM_KEYPOINTS],
    pub person_id: usize,
}

impl Skeleton {
    pub fn empty(person_id: usize) -> Self {
        Self {
            keypoints: [Keypoint2D::UNDETECTED; NUM_KEYPOINTS],
            person_id,
        }
    }

    pub fn keypoint(&self, index: usize) -> &Keypoint2D {
        &self.keypoints[index]
    }

    pub fn detected_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_detected()).count()
    }

    /// Applies `f` to the position of every detected keypoint.
    pub fn map_positions(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Skeleton {
        let mut out = self.clone();
        for kp in out.keypoints.iter_mut().filter(|k| k.is_detected()) {
            let (x, y) = f(kp.x, kp.y);
            kp.x = x;
            kp.y = y;
        }
        out
    }
}

/// Axis-aligned box in continuous pixel coordinates with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x_min < x_max && y_min < y_max {
            Ok(Self {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        } else {
            Err(GeometryError::DegenerateBox {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        }
    }

    /// Square box of side `side` centred on `(cx, cy)`.
    pub fn square(cx: f64, cy: f64, side: f64) -> Result<Self, GeometryError> {
        let half = side / 2.0;
        Self::new(cx - half, cy - half, cx + half, cy + half)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }
    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Smallest box covering both inputs.
    pub fn union_hull(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// A scored handgun detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Result<Self, GeometryError> {
        if (0.0..=1.0).contains(&score) {
            Ok(Self { bbox, score })
        } else {
            Err(GeometryError::ScoreOutOfRange(score))
        }
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// An annotated handgun location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub image_id: String,
}

pub fn area(b: &BBox) -> f64 {
    (b.x_max - b.x_min) * (b.y_max - b.y_min)
}

/// Overlap rectangle of two boxes, or `None` when their interiors are disjoint.
pub fn intersect(a: &BBox, b: &BBox) -> Option<BBox> {
    let x_min = a.x_min.max(b.x_min);
    let y_min = a.y_min.max(b.y_min);
    let x_max = a.x_max.min(b.x_max);
    let y_max = a.y_max.min(b.y_max);
    (x_min < x_max && y_min < y_max).then_some(BBox {
        x_min,
        y_min,
        x_max,
        y_max,
    })
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    intersect(a, b).map_or(0.0, |i| area(&i))
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = area(a) + area(b) - inter;
    (inter / union).min(1.0)
}

/// Intersection over the smaller of the two areas.
pub fn iomin(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    (inter / area(a).min(area(b))).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&bb(0.0, 0.0, 10.0, 10.0)), 100.0);
        assert_eq!(area(&bb(0.0, 0.0, 1.0, 1.0)), 1.0);
        assert_eq!(area(&bb(2.0, 3.0, 7.0, 11.0)), 40.0);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(matches!(
            BBox::new(0.0, 0.0, 0.0, 5.0),
            Err(GeometryError::DegenerateBox { .. })
        ));
        assert!(BBox::new(3.0, 0.0, 1.0, 5.0).is_err());
        assert_eq!(
            BBox::new(f64::NAN, 0.0, 1.0, 1.0),
            Err(GeometryError::NonFinite)
        );
    }

    #[test]
    fn intersect_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(intersect(&a, &a), Some(a));
        assert_eq!(intersect(&a, &bb(20.0, 20.0, 30.0, 30.0)), None);
        assert_eq!(
            intersect(&a, &bb(5.0, 5.0, 15.0, 15.0)),
            Some(bb(5.0, 5.0, 10.0, 10.0))
        );
        // touching edges share no interior
        assert_eq!(intersect(&a, &bb(10.0, 0.0, 20.0, 10.0)), None);
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &bb(5.0, 0.0, 15.0, 10.0)) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn iomin_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iomin(&a, &a), 1.0);
        assert_eq!(iomin(&bb(2.0, 2.0, 4.0, 4.0), &a), 1.0);
        assert_eq!(iomin(&a, &bb(5.0, 0.0, 15.0, 10.0)), 0.5);
    }

    #[test]
    fn keypoint_confidence_is_clamped() {
        assert_eq!(Keypoint2D::new(1.0, 2.0, 1.02).confidence, 1.0);
        assert_eq!(Keypoint2D::new(1.0, 2.0, -0.5), Keypoint2D::UNDETECTED);
    }

    #[test]
    fn mirror_table_is_an_involution() {
        for i in 0..NUM_KEYPOINTS {
            assert_eq!(body25::MIRROR[body25::MIRROR[i]], i);
        }
        assert_eq!(body25::MIRROR[body25::R_WRIST], body25::L_WRIST);
    }

    #[test]
    fn box_serializes_as_array() {
        let b = bb(1.0, 2.0, 3.0, 4.5);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.0,2.0,3.0,4.5]");
        assert!(serde_json::from_str::<BBox>("[1.0,2.0,1.0,4.5]").is_err());
    }
}
