//! Experiment transforms applied consistently to an image, its ground-truth
//! boxes and its skeletons: horizontal flip, darkening in HSV value, and
//! half-scale "far" placement on a black canvas.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{body25, BBox, GroundTruthBox, Keypoint2D, Skeleton, NUM_KEYPOINTS};

pub const DEFAULT_VALUE_SCALE: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("value_scale must lie in (0, 1], got {0}")]
    ValueScale(f64),
    #[error("image of size {0}x{1} is too small to downscale")]
    TooSmall(u32, u32),
}

/// An image together with its annotations and skeletons.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub boxes: Vec<GroundTruthBox>,
    pub skeletons: Vec<Skeleton>,
}

pub fn flip_box(b: &BBox, width: f64) -> BBox {
    BBox::new(width - b.x_max(), b.y_min(), width - b.x_min(), b.y_max())
        .expect("mirroring preserves extent")
}

/// Mirrors keypoint x coordinates and swaps left/right body parts.
pub fn flip_skeleton(s: &Skeleton, width: f64) -> Skeleton {
    let mut keypoints = [Keypoint2D::UNDETECTED; NUM_KEYPOINTS];
    for (i, kp) in s.keypoints.iter().enumerate() {
        if kp.is_detected() {
            keypoints[body25::MIRROR[i]] = Keypoint2D {
                x: width - kp.x,
                ..*kp
            };
        }
    }
    Skeleton {
        keypoints,
        person_id: s.person_id,
    }
}

pub fn hflip(sample: &Sample) -> Sample {
    let width = sample.image.width() as f64;
    Sample {
        image: image::imageops::flip_horizontal(&sample.image),
        boxes: sample
            .boxes
            .iter()
            .map(|g| GroundTruthBox {
                bbox: flip_box(&g.bbox, width),
                image_id: g.image_id.clone(),
            })
            .collect(),
        skeletons: sample
            .skeletons
            .iter()
            .map(|s| flip_skeleton(s, width))
            .collect(),
    }
}

/// RGB in `[0, 1]` to (hue degrees in `[0, 360)`, saturation, value).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Multiplies the HSV value channel of every pixel by `value_scale`.
pub fn darken(image: &RgbImage, value_scale: f64) -> Result<RgbImage, TransformError> {
    if !(value_scale > 0.0 && value_scale <= 1.0) {
        return Err(TransformError::ValueScale(value_scale));
    }
    let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let [r, g, b] = p.0.map(|c| c as f64 / 255.0);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb(h, s, v * value_scale);
        *p = Rgb([to_u8(r), to_u8(g), to_u8(b)]);
    }
    Ok(out)
}

/// Where the half-scale content sits inside the black canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FarPlacement {
    #[default]
    TopLeft,
    Center,
}

/// 2x2 block average (rounded); odd trailing rows/columns are dropped.
pub fn downscale_half(image: &RgbImage) -> RgbImage {
    let (w, h) = image.dimensions();
    RgbImage::from_fn(w / 2, h / 2, |x, y| {
        let mut acc = [0u32; 3];
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let p = image.get_pixel(2 * x + dx, 2 * y + dy).0;
            for c in 0..3 {
                acc[c] += p[c] as u32;
            }
        }
        Rgb(acc.map(|s| ((s + 2) / 4) as u8))
    })
}

/// Shrinks content to half size and places it on a black canvas of the
/// original size. Boxes and keypoints are scaled by 0.5 (and shifted for
/// centred placement); confidences are untouched.
pub fn far_transform(sample: &Sample, placement: FarPlacement) -> Result<Sample, TransformError> {
    let (w, h) = sample.image.dimensions();
    if w < 2 || h < 2 {
        return Err(TransformError::TooSmall(w, h));
    }
    let content = downscale_half(&sample.image);
    let (ox, oy) = match placement {
        FarPlacement::TopLeft => (0, 0),
        FarPlacement::Center => ((w - content.width()) / 2, (h - content.height()) / 2),
    };
    let mut image = RgbImage::new(w, h);
    image::imageops::replace(&mut image, &content, ox as i64, oy as i64);

    let (fx, fy) = (ox as f64, oy as f64);
    let map = |x: f64, y: f64| (x * 0.5 + fx, y * 0.5 + fy);
    let boxes = sample
        .boxes
        .iter()
        .map(|g| {
            let (x0, y0) = map(g.bbox.x_min(), g.bbox.y_min());
            let (x1, y1) = map(g.bbox.x_max(), g.bbox.y_max());
            GroundTruthBox {
                bbox: BBox::new(x0, y0, x1, y1).expect("halving preserves positive extent"),
                image_id: g.image_id.clone(),
            }
        })
        .collect();
    let skeletons = sample
        .skeletons
        .iter()
        .map(|s| s.map_positions(map))
        .collect();
    Ok(Sample {
        image,
        boxes,
        skeletons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with(boxes: &[[f64; 4]], skeletons: Vec<Skeleton>, w: u32, h: u32) -> Sample {
        Sample {
            image: RgbImage::from_fn(w, h, |x, y| {
                Rgb([(x * 3) as u8, (y * 5) as u8, (x + y) as u8])
            }),
            boxes: boxes
                .iter()
                .map(|b| GroundTruthBox {
                    bbox: BBox::try_from(*b).unwrap(),
                    image_id: "a".into(),
                })
                .collect(),
            skeletons,
        }
    }

    #[test]
    fn flip_box_corner() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(
            flip_box(&b, 100.0),
            BBox::new(90.0, 0.0, 100.0, 10.0).unwrap()
        );
    }

    #[test]
    fn flip_swaps_wrists() {
        let mut s = Skeleton::empty(0);
        s.keypoints[body25::R_WRIST] = Keypoint2D::new(30.0, 40.0, 0.7);
        let f = flip_skeleton(&s, 100.0);
        assert_eq!(
            f.keypoints[body25::L_WRIST],
            Keypoint2D::new(70.0, 40.0, 0.7)
        );
        assert_eq!(f.keypoints[body25::R_WRIST], Keypoint2D::UNDETECTED);
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut s = Skeleton::empty(2);
        s.keypoints[body25::NECK] = Keypoint2D::new(12.5, 3.0, 0.9);
        s.keypoints[body25::L_ELBOW] = Keypoint2D::new(41.0, 8.0, 0.4);
        let sample = sample_with(&[[1.0, 2.0, 30.0, 40.0]], vec![s], 61, 47);
        let once = hflip(&sample);
        assert_ne!(once, sample);
        assert_eq!(hflip(&once), sample);
        assert_eq!(once.image.get_pixel(60, 0), sample.image.get_pixel(0, 0));
    }

    #[test]
    fn darken_identity_and_black() {
        let img = RgbImage::from_fn(32, 16, |x, y| Rgb([(x * 8) as u8, (y * 16) as u8, 200]));
        assert_eq!(darken(&img, 1.0).unwrap(), img);
        let black = RgbImage::new(8, 8);
        assert_eq!(darken(&black, 0.3).unwrap(), black);
    }

    #[test]
    fn darken_gray_halves_intensity() {
        let gray = RgbImage::from_pixel(4, 4, Rgb([200, 200, 200]));
        let out = darken(&gray, 0.5).unwrap();
        assert!(out.pixels().all(|p| p.0 == [100, 100, 100]));
    }

    #[test]
    fn darken_rejects_bad_scale() {
        let img = RgbImage::new(1, 1);
        assert_eq!(darken(&img, 0.0), Err(TransformError::ValueScale(0.0)));
        assert!(darken(&img, 1.5).is_err());
    }

    #[test]
    fn hsv_round_trip_preserves_hue_and_saturation() {
        for &(r, g, b) in &[
            (0.9, 0.2, 0.1),
            (0.1, 0.8, 0.3),
            (0.2, 0.3, 0.95),
            (0.5, 0.5, 0.5),
        ] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
            let (h3, s3, v3) = rgb_to_hsv(r * 0.4, g * 0.4, b * 0.4);
            assert!((h - h3).abs() < 1e-9 && (s - s3).abs() < 1e-9);
            assert!((v3 - 0.4 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn far_scales_boxes_and_keeps_size() {
        let mut s = Skeleton::empty(0);
        s.keypoints[body25::NECK] = Keypoint2D::new(40.0, 20.0, 0.9);
        let sample = sample_with(&[[10.0, 10.0, 50.0, 60.0]], vec![s], 80, 64);
        let far = far_transform(&sample, FarPlacement::TopLeft).unwrap();
        assert_eq!(far.image.dimensions(), (80, 64));
        assert_eq!(far.boxes[0].bbox, BBox::new(5.0, 5.0, 25.0, 30.0).unwrap());
        assert_eq!(
            far.skeletons[0].keypoints[body25::NECK],
            Keypoint2D::new(20.0, 10.0, 0.9)
        );
        // black fill outside the content
        assert_eq!(far.image.get_pixel(79, 63).0, [0, 0, 0]);
        assert_eq!(far.image.get_pixel(40, 0).0, [0, 0, 0]);
    }

    #[test]
    fn far_content_matches_block_average() {
        let sample = sample_with(&[], vec![], 400, 300);
        let far = far_transform(&sample, FarPlacement::TopLeft).unwrap();
        // content pixel (200, 100) lands at (100, 50)
        let mut acc = [0u32; 3];
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let p = sample.image.get_pixel(200 + dx, 100 + dy).0;
            for c in 0..3 {
                acc[c] += p[c] as u32;
            }
        }
        let oracle = acc.map(|s| (s as f64 / 4.0).round() as u8);
        assert_eq!(far.image.get_pixel(100, 50).0, oracle);
    }

    #[test]
    fn centred_far_placement() {
        let sample = sample_with(&[[10.0, 10.0, 50.0, 60.0]], vec![], 80, 64);
        let far = far_transform(&sample, FarPlacement::Center).unwrap();
        assert_eq!(
            far.boxes[0].bbox,
            BBox::new(25.0, 21.0, 45.0, 46.0).unwrap()
        );
        assert_eq!(far.image.get_pixel(0, 0).0, [0, 0, 0]);
    }
}
