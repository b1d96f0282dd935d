//! Pose normalization and binary pose images.
//!
//! A skeleton is expressed relative to its neck and scaled by the neck to
//! mid-hip distance, drawn on a 512x512 binary canvas with the neck at the
//! centre, and split into two 256x512 halves. Each hand region is paired
//! with the half containing its wrist.

use std::io::{self, Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{body25, Keypoint2D, Skeleton, NUM_KEYPOINTS};
use crate::hand_region::HandRegion;

pub const CANVAS_SIZE: usize = 512;
pub const HALF_WIDTH: usize = CANVAS_SIZE / 2;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("cannot normalize skeleton {person_id}: {missing} keypoint not detected")]
    MissingReference {
        person_id: usize,
        missing: &'static str,
    },
    #[error("cannot normalize skeleton {person_id}: neck and mid-hip coincide")]
    Degenerate { person_id: usize },
    #[error("anchor wrist (keypoint {index}) is not defined in the normalized skeleton")]
    UndefinedWrist { index: usize },
    #[error("pose image: {0}")]
    Png(String),
    #[error("pose image has size {width}x{height}, expected {expected_w}x{expected_h}")]
    Size {
        width: u32,
        height: u32,
        expected_w: u32,
        expected_h: u32,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Keypoints in neck-relative units of the neck to mid-hip distance.
/// Undefined keypoints keep the `(0, 0, 0)` encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSkeleton {
    pub keypoints: [Keypoint2D; NUM_KEYPOINTS],
    pub person_id: usize,
}

impl NormalizedSkeleton {
    pub fn is_defined(&self, index: usize) -> bool {
        self.keypoints[index].is_detected()
    }
}

pub fn normalize_skeleton(s: &Skeleton) -> Result<NormalizedSkeleton, RenderError> {
    let neck = s.keypoints[body25::NECK];
    let hip = s.keypoints[body25::MID_HIP];
    if !neck.is_detected() {
        return Err(RenderError::MissingReference {
            person_id: s.person_id,
            missing: "neck",
        });
    }
    if !hip.is_detected() {
        return Err(RenderError::MissingReference {
            person_id: s.person_id,
            missing: "mid-hip",
        });
    }
    let scale = (hip.x - neck.x).hypot(hip.y - neck.y);
    if scale == 0.0 || !scale.is_finite() {
        return Err(RenderError::Degenerate {
            person_id: s.person_id,
        });
    }
    let mut keypoints = [Keypoint2D::UNDETECTED; NUM_KEYPOINTS];
    for (out, kp) in keypoints.iter_mut().zip(&s.keypoints) {
        if kp.is_detected() {
            *out = Keypoint2D {
                x: (kp.x - neck.x) / scale,
                y: (kp.y - neck.y) / scale,
                confidence: kp.confidence,
            };
        }
    }
    Ok(NormalizedSkeleton {
        keypoints,
        person_id: s.person_id,
    })
}

/// Drawing parameters for pose canvases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderStyle {
    pub px_per_unit: f64,
    pub limb_thickness: f64,
    pub point_radius: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            px_per_unit: 80.0,
            limb_thickness: 4.0,
            point_radius: 4.0,
        }
    }
}

impl RenderStyle {
    pub fn to_canvas(&self, kp: &Keypoint2D) -> (f64, f64) {
        let c = HALF_WIDTH as f64;
        (c + self.px_per_unit * kp.x, c + self.px_per_unit * kp.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HalfSide {
    Left,
    Right,
}

/// Row-major binary raster; every cell is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryRaster {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize) {
        self.data[y * self.width + x] = 1;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    fn columns(&self, start: usize, width: usize) -> BinaryRaster {
        let mut out = BinaryRaster::zeros(width, self.height);
        for y in 0..self.height {
            let row = &self.data[y * self.width + start..y * self.width + start + width];
            out.data[y * width..(y + 1) * width].copy_from_slice(row);
        }
        out
    }

    /// Fills every pixel whose centre lies within `radius` of segment `a`-`b`.
    /// Works row by row: a capsule is convex, so each row crossing is a single span.
    fn fill_capsule(&mut self, a: (f64, f64), b: (f64, f64), radius: f64) {
        if radius < 0.0 || !radius.is_finite() {
            return;
        }
        let y_lo = a.1.min(b.1) - radius;
        let y_hi = a.1.max(b.1) + radius;
        let row_start = (y_lo - 0.5).ceil().max(0.0);
        let row_end = (y_hi - 0.5).floor().min(self.height as f64 - 1.0);
        if !(row_start <= row_end) {
            return;
        }
        for row in row_start as usize..=row_end as usize {
            let yc = row as f64 + 0.5;
            let Some((lo, hi)) = capsule_span(a, b, radius, yc) else {
                continue;
            };
            let first = (lo - 0.5).ceil().max(0.0);
            let last = (hi - 0.5).floor().min(self.width as f64 - 1.0);
            if first <= last {
                let base = row * self.width;
                self.data[base + first as usize..=base + last as usize].fill(1);
            }
        }
    }

    /// Writes the raster as a 1-bit grayscale PNG.
    pub fn write_png<W: Write>(&self, out: W) -> Result<(), RenderError> {
        let mut enc = png::Encoder::new(out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc
            .write_header()
            .map_err(|e| RenderError::Png(e.to_string()))?;
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != 0 {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer
            .write_image_data(&packed)
            .map_err(|e| RenderError::Png(e.to_string()))?;
        writer.finish().map_err(|e| RenderError::Png(e.to_string()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RenderError> {
        let mut buf = Vec::new();
        self.write_png(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a 1-bit (or 8-bit, thresholded at nonzero) grayscale PNG.
    pub fn read_png(bytes: &[u8]) -> Result<Self, RenderError> {
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND);
        let mut reader = dec
            .read_info()
            .map_err(|e| RenderError::Png(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| RenderError::Png("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| RenderError::Png(e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(RenderError::Png(format!(
                "expected grayscale pose image, found {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        let (width, height) = (info.width as usize, info.height as usize);
        let mut out = BinaryRaster::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                if buf[y * info.line_size + x] != 0 {
                    out.set(x, y);
                }
            }
        }
        Ok(out)
    }

    pub fn load_png(path: &Path) -> Result<Self, RenderError> {
        Self::read_png(&std::fs::read(path)?)
    }
}

/// Span `[lo, hi]` of x on the horizontal line `y = yc` within `radius` of segment `a`-`b`.
fn capsule_span(a: (f64, f64), b: (f64, f64), radius: f64, yc: f64) -> Option<(f64, f64)> {
    let mut span: Option<(f64, f64)> = None;
    let mut merge = |lo: f64, hi: f64| {
        if lo <= hi {
            span = Some(match span {
                Some((l, h)) => (l.min(lo), h.max(hi)),
                None => (lo, hi),
            });
        }
    };
    for p in [a, b] {
        let dy = yc - p.1;
        let rem = radius * radius - dy * dy;
        if rem >= 0.0 {
            let half = rem.sqrt();
            merge(p.0 - half, p.0 + half);
        }
    }

    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 > 0.0 {
        let ry = yc - a.1;
        // projection: 0 <= (x - ax) dx + ry dy <= len2
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        let mut feasible = true;
        let mut bound = |coef: f64, offset: f64, min: f64, max: f64| {
            // min <= coef * x + offset <= max
            if coef == 0.0 {
                if offset < min || offset > max {
                    feasible = false;
                }
            } else {
                let (x1, x2) = ((min - offset) / coef, (max - offset) / coef);
                lo = lo.max(x1.min(x2));
                hi = hi.min(x1.max(x2));
            }
        };
        bound(dx, -a.0 * dx + ry * dy, 0.0, len2);
        // perpendicular: |(x - ax) dy - ry dx| <= r |d|
        let reach = radius * len2.sqrt();
        bound(dy, -a.0 * dy - ry * dx, -reach, reach);
        if feasible {
            merge(lo, hi);
        }
    }
    span
}

/// 512x512 binary raster of a normalized skeleton.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoseCanvas(BinaryRaster);

impl PoseCanvas {
    pub fn blank() -> Self {
        Self(BinaryRaster::zeros(CANVAS_SIZE, CANVAS_SIZE))
    }

    pub fn raster(&self) -> &BinaryRaster {
        &self.0
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.0.get(x, y)
    }
}

/// One 256-wide, 512-tall half of a pose canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoseHalf {
    pub side: HalfSide,
    raster: BinaryRaster,
}

impl PoseHalf {
    pub fn blank(side: HalfSide) -> Self {
        Self {
            side,
            raster: BinaryRaster::zeros(HALF_WIDTH, CANVAS_SIZE),
        }
    }

    /// Wraps a raster, checking its 256x512 shape.
    pub fn from_raster(side: HalfSide, raster: BinaryRaster) -> Result<Self, RenderError> {
        if raster.width() != HALF_WIDTH || raster.height() != CANVAS_SIZE {
            return Err(RenderError::Size {
                width: raster.width() as u32,
                height: raster.height() as u32,
                expected_w: HALF_WIDTH as u32,
                expected_h: CANVAS_SIZE as u32,
            });
        }
        Ok(Self { side, raster })
    }

    pub fn raster(&self) -> &BinaryRaster {
        &self.raster
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.raster.get(x, y)
    }
}

/// Draws discs at defined keypoints and thick segments along defined limbs.
pub fn render_canvas(ns: &NormalizedSkeleton, style: &RenderStyle) -> PoseCanvas {
    let mut raster = BinaryRaster::zeros(CANVAS_SIZE, CANVAS_SIZE);
    let limb_radius = style.limb_thickness / 2.0;
    for &(i, j) in body25::LIMBS.iter() {
        if ns.is_defined(i) && ns.is_defined(j) {
            raster.fill_capsule(
                style.to_canvas(&ns.keypoints[i]),
                style.to_canvas(&ns.keypoints[j]),
                limb_radius,
            );
        }
    }
    for kp in ns.keypoints.iter().filter(|k| k.is_detected()) {
        let p = style.to_canvas(kp);
        raster.fill_capsule(p, p, style.point_radius);
    }
    PoseCanvas(raster)
}

/// Columns `[0, 256)` and `[256, 512)`.
pub fn split_canvas(c: &PoseCanvas) -> (PoseHalf, PoseHalf) {
    (
        PoseHalf {
            side: HalfSide::Left,
            raster: c.0.columns(0, HALF_WIDTH),
        },
        PoseHalf {
            side: HalfSide::Right,
            raster: c.0.columns(HALF_WIDTH, HALF_WIDTH),
        },
    )
}

/// Half containing the region's anchor wrist; canvas x = 256 goes right.
pub fn select_half(
    region: &HandRegion,
    ns: &NormalizedSkeleton,
    c: &PoseCanvas,
    style: &RenderStyle,
) -> Result<PoseHalf, RenderError> {
    let index = region.anchor_index;
    if index >= NUM_KEYPOINTS || !ns.is_defined(index) {
        return Err(RenderError::UndefinedWrist { index });
    }
    let (x, _) = style.to_canvas(&ns.keypoints[index]);
    let (left, right) = split_canvas(c);
    Ok(if x < HALF_WIDTH as f64 { left } else { right })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::hand_region::HandSide;

    fn skeleton_with(points: &[(usize, f64, f64)]) -> Skeleton {
        let mut s = Skeleton::empty(0);
        for &(i, x, y) in points {
            s.keypoints[i] = Keypoint2D::new(x, y, 0.9);
        }
        s
    }

    /// Per-pixel reference: pixel centre within `r` of the segment.
    fn oracle_capsule(raster: &mut BinaryRaster, a: (f64, f64), b: (f64, f64), r: f64) {
        for y in 0..raster.height() {
            for x in 0..raster.width() {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let d = (b.0 - a.0, b.1 - a.1);
                let len2 = d.0 * d.0 + d.1 * d.1;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((p.0 - a.0) * d.0 + (p.1 - a.1) * d.1) / len2).clamp(0.0, 1.0)
                };
                let q = (a.0 + t * d.0, a.1 + t * d.1);
                if (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) <= r * r {
                    raster.set(x, y);
                }
            }
        }
    }

    #[test]
    fn neck_maps_to_origin() {
        let s = skeleton_with(&[
            (body25::NECK, 100.0, 100.0),
            (body25::MID_HIP, 100.0, 180.0),
        ]);
        let ns = normalize_skeleton(&s).unwrap();
        assert_eq!(ns.keypoints[body25::NECK].x, 0.0);
        assert_eq!(ns.keypoints[body25::NECK].y, 0.0);
        assert_eq!(ns.keypoints[body25::MID_HIP].y, 1.0);
    }

    #[test]
    fn normalization_example() {
        let s = skeleton_with(&[
            (body25::NECK, 100.0, 100.0),
            (body25::MID_HIP, 100.0, 180.0),
            (body25::R_WRIST, 140.0, 100.0),
        ]);
        let ns = normalize_skeleton(&s).unwrap();
        assert_eq!(ns.keypoints[body25::R_WRIST].x, 0.5);
        assert_eq!(ns.keypoints[body25::R_WRIST].y, 0.0);
        assert_eq!(ns.keypoints[body25::R_WRIST].confidence, 0.9);
        assert!(!ns.is_defined(body25::L_WRIST));

        let moved = s.map_positions(|x, y| (x + 50.0, y + 50.0));
        assert_eq!(normalize_skeleton(&moved).unwrap(), ns);
    }

    #[test]
    fn normalization_errors() {
        let s = skeleton_with(&[(body25::NECK, 100.0, 100.0)]);
        assert!(matches!(
            normalize_skeleton(&s),
            Err(RenderError::MissingReference {
                missing: "mid-hip",
                ..
            })
        ));
        let s = skeleton_with(&[(body25::MID_HIP, 100.0, 100.0)]);
        assert!(matches!(
            normalize_skeleton(&s),
            Err(RenderError::MissingReference {
                missing: "neck",
                ..
            })
        ));
        let s = skeleton_with(&[(body25::NECK, 10.0, 10.0), (body25::MID_HIP, 10.0, 10.0)]);
        assert!(matches!(
            normalize_skeleton(&s),
            Err(RenderError::Degenerate { .. })
        ));
    }

    fn neck_only() -> NormalizedSkeleton {
        let mut keypoints = [Keypoint2D::UNDETECTED; NUM_KEYPOINTS];
        keypoints[body25::NECK] = Keypoint2D::new(0.0, 0.0, 1.0);
        NormalizedSkeleton {
            keypoints,
            person_id: 0,
        }
    }

    #[test]
    fn single_disc_at_centre() {
        let style = RenderStyle::default();
        let canvas = render_canvas(&neck_only(), &style);
        let mut expected = BinaryRaster::zeros(CANVAS_SIZE, CANVAS_SIZE);
        oracle_capsule(&mut expected, (256.0, 256.0), (256.0, 256.0), 4.0);
        assert_eq!(canvas.raster(), &expected);
        // symmetric about the centre
        assert_eq!(canvas.get(255, 255), 1);
        assert_eq!(canvas.get(252, 256), 1);
        assert_eq!(canvas.get(259, 256), 1);
        assert_eq!(canvas.get(260, 256), 0);
    }

    #[test]
    fn empty_skeleton_renders_blank() {
        let ns = NormalizedSkeleton {
            keypoints: [Keypoint2D::UNDETECTED; NUM_KEYPOINTS],
            person_id: 0,
        };
        assert_eq!(
            render_canvas(&ns, &RenderStyle::default())
                .raster()
                .count_ones(),
            0
        );
    }

    #[test]
    fn neck_and_hip_match_reference_rasterizer() {
        let s = skeleton_with(&[(body25::NECK, 37.0, 12.0), (body25::MID_HIP, 49.0, 95.0)]);
        let ns = normalize_skeleton(&s).unwrap();
        let style = RenderStyle::default();
        let canvas = render_canvas(&ns, &style);

        let a = style.to_canvas(&ns.keypoints[body25::NECK]);
        let b = style.to_canvas(&ns.keypoints[body25::MID_HIP]);
        let mut expected = BinaryRaster::zeros(CANVAS_SIZE, CANVAS_SIZE);
        oracle_capsule(&mut expected, a, b, 2.0);
        oracle_capsule(&mut expected, a, a, 4.0);
        oracle_capsule(&mut expected, b, b, 4.0);
        assert_eq!(canvas.raster(), &expected);

        let mut disc = BinaryRaster::zeros(CANVAS_SIZE, CANVAS_SIZE);
        oracle_capsule(&mut disc, a, a, 4.0);
        assert!(canvas.raster().count_ones() > 2 * disc.count_ones());
    }

    #[test]
    fn capsule_matches_oracle_across_angles() {
        let mut i = 0;
        for &(ax, ay, bx, by, r) in &[
            (10.3, 20.7, 90.1, 33.3, 2.0),
            (50.0, 50.0, 50.0, 120.0, 2.0),
            (50.0, 50.0, 120.0, 50.0, 3.5),
            (-20.0, 30.0, 60.0, -10.0, 2.0),
            (100.2, 3.9, 4.4, 100.9, 4.0),
            (60.5, 60.5, 60.5, 60.5, 4.0),
        ] {
            let mut fast = BinaryRaster::zeros(128, 128);
            fast.fill_capsule((ax, ay), (bx, by), r);
            let mut slow = BinaryRaster::zeros(128, 128);
            oracle_capsule(&mut slow, (ax, ay), (bx, by), r);
            assert_eq!(fast, slow, "case {i}");
            i += 1;
        }
    }

    #[test]
    fn out_of_canvas_geometry_is_clipped() {
        let mut keypoints = [Keypoint2D::UNDETECTED; NUM_KEYPOINTS];
        keypoints[body25::NECK] = Keypoint2D::new(0.0, 0.0, 1.0);
        keypoints[body25::MID_HIP] = Keypoint2D::new(0.0, 10.0, 1.0);
        let ns = NormalizedSkeleton {
            keypoints,
            person_id: 0,
        };
        let canvas = render_canvas(&ns, &RenderStyle::default());
        assert_eq!(canvas.get(256, 511), 1);
    }

    #[test]
    fn split_boundary_columns() {
        let (l, r) = split_canvas(&PoseCanvas::blank());
        assert_eq!(l.raster().count_ones() + r.raster().count_ones(), 0);

        let mut raster = BinaryRaster::zeros(CANVAS_SIZE, CANVAS_SIZE);
        raster.set(255, 7);
        let (l, r) = split_canvas(&PoseCanvas(raster));
        assert_eq!(l.get(255, 7), 1);
        assert_eq!(r.raster().count_ones(), 0);

        let mut raster = BinaryRaster::zeros(CANVAS_SIZE, CANVAS_SIZE);
        raster.set(256, 9);
        let (l, r) = split_canvas(&PoseCanvas(raster));
        assert_eq!(l.raster().count_ones(), 0);
        assert_eq!(r.get(0, 9), 1);
        assert_eq!(l.raster().width(), 256);
        assert_eq!(l.raster().height(), 512);
    }

    fn region_for(anchor_index: usize) -> HandRegion {
        HandRegion {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            person_id: 0,
            side: HandSide::Right,
            anchor_wrist: Keypoint2D::new(0.0, 0.0, 1.0),
            anchor_index,
        }
    }

    #[test]
    fn half_selection_by_wrist_column() {
        let style = RenderStyle::default();
        for (kx, expected) in [
            (-1.0, HalfSide::Left),
            (1.0, HalfSide::Right),
            (0.0, HalfSide::Right),
        ] {
            let mut ns = neck_only();
            ns.keypoints[body25::R_WRIST] = Keypoint2D::new(kx, 0.5, 0.8);
            let canvas = render_canvas(&ns, &style);
            let half = select_half(&region_for(body25::R_WRIST), &ns, &canvas, &style).unwrap();
            assert_eq!(half.side, expected, "kx = {kx}");
        }
        let ns = neck_only();
        let canvas = render_canvas(&ns, &style);
        assert!(matches!(
            select_half(&region_for(body25::L_WRIST), &ns, &canvas, &style),
            Err(RenderError::UndefinedWrist { index: 7 })
        ));
    }

    #[test]
    fn one_bit_png_round_trip() {
        let s = skeleton_with(&[
            (body25::NECK, 100.0, 100.0),
            (body25::MID_HIP, 100.0, 180.0),
            (body25::R_ELBOW, 60.0, 120.0),
            (body25::R_WRIST, 30.0, 100.0),
        ]);
        let canvas = render_canvas(&normalize_skeleton(&s).unwrap(), &RenderStyle::default());
        let (left, _) = split_canvas(&canvas);
        let mut buf = Vec::new();
        left.raster().write_png(&mut buf).unwrap();
        // 1-bit rows: 32 bytes for 256 pixels
        assert!(buf.len() < 512 * 32 + 1024);
        let back = BinaryRaster::read_png(&buf).unwrap();
        assert_eq!(&back, left.raster());
    }
}
