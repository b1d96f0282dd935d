use image::{Rgb, RgbImage};
use poseguard_core::autolabel::{label_region, RegionLabel};
use poseguard_core::evaluation::{average_precision, ImageEval, Interpolation};
use poseguard_core::geometry::body25;
use poseguard_core::hand_region::{extract_hand_regions, hand_box_from_forearm, RegionParams};
use poseguard_core::keypoints::{parse_keypoint_file, KeypointFile};
use poseguard_core::pose_render::normalize_skeleton;
use poseguard_core::transforms::{darken, far_transform, hflip, rgb_to_hsv, FarPlacement, Sample};
use poseguard_core::{
    iomin, iou, BBox, Detection, GroundTruthBox, Keypoint2D, Skeleton, NUM_KEYPOINTS,
};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..500.0f64, 0.0..500.0f64, 0.5..200.0f64, 0.5..200.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

/// Boxes on a quarter-pixel grid, so halving and mirroring are exact.
fn dyadic_bbox(limit: i32) -> impl Strategy<Value = BBox> {
    (0..limit * 4, 0..limit * 4, 1..160i32, 1..160i32).prop_map(move |(x, y, w, h)| {
        let f = |v: i32| v as f64 / 4.0;
        let x1 = (x + w).min(limit * 4);
        let y1 = (y + h).min(limit * 4);
        BBox::new(f(x.min(x1 - 1)), f(y.min(y1 - 1)), f(x1), f(y1)).unwrap()
    })
}

fn keypoint() -> impl Strategy<Value = Keypoint2D> {
    prop_oneof![
        Just(Keypoint2D::UNDETECTED),
        (-50.0..700.0f64, -50.0..700.0f64, 0.01..=1.0f64)
            .prop_map(|(x, y, c)| Keypoint2D::new(x, y, c)),
    ]
}

fn skeleton() -> impl Strategy<Value = Skeleton> {
    prop::collection::vec(keypoint(), NUM_KEYPOINTS).prop_map(|kps| {
        let mut s = Skeleton::empty(0);
        s.keypoints.copy_from_slice(&kps);
        s
    })
}

fn gt(b: BBox) -> GroundTruthBox {
    GroundTruthBox {
        bbox: b,
        image_id: "img".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn overlap_measures_are_bounded_and_symmetric(a in bbox(), b in bbox()) {
        let (u, m) = (iou(&a, &b), iomin(&a, &b));
        prop_assert!((0.0..=1.0).contains(&u));
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(u, iou(&b, &a));
        prop_assert_eq!(m, iomin(&b, &a));
        prop_assert!(m >= u);
        prop_assert_eq!(iou(&a, &a), 1.0);
        prop_assert_eq!(iomin(&a, &a), 1.0);
    }

    #[test]
    fn iomin_is_one_for_nested_boxes(outer in bbox(), fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.05..1.0f64, fh in 0.05..1.0f64) {
        let x0 = outer.x_min() + fx * (1.0 - fw) * outer.width();
        let y0 = outer.y_min() + fy * (1.0 - fh) * outer.height();
        let inner = BBox::new(x0, y0, x0 + fw * outer.width(), y0 + fh * outer.height()).unwrap();
        prop_assume!(outer.contains(&inner));
        prop_assert!((iomin(&outer, &inner) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn keypoint_files_round_trip(people in prop::collection::vec(skeleton(), 0..4)) {
        let people: Vec<Skeleton> = people
            .into_iter()
            .enumerate()
            .map(|(i, mut s)| { s.person_id = i; s })
            .collect();
        let json = KeypointFile::from_skeletons(&people).to_json();
        prop_assert_eq!(parse_keypoint_file(json.as_bytes()).unwrap(), people);
    }

    #[test]
    fn labelling_is_monotone_in_threshold(region in bbox(), gts in prop::collection::vec(bbox(), 0..4), t in 0.01..1.0f64, lower in 0.0..1.0f64) {
        let gts: Vec<_> = gts.into_iter().map(gt).collect();
        if label_region(&region, &gts, t) == RegionLabel::Handgun {
            prop_assert_eq!(label_region(&region, &gts, t * lower), RegionLabel::Handgun);
        }
        prop_assert_eq!(label_region(&region, &[], t), RegionLabel::NoHandgun);
    }

    #[test]
    fn ap_ignores_monotone_score_rescaling(
        images in prop::collection::vec(
            (prop::collection::vec((bbox(), 0.0..1.0f64), 0..6), prop::collection::vec(bbox(), 0..4)),
            1..5,
        )
    ) {
        let build = |f: &dyn Fn(f64) -> f64| -> Vec<ImageEval> {
            images.iter().enumerate().map(|(i, (dets, gts))| ImageEval {
                image_id: i.to_string(),
                detections: dets.iter().map(|(b, s)| Detection::new(*b, f(*s)).unwrap()).collect(),
                ground_truths: gts.clone(),
            }).collect()
        };
        prop_assume!(images.iter().any(|(_, g)| !g.is_empty()));
        for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
            let base = average_precision(&build(&|s| s), 0.5, interp).unwrap();
            let halved = average_precision(&build(&|s| s * 0.5), 0.5, interp).unwrap();
            prop_assert!((0.0..=100.0).contains(&base));
            prop_assert_eq!(base, halved);
        }
    }

    #[test]
    fn normalization_ignores_translation_and_scale(s in skeleton(), dx in -300.0..300.0f64, dy in -300.0..300.0f64, k in 0.1..10.0f64) {
        let Ok(a) = normalize_skeleton(&s) else { return Ok(()); };
        let moved = s.map_positions(|x, y| (k * x + dx, k * y + dy));
        let b = normalize_skeleton(&moved).unwrap();
        for (p, q) in a.keypoints.iter().zip(&b.keypoints) {
            prop_assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
            prop_assert_eq!(p.confidence, q.confidence);
        }
        let hip = a.keypoints[body25::MID_HIP];
        prop_assert!((hip.x.hypot(hip.y) - 1.0).abs() < 1e-9);
        let neck = a.keypoints[body25::NECK];
        prop_assert_eq!((neck.x, neck.y), (0.0, 0.0));
    }

    #[test]
    fn hand_box_follows_the_forearm(ex in 0.0..600.0f64, ey in 0.0..600.0f64, dx in -80.0..80.0f64, dy in -80.0..80.0f64, tx in -100.0..100.0f64) {
        let params = RegionParams::default();
        let e = Keypoint2D::new(ex, ey, 0.9);
        let w = Keypoint2D::new(ex + dx, ey + dy, 0.9);
        let Some(b) = hand_box_from_forearm(&e, &w, &params) else {
            prop_assert_eq!(dx.hypot(dy), 0.0);
            return Ok(());
        };
        let len = (w.x - e.x).hypot(w.y - e.y);
        let (cx, cy) = b.center();
        prop_assert!((cx - (w.x + 0.5 * (w.x - e.x))).abs() < 1e-9);
        prop_assert!((cy - (w.y + 0.5 * (w.y - e.y))).abs() < 1e-9);
        prop_assert!((b.width() - 1.5 * len).abs() < 1e-9);
        prop_assert!((b.height() - 1.5 * len).abs() < 1e-9);

        let shifted = hand_box_from_forearm(
            &Keypoint2D::new(e.x + tx, e.y, 0.9),
            &Keypoint2D::new(w.x + tx, w.y, 0.9),
            &params,
        ).unwrap();
        prop_assert!((shifted.x_min() - b.x_min() - tx).abs() < 1e-9);
        prop_assert!((shifted.y_min() - b.y_min()).abs() < 1e-9);
    }

    #[test]
    fn at_most_two_regions_per_person(s in skeleton()) {
        let regions = extract_hand_regions(&s, &RegionParams::default());
        prop_assert!(regions.len() <= 2);
    }

    #[test]
    fn flip_is_an_involution(boxes in prop::collection::vec(dyadic_bbox(64), 0..4), seed in any::<u8>()) {
        let image = RgbImage::from_fn(64, 48, |x, y| Rgb([x as u8 ^ seed, y as u8, (x + y) as u8]));
        let mut s = Skeleton::empty(0);
        s.keypoints[body25::R_WRIST] = Keypoint2D::new(12.25, 30.5, 0.8);
        let sample = Sample { image, boxes: boxes.into_iter().map(gt).collect(), skeletons: vec![s] };
        let once = hflip(&sample);
        prop_assert_eq!(hflip(&once), sample);
    }

    #[test]
    fn far_preserves_relative_overlap(a in dyadic_bbox(64), b in dyadic_bbox(64), center in any::<bool>()) {
        let placement = if center { FarPlacement::Center } else { FarPlacement::TopLeft };
        let sample = Sample { image: RgbImage::new(64, 64), boxes: vec![gt(a), gt(b)], skeletons: vec![] };
        let far = far_transform(&sample, placement).unwrap();
        prop_assert_eq!(far.image.dimensions(), (64, 64));
        let (fa, fb) = (far.boxes[0].bbox, far.boxes[1].bbox);
        prop_assert_eq!(iomin(&fa, &fb), iomin(&a, &b));
        prop_assert_eq!(fa.width(), a.width() / 2.0);
    }

    #[test]
    fn darkening_never_brightens(pixels in prop::collection::vec(any::<[u8; 3]>(), 16), hi in 0.05..=1.0f64, frac in 0.0..=1.0f64) {
        let image = RgbImage::from_fn(4, 4, |x, y| Rgb(pixels[(y * 4 + x) as usize]));
        let lo = (hi * frac).max(0.01);
        let (dh, dl) = (darken(&image, hi).unwrap(), darken(&image, lo).unwrap());
        let v = |p: &Rgb<u8>| rgb_to_hsv(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0).2;
        for ((o, h), l) in image.pixels().zip(dh.pixels()).zip(dl.pixels()) {
            prop_assert!(v(h) <= v(o) + 1.0 / 255.0);
            prop_assert!(v(l) <= v(h) + 1.0 / 255.0);
        }
    }
}
