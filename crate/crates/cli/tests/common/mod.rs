//! Synthetic images with skeletons and ground truth, written as a manifest.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use poseguard_core::geometry::body25;
use poseguard_core::keypoints::KeypointFile;
use poseguard_core::{Keypoint2D, Skeleton};

pub const WIDTH: u32 = 320;
pub const HEIGHT: u32 = 240;

#[derive(Debug, Clone, Copy)]
pub struct Person {
    /// Neck x.
    pub x: f64,
    /// Right arm stretched out horizontally (towards smaller x).
    pub aiming: bool,
    /// Draw a bright block in the right hand and annotate it.
    pub gun: bool,
    pub with_mid_hip: bool,
}

impl Person {
    pub fn new(x: f64, aiming: bool, gun: bool) -> Self {
        Self {
            x,
            aiming,
            gun,
            with_mid_hip: true,
        }
    }

    pub fn skeleton(&self, id: usize) -> Skeleton {
        let mut s = Skeleton::empty(id);
        let x = self.x;
        let mut put = |i: usize, px: f64, py: f64| s.keypoints[i] = Keypoint2D::new(px, py, 0.9);
        put(body25::NECK, x, 80.0);
        if self.with_mid_hip {
            put(body25::MID_HIP, x, 160.0);
        }
        put(body25::R_SHOULDER, x - 20.0, 80.0);
        put(body25::L_SHOULDER, x + 20.0, 80.0);
        put(body25::L_ELBOW, x + 24.0, 120.0);
        put(body25::L_WRIST, x + 28.0, 156.0);
        if self.aiming {
            put(body25::R_ELBOW, x - 60.0, 80.0);
            put(body25::R_WRIST, x - 100.0, 80.0);
        } else {
            put(body25::R_ELBOW, x - 24.0, 120.0);
            put(body25::R_WRIST, x - 28.0, 156.0);
        }
        s
    }

    /// Ground-truth box of the gun: centred in the right hand region.
    pub fn gun_box(&self) -> [f64; 4] {
        let (cx, cy) = if self.aiming {
            (self.x - 120.0, 80.0)
        } else {
            (self.x - 30.0, 174.0)
        };
        [cx - 22.0, cy - 16.0, cx + 22.0, cy + 16.0]
    }
}

pub fn draw(people: &[Person]) -> RgbImage {
    let mut img = RgbImage::from_fn(WIDTH, HEIGHT, |x, y| {
        let v = 70 + ((x * 7 + y * 3) % 23) as u8;
        Rgb([v, v + 5, v])
    });
    for p in people.iter().filter(|p| p.gun) {
        let [x0, y0, x1, y1] = p.gun_box();
        for y in y0 as u32..y1 as u32 {
            for x in x0 as u32..x1 as u32 {
                img.put_pixel(x, y, Rgb([245, 240, 235]));
            }
        }
    }
    img
}

/// Writes images, keypoint files and `manifest.jsonl` under `dir`; returns
/// the manifest path.
pub fn write_fixture(dir: &Path, images: &[(&str, Vec<Person>)]) -> PathBuf {
    fs::create_dir_all(dir.join("img")).unwrap();
    fs::create_dir_all(dir.join("kp")).unwrap();
    let mut manifest = String::new();
    for (id, people) in images {
        draw(people)
            .save(dir.join(format!("img/{id}.png")))
            .unwrap();
        let skeletons: Vec<Skeleton> = people
            .iter()
            .enumerate()
            .map(|(i, p)| p.skeleton(i))
            .collect();
        fs::write(
            dir.join(format!("kp/{id}.json")),
            KeypointFile::from_skeletons(&skeletons).to_json(),
        )
        .unwrap();
        let boxes: Vec<[f64; 4]> = people
            .iter()
            .filter(|p| p.gun)
            .map(Person::gun_box)
            .collect();
        manifest.push_str(&format!(
            "{{\"image\": \"img/{id}.png\", \"keypoints\": \"kp/{id}.json\", \"boxes\": {}}}\n",
            serde_json::to_string(&boxes).unwrap()
        ));
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, manifest).unwrap();
    path
}

pub fn write_empty_manifest(dir: &Path) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("empty.jsonl");
    fs::write(&path, "").unwrap();
    path
}

/// Three scenes: one armed aiming person, one unarmed person, and an armed
/// person next to an unarmed one.
pub fn scenes() -> Vec<(&'static str, Vec<Person>)> {
    vec![
        ("armed", vec![Person::new(200.0, true, true)]),
        ("unarmed", vec![Person::new(160.0, false, false)]),
        (
            "pair",
            vec![
                Person::new(150.0, true, true),
                Person::new(270.0, false, false),
            ],
        ),
    ]
}

/// Training scenes with balanced armed and unarmed hands.
pub fn training_scenes() -> Vec<(String, Vec<Person>)> {
    (0..6)
        .map(|i| {
            let x = 170.0 + 10.0 * i as f64;
            (
                format!("train{i}"),
                vec![Person::new(x, i % 2 == 0, i % 2 == 0)],
            )
        })
        .collect()
}
