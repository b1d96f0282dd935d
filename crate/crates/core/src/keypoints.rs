//! Pose-estimator keypoint files and the dataset manifest.
//!
//! Keypoint files follow the BODY_25 JSON layout: a top-level `people` array
//! whose entries carry `pose_keypoints_2d`, a flat list of 75 numbers in
//! `(x, y, confidence) x 25` order. Other keys are ignored.
//!
//! The manifest is JSON Lines, one image per line:
//!
//! ```text
//! {"image": "img/0001.png", "keypoints": "kp/0001.json", "boxes": [[10, 10, 50, 60]]}
//! ```
//!
//! An optional `id` field names the image; it defaults to the image file stem.
//! Relative paths resolve against the manifest's directory. Blank lines and
//! lines starting with `#` are skipped.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GroundTruthBox, Keypoint2D, Skeleton, NUM_KEYPOINTS};

const VALUES_PER_PERSON: usize = NUM_KEYPOINTS * 3;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("keypoint file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("keypoint file has no `people` array")]
    MissingPeople,
    #[error("person record {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("person record {index}: expected {VALUES_PER_PERSON} keypoint values, found {found}")]
    Schema { index: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("manifest line {line} ({image_id}): referenced file {path} does not exist")]
    MissingFile {
        line: usize,
        image_id: String,
        path: PathBuf,
    },
    #[error("manifest line {line} ({image_id}): invalid box {values:?}")]
    InvalidBox {
        line: usize,
        image_id: String,
        values: Vec<f64>,
    },
}

/// Raw per-person record of a keypoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub pose_keypoints_2d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub people: Vec<PersonRecord>,
}

impl KeypointFile {
    pub fn from_skeletons(skeletons: &[Skeleton]) -> Self {
        let people = skeletons
            .iter()
            .map(|s| PersonRecord {
                pose_keypoints_2d: s
                    .keypoints
                    .iter()
                    .flat_map(|k| [k.x, k.y, k.confidence])
                    .collect(),
            })
            .collect();
        Self { people }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("keypoint file serialization cannot fail")
    }
}

/// Parses a keypoint file into one skeleton per person, in file order.
pub fn parse_keypoint_file(bytes: &[u8]) -> Result<Vec<Skeleton>, IngestError> {
    let root: serde_json::Value = serde_json::from_slice(bytes)?;
    let people = root
        .get("people")
        .and_then(|p| p.as_array())
        .ok_or(IngestError::MissingPeople)?;

    people
        .iter()
        .enumerate()
        .map(|(index, person)| {
            let values = person
                .get("pose_keypoints_2d")
                .and_then(|v| v.as_array())
                .ok_or_else(|| IngestError::Record {
                    index,
                    reason: "missing `pose_keypoints_2d` array".into(),
                })?;
            if values.len() != VALUES_PER_PERSON {
                return Err(IngestError::Schema {
                    index,
                    found: values.len(),
                });
            }
            let flat = values
                .iter()
                .map(|v| v.as_f64())
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| IngestError::Record {
                    index,
                    reason: "non-numeric keypoint value".into(),
                })?;
            let mut skeleton = Skeleton::empty(index);
            for (slot, triple) in skeleton.keypoints.iter_mut().zip(flat.chunks_exact(3)) {
                *slot = Keypoint2D::new(triple[0], triple[1], triple[2]);
            }
            Ok(skeleton)
        })
        .collect()
}

pub fn read_keypoint_file(path: &Path) -> Result<Vec<Skeleton>, IngestError> {
    let bytes = fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_keypoint_file(&bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    image: String,
    keypoints: String,
    #[serde(default)]
    boxes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image: PathBuf,
    pub keypoints: PathBuf,
    pub boxes: Vec<GroundTruthBox>,
}

impl ManifestEntry {
    pub fn load_skeletons(&self) -> Result<Vec<Skeleton>, IngestError> {
        read_keypoint_file(&self.keypoints)
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|g| g.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_boxes(&self) -> usize {
        self.entries.iter().map(|e| e.boxes.len()).sum()
    }

    pub fn find(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads and validates a manifest. Every referenced file must exist, every
/// box must have positive area and image ids must be unique.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest, IngestError> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(trimmed).map_err(|e| IngestError::Manifest {
                line,
                reason: e.to_string(),
            })?;
        let image = resolve(base, &record.image);
        let keypoints = resolve(base, &record.keypoints);
        let image_id = match record.id {
            Some(id) => id,
            None => image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| IngestError::Manifest {
                    line,
                    reason: format!("cannot derive an id from image path {:?}", record.image),
                })?,
        };
        if !seen.insert(image_id.clone()) {
            return Err(IngestError::Manifest {
                line,
                reason: format!("duplicate image id {image_id:?}"),
            });
        }
        for p in [&image, &keypoints] {
            if !p.is_file() {
                return Err(IngestError::MissingFile {
                    line,
                    image_id,
                    path: p.clone(),
                });
            }
        }
        let boxes = record
            .boxes
            .iter()
            .map(|values| {
                let invalid = || IngestError::InvalidBox {
                    line,
                    image_id: image_id.clone(),
                    values: values.clone(),
                };
                let arr: [f64; 4] = values.as_slice().try_into().map_err(|_| invalid())?;
                let bbox = BBox::try_from(arr).map_err(|_| invalid())?;
                Ok(GroundTruthBox {
                    bbox,
                    image_id: image_id.clone(),
                })
            })
            .collect::<Result<Vec<_>, IngestError>>()?;
        entries.push(ManifestEntry {
            image_id,
            image,
            keypoints,
            boxes,
        });
    }
    Ok(DatasetManifest { entries })
}

/// Serializes a manifest with paths made relative to `base` where possible.
pub fn manifest_to_string(manifest: &DatasetManifest, base: &Path) -> String {
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::new();
    for e in &manifest.entries {
        let record = ManifestRecord {
            id: Some(e.image_id.clone()),
            image: rel(&e.image),
            keypoints: rel(&e.keypoints),
            boxes: e.boxes.iter().map(|g| g.bbox.to_array().to_vec()).collect(),
        };
        out.push_str(&serde_json::to_string(&record).expect("manifest record serializes"));
        out.push('\n');
    }
    out
}
