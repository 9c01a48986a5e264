//! Deterministic perception backed by precomputed files.
//!
//! A fixture set for one scene lives under `<root>/<scene_id>/`:
//!
//! ```text
//! detections.json    { "<frame_id>": [ {"label": "chair", "box": [x0,y0,x1,y1], "score": 0.92}, ... ], ... }
//! masks/index.json   [ {"frame_id": "00010", "box": [x0,y0,x1,y1], "file": "00010_0.png"}, ... ]
//! masks/<file>       8-bit gray PNG, nonzero pixels are mask-true
//! matches.json       { "<source_frame_id>": { "<target_frame_id>": [[su,sv,tu,tv], ...], ... }, ... }
//! ```
//!
//! All three files must exist; an absent per-frame entry means "no
//! detections" / "no matches" rather than an error. Mask lookups match the
//! requested box against the index within half a pixel per coordinate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BBox2, Detection2D, Detector, Mask2D, Matcher, PerceptionError, PixelPair, Segmenter};
use crate::scene::Frame;

/// Tolerance (pixels per coordinate) when matching a query box against the
/// mask index.
pub const MASK_BOX_TOL: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectionRecord {
    label: String,
    #[serde(rename = "box")]
    bbox: BBox2,
    score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskIndexEntry {
    frame_id: String,
    #[serde(rename = "box")]
    bbox: BBox2,
    file: String,
}

/// File-backed [`Detector`] + [`Segmenter`] + [`Matcher`] for one scene.
#[derive(Debug)]
pub struct FixturePerception {
    detections: BTreeMap<String, Vec<DetectionRecord>>,
    mask_dir: PathBuf,
    mask_index: Vec<MaskIndexEntry>,
    matches: BTreeMap<String, BTreeMap<String, Vec<[u32; 4]>>>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PerceptionError> {
    let text = std::fs::read_to_string(path).map_err(|source| PerceptionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| PerceptionError::MalformedFixture {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

impl FixturePerception {
    /// Loads the fixture set for `scene_id` under `root`.
    pub fn open(root: &Path, scene_id: &str) -> Result<FixturePerception, PerceptionError> {
        let dir = root.join(scene_id);
        let mask_dir = dir.join("masks");
        Ok(FixturePerception {
            detections: read_json(&dir.join("detections.json"))?,
            mask_index: read_json(&mask_dir.join("index.json"))?,
            mask_dir,
            matches: read_json(&dir.join("matches.json"))?,
        })
    }
}

impl Detector for FixturePerception {
    fn detect(&self, frame: &Frame, class: &str) -> Result<Vec<Detection2D>, PerceptionError> {
        Ok(self
            .detections
            .get(&frame.frame_id)
            .map(|records| {
                records
                    .iter()
                    .filter(|r| r.label.eq_ignore_ascii_case(class))
                    .map(|r| Detection2D {
                        frame_id: frame.frame_id.clone(),
                        label: r.label.clone(),
                        bbox: r.bbox,
                        score: r.score,
                    })
                    .collect()
            })
            .unwrap_or_default())
    }
}

impl Segmenter for FixturePerception {
    fn segment(&self, frame: &Frame, bbox: &BBox2) -> Result<Mask2D, PerceptionError> {
        let entry = self
            .mask_index
            .iter()
            .find(|e| e.frame_id == frame.frame_id && e.bbox.approx_eq(bbox, MASK_BOX_TOL))
            .ok_or_else(|| PerceptionError::MissingFixture {
                what: format!(
                    "mask for frame {} box [{}, {}, {}, {}]",
                    frame.frame_id, bbox.x0, bbox.y0, bbox.x1, bbox.y1
                ),
            })?;
        let path = self.mask_dir.join(&entry.file);
        let img = image::open(&path)
            .map_err(|source| PerceptionError::Image {
                path: path.clone(),
                source,
            })?
            .into_luma8();
        Ok(Mask2D::from_gray(frame.frame_id.clone(), &img))
    }
}

impl Matcher for FixturePerception {
    fn match_pair(
        &self,
        source: &Frame,
        target: &Frame,
    ) -> Result<Vec<PixelPair>, PerceptionError> {
        Ok(self
            .matches
            .get(&source.frame_id)
            .and_then(|m| m.get(&target.frame_id))
            .map(|pairs| {
                pairs
                    .iter()
                    .map(|&[su, sv, tu, tv]| PixelPair {
                        source: (su, sv),
                        target: (tu, tv),
                    })
                    .collect()
            })
            .unwrap_or_default())
    }
}

/// Writes a fixture set in the layout [`FixturePerception::open`] reads.
/// Masks are saved as `<frame_id>_<k>.png` in index order per frame.
pub struct FixtureWriter {
    dir: PathBuf,
    detections: BTreeMap<String, Vec<DetectionRecord>>,
    mask_index: Vec<MaskIndexEntry>,
    matches: BTreeMap<String, BTreeMap<String, Vec<[u32; 4]>>>,
    masks_per_frame: BTreeMap<String, usize>,
}

impl FixtureWriter {
    pub fn new(root: &Path, scene_id: &str) -> FixtureWriter {
        FixtureWriter {
            dir: root.join(scene_id),
            detections: BTreeMap::new(),
            mask_index: Vec::new(),
            matches: BTreeMap::new(),
            masks_per_frame: BTreeMap::new(),
        }
    }

    pub fn add_detection(&mut self, det: &Detection2D) {
        self.detections
            .entry(det.frame_id.clone())
            .or_default()
            .push(DetectionRecord {
                label: det.label.clone(),
                bbox: det.bbox,
                score: det.score,
            });
    }

    /// Registers `mask` as the segmentation answer for (`frame_id`, `bbox`).
    pub fn add_mask(&mut self, bbox: &BBox2, mask: &Mask2D) -> Result<(), PerceptionError> {
        let k = self
            .masks_per_frame
            .entry(mask.frame_id.clone())
            .or_insert(0);
        let file = format!("{}_{}.png", mask.frame_id, k);
        *k += 1;
        let mask_dir = self.dir.join("masks");
        std::fs::create_dir_all(&mask_dir).map_err(|source| PerceptionError::Io {
            path: mask_dir.clone(),
            source,
        })?;
        let path = mask_dir.join(&file);
        mask.to_gray()
            .save(&path)
            .map_err(|source| PerceptionError::Image { path, source })?;
        self.mask_index.push(MaskIndexEntry {
            frame_id: mask.frame_id.clone(),
            bbox: *bbox,
            file,
        });
        Ok(())
    }

    pub fn add_matches(&mut self, source: &str, target: &str, pairs: &[PixelPair]) {
        self.matches
            .entry(source.to_string())
            .or_default()
            .entry(target.to_string())
            .or_default()
            .extend(
                pairs
                    .iter()
                    .map(|p| [p.source.0, p.source.1, p.target.0, p.target.1]),
            );
    }

    /// Writes `detections.json`, `masks/index.json`, and `matches.json`.
    pub fn finish(self) -> Result<(), PerceptionError> {
        let mask_dir = self.dir.join("masks");
        std::fs::create_dir_all(&mask_dir).map_err(|source| PerceptionError::Io {
            path: mask_dir.clone(),
            source,
        })?;
        let write = |path: PathBuf, value: String| -> Result<(), PerceptionError> {
            std::fs::write(&path, value).map_err(|source| PerceptionError::Io { path, source })
        };
        write(
            self.dir.join("detections.json"),
            serde_json::to_string_pretty(&self.detections).expect("serializable"),
        )?;
        write(
            mask_dir.join("index.json"),
            serde_json::to_string_pretty(&self.mask_index).expect("serializable"),
        )?;
        write(
            self.dir.join("matches.json"),
            serde_json::to_string_pretty(&self.matches).expect("serializable"),
        )
    }
}
