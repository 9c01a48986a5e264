//! 2D perception interfaces: open-vocabulary detection, box-prompted
//! segmentation, and cross-view pixel matching.
//!
//! The pipeline only depends on the three traits here. Deterministic
//! fixture-backed implementations live in [`fixtures`]; thin HTTP clients for
//! real model servers live in [`http`].

pub mod fixtures;
pub mod http;

use std::collections::BTreeMap;
use std::path::PathBuf;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Frame, Scene};
use crate::text;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("malformed fixture {path}: {detail}")]
    MalformedFixture { path: PathBuf, detail: String },
    #[error("no fixture entry for {what}")]
    MissingFixture { what: String },
    #[error("segmenter returned an empty mask for frame {frame_id}")]
    EmptyMask { frame_id: String },
    #[error("http error calling {url}: {detail}")]
    Http { url: String, detail: String },
}

/// Axis-aligned 2D box in pixel coordinates, `[x0, y0, x1, y1]`, end-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox2 {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox2 {
    fn from(v: [f64; 4]) -> Self {
        BBox2 {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<BBox2> for [f64; 4] {
    fn from(b: BBox2) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox2 {
    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// True when the center of pixel `(u, v)` falls inside the box.
    pub fn contains_pixel(&self, u: u32, v: u32) -> bool {
        let (x, y) = (u as f64 + 0.5, v as f64 + 0.5);
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }

    /// Componentwise closeness, used to key fixture lookups robustly.
    pub fn approx_eq(&self, other: &BBox2, tol: f64) -> bool {
        (self.x0 - other.x0).abs() <= tol
            && (self.y0 - other.y0).abs() <= tol
            && (self.x1 - other.x1).abs() <= tol
            && (self.y1 - other.y1).abs() <= tol
    }
}

/// One detector hit on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub frame_id: String,
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox2,
    pub score: f64,
}

/// Binary instance mask aligned to one frame's raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    pub frame_id: String,
    pub width: u32,
    pub height: u32,
    data: Vec<bool>,
}

impl Mask2D {
    pub fn new(frame_id: impl Into<String>, width: u32, height: u32) -> Mask2D {
        Mask2D {
            frame_id: frame_id.into(),
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn from_fn(
        frame_id: impl Into<String>,
        width: u32,
        height: u32,
        f: impl Fn(u32, u32) -> bool,
    ) -> Mask2D {
        let mut m = Mask2D::new(frame_id, width, height);
        for v in 0..height {
            for u in 0..width {
                if f(u, v) {
                    m.set(u, v, true);
                }
            }
        }
        m
    }

    /// Nonzero gray pixels become true.
    pub fn from_gray(frame_id: impl Into<String>, img: &GrayImage) -> Mask2D {
        let mut m = Mask2D::new(frame_id, img.width(), img.height());
        for (u, v, p) in img.enumerate_pixels() {
            if p.0[0] != 0 {
                m.set(u, v, true);
            }
        }
        m
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |u, v| {
            image::Luma([if self.get(u, v) { 255 } else { 0 }])
        })
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> bool {
        self.data[(v * self.width + u) as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, value: bool) {
        self.data[(v * self.width + u) as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn iter_true(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }

    /// Tight bounding box of the true pixels (end-exclusive), if any.
    pub fn bbox(&self) -> Option<BBox2> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let mut any = false;
        for (u, v) in self.iter_true() {
            any = true;
            x0 = x0.min(u);
            y0 = y0.min(v);
            x1 = x1.max(u);
            y1 = y1.max(v);
        }
        any.then(|| BBox2 {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: (x1 + 1) as f64,
            y1: (y1 + 1) as f64,
        })
    }

    /// Nearest-neighbor resample to a new resolution (used to carry masks
    /// from the color raster to the depth raster).
    pub fn resample_nearest(&self, width: u32, height: u32) -> Mask2D {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Mask2D::from_fn(self.frame_id.clone(), width, height, |u, v| {
            let su = (((u as f64 + 0.5) * sx) as u32).min(self.width - 1);
            let sv = (((v as f64 + 0.5) * sy) as u32).min(self.height - 1);
            self.get(su, sv)
        })
    }
}

/// One source-to-target pixel correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelPair {
    pub source: (u32, u32),
    pub target: (u32, u32),
}

/// All correspondences from the anchor frame into one candidate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchPairs {
    pub source_frame_id: String,
    pub target_frame_id: String,
    pub pairs: Vec<PixelPair>,
}

/// 2D open-vocabulary detector: finds instances of one class on one frame.
pub trait Detector: Send + Sync {
    fn detect(&self, frame: &Frame, class: &str) -> Result<Vec<Detection2D>, PerceptionError>;
}

/// Box-prompted segmenter: one instance mask per query box.
pub trait Segmenter: Send + Sync {
    fn segment(&self, frame: &Frame, bbox: &BBox2) -> Result<Mask2D, PerceptionError>;
}

/// Dense or sparse image matcher between two frames.
pub trait Matcher: Send + Sync {
    fn match_pair(&self, source: &Frame, target: &Frame)
        -> Result<Vec<PixelPair>, PerceptionError>;
}

/// Frames that contain at least one detection of `target_class` with score at
/// or above `threshold`, in scene order. Detector failures skip the frame
/// with a warning rather than aborting the scan.
pub fn preselect_views(
    scene: &Scene,
    target_class: &str,
    detector: &dyn Detector,
    threshold: f64,
) -> Vec<String> {
    let mut kept = Vec::new();
    for frame in &scene.frames {
        match detector.detect(frame, target_class) {
            Ok(dets) => {
                if dets.iter().any(|d| d.score >= threshold) {
                    kept.push(frame.frame_id.clone());
                }
            }
            Err(e) => {
                log::warn!(
                    "detector failed on frame {}: {e}; frame skipped",
                    frame.frame_id
                );
            }
        }
    }
    kept
}

/// Detections of `class` on `frame` at or above `threshold`, in detector order.
pub fn detect_candidates(
    frame: &Frame,
    class: &str,
    detector: &dyn Detector,
    threshold: f64,
) -> Result<Vec<Detection2D>, PerceptionError> {
    Ok(detector
        .detect(frame, class)?
        .into_iter()
        .filter(|d| d.score >= threshold)
        .collect())
}

/// Annotation text colors and size for candidate IDs.
pub const ANNOTATION_FG: Rgb<u8> = Rgb([255, 255, 255]);
pub const ANNOTATION_BG: Rgb<u8> = Rgb([0, 0, 0]);
pub const ANNOTATION_TEXT_SIZE: u32 = 24;

/// Draws integer IDs `0..k` at detection box centers, white text on black
/// background, and returns the annotated image plus an ID-to-detection map.
///
/// Labels whose rectangles would overlap an already-placed label shift down
/// by whole label heights until they no longer collide, so coincident boxes
/// stay readable.
pub fn annotate_candidates(
    image: &RgbImage,
    detections: &[Detection2D],
) -> (RgbImage, BTreeMap<usize, Detection2D>) {
    let mut out = image.clone();
    let mut id_map = BTreeMap::new();
    let mut placed: Vec<(i64, i64, i64, i64)> = Vec::new(); // x, y, w, h
    for (id, det) in detections.iter().enumerate() {
        let label = id.to_string();
        let (tw, th) = text::text_extent(&label, ANNOTATION_TEXT_SIZE);
        let s = text::scale_for_size(ANNOTATION_TEXT_SIZE) as i64;
        let (bw, bh) = (tw as i64 + 2 * s, th as i64 + 2 * s);
        let (cx, cy) = det.bbox.center();
        let x = cx.round() as i64 - bw / 2;
        let mut y = cy.round() as i64 - bh / 2;
        let overlaps = |x: i64, y: i64, placed: &[(i64, i64, i64, i64)]| {
            placed
                .iter()
                .any(|&(px, py, pw, ph)| x < px + pw && px < x + bw && y < py + ph && py < y + bh)
        };
        while overlaps(x, y, &placed) {
            y += bh;
        }
        text::draw_text_boxed(
            &mut out,
            x,
            y,
            &label,
            ANNOTATION_TEXT_SIZE,
            ANNOTATION_FG,
            ANNOTATION_BG,
        );
        placed.push((x, y, bw, bh));
        id_map.insert(id, det.clone());
    }
    (out, id_map)
}

/// Matches the anchor frame against each candidate frame and keeps pairs
/// whose source pixel lies inside the anchor mask. Candidates with no
/// surviving pairs (or a failed matcher call) are omitted.
pub fn match_anchor(
    anchor: &Frame,
    anchor_mask: &Mask2D,
    candidates: &[&Frame],
    matcher: &dyn Matcher,
) -> Vec<MatchPairs> {
    let mut out = Vec::new();
    for target in candidates {
        let pairs = match matcher.match_pair(anchor, target) {
            Ok(p) => p,
            Err(e) => {
                log::warn!(
                    "matcher failed for {} -> {}: {e}; view omitted",
                    anchor.frame_id,
                    target.frame_id
                );
                continue;
            }
        };
        let kept: Vec<PixelPair> = pairs
            .into_iter()
            .filter(|p| {
                p.source.0 < anchor_mask.width
                    && p.source.1 < anchor_mask.height
                    && anchor_mask.get(p.source.0, p.source.1)
            })
            .collect();
        if kept.is_empty() {
            continue;
        }
        out.push(MatchPairs {
            source_frame_id: anchor.frame_id.clone(),
            target_frame_id: target.frame_id.clone(),
            pairs: kept,
        });
    }
    out
}

/// Runs the segmenter and rejects empty masks.
pub fn segment(
    frame: &Frame,
    bbox: &BBox2,
    segmenter: &dyn Segmenter,
) -> Result<Mask2D, PerceptionError> {
    let mask = segmenter.segment(frame, bbox)?;
    if mask.is_empty_mask() {
        return Err(PerceptionError::EmptyMask {
            frame_id: frame.frame_id.clone(),
        });
    }
    Ok(mask)
}
