//! Visual-retrieval benchmark: suite generation, request building, scoring,
//! and request-timing harness.
//!
//! Each benchmark item is an image annotated with a five-digit ID in red at
//! the top-left corner and one solid color block at a random position. The
//! model is shown stitched grids of items and asked to list every ID with
//! its block color; recall over items is the accuracy.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::backend::{AttachedImage, BackendError, ChatMessage, VlmBackend};
use crate::agent::{jsonx, normalize_id, prompts};
use crate::stitch::{
    resize_for_vlm, stitch_with, CellSize, Layout, ID_COLOR, ID_MARGIN, ID_TEXT_SIZE,
};
use crate::text;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("need {needed} source images but directory holds {available}")]
    InsufficientImages { needed: usize, available: usize },
    #[error("suite size {count} exceeds the 1000-item ID range")]
    TooManyItems { count: usize },
    #[error("cannot access {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("cannot decode image {path}: {detail}")]
    Image { path: String, detail: String },
    #[error(transparent)]
    Stitch(#[from] crate::stitch::StitchError),
}

/// The six block colors of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockColor {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
}

impl BlockColor {
    pub const ALL: [BlockColor; 6] = [
        BlockColor::Red,
        BlockColor::Green,
        BlockColor::Blue,
        BlockColor::Yellow,
        BlockColor::White,
        BlockColor::Black,
    ];

    pub fn rgb(self) -> Rgb<u8> {
        match self {
            BlockColor::Red => Rgb([255, 0, 0]),
            BlockColor::Green => Rgb([0, 255, 0]),
            BlockColor::Blue => Rgb([0, 0, 255]),
            BlockColor::Yellow => Rgb([255, 255, 0]),
            BlockColor::White => Rgb([255, 255, 255]),
            BlockColor::Black => Rgb([0, 0, 0]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockColor::Red => "red",
            BlockColor::Green => "green",
            BlockColor::Blue => "blue",
            BlockColor::Yellow => "yellow",
            BlockColor::White => "white",
            BlockColor::Black => "black",
        }
    }

    /// The next color on the wheel — always different from `self`.
    pub fn next(self) -> BlockColor {
        let i = Self::ALL.iter().position(|&c| c == self).expect("member");
        Self::ALL[(i + 1) % Self::ALL.len()]
    }
}

/// Finds the vocabulary color named in free-form text: case-insensitive,
/// prose around the word is fine, but exactly one color must be named.
pub fn parse_color(text: &str) -> Option<BlockColor> {
    let lower = text.to_ascii_lowercase();
    let mut found = None;
    for color in BlockColor::ALL {
        if lower.contains(color.name()) {
            if found.is_some() {
                return None; // ambiguous
            }
            found = Some(color);
        }
    }
    found
}

/// One benchmark image: annotated raster plus the facts needed to score it.
#[derive(Debug, Clone)]
pub struct BenchItem {
    /// Five-digit ID in 00000..=00999, drawn in red at the top-left.
    pub item_id: String,
    /// Base image with the block and ID annotation applied.
    pub image: RgbImage,
    pub block_color: BlockColor,
    /// `[x, y, width, height]` of the block in pixels.
    pub block_rect: [u32; 4],
}

/// Where suite base images come from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    /// Procedural textures; channel values stay strictly between the pure
    /// block colors so blocks are always distinguishable.
    Synthetic { width: u32, height: u32 },
    /// PNG/JPEG files sampled without replacement, listing sorted by name.
    Directory(PathBuf),
}

fn synthetic_base(index: usize, width: u32, height: u32) -> RgbImage {
    RgbImage::from_fn(width, height, |u, v| {
        let i = index as u32;
        Rgb([
            (40 + (u * 7 + i * 13) % 160) as u8,
            (40 + (v * 5 + i * 29) % 160) as u8,
            (40 + ((u + v) * 3 + i * 53) % 160) as u8,
        ])
    })
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let io_err = |e: std::io::Error| BenchError::Io {
        path: dir.display().to_string(),
        detail: e.to_string(),
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err)?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Generates `count` annotated items, deterministically under `seed`.
///
/// Per item the generator draws, in order: the block color, then the block
/// position. The block (a square with side 10% of the image's short side)
/// is painted first and the ID annotation after, so the ID stays legible.
pub fn generate_suite(
    count: usize,
    seed: u64,
    source: &ImageSource,
) -> Result<Vec<BenchItem>, BenchError> {
    assert!(count >= 1, "suite needs at least one item");
    if count > 1000 {
        return Err(BenchError::TooManyItems { count });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases: Vec<RgbImage> = match source {
        ImageSource::Synthetic { width, height } => (0..count)
            .map(|i| synthetic_base(i, *width, *height))
            .collect(),
        ImageSource::Directory(dir) => {
            let files = list_images(dir)?;
            if files.len() < count {
                return Err(BenchError::InsufficientImages {
                    needed: count,
                    available: files.len(),
                });
            }
            let picks = rand::seq::index::sample(&mut rng, files.len(), count);
            picks
                .iter()
                .map(|i| {
                    let path = &files[i];
                    image::open(path)
                        .map(|img| img.to_rgb8())
                        .map_err(|e| BenchError::Image {
                            path: path.display().to_string(),
                            detail: e.to_string(),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let mut items = Vec::with_capacity(count);
    for (index, mut image) in bases.into_iter().enumerate() {
        let item_id = format!("{index:05}");
        let color = BlockColor::ALL[rng.gen_range(0..BlockColor::ALL.len())];
        let side = ((image.width().min(image.height()) as f64 * 0.10).round() as u32).max(1);
        let x = rng.gen_range(0..=image.width().saturating_sub(side));
        let y = rng.gen_range(0..=image.height().saturating_sub(side));
        for v in y..(y + side).min(image.height()) {
            for u in x..(x + side).min(image.width()) {
                image.put_pixel(u, v, color.rgb());
            }
        }
        text::draw_text(
            &mut image,
            ID_MARGIN as i64,
            ID_MARGIN as i64,
            &item_id,
            ID_TEXT_SIZE,
            ID_COLOR,
        );
        items.push(BenchItem {
            item_id,
            image,
            block_color: color,
            block_rect: [x, y, side, side],
        });
    }
    Ok(items)
}

/// Scoring facts for one item, as persisted in the suite manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub color: BlockColor,
    /// `[x, y, width, height]` of the block.
    pub rect: [u32; 4],
}

/// Manifest mapping item ID → scoring facts.
pub fn suite_manifest(suite: &[BenchItem]) -> BTreeMap<String, ManifestEntry> {
    suite
        .iter()
        .map(|item| {
            (
                item.item_id.clone(),
                ManifestEntry {
                    color: item.block_color,
                    rect: item.block_rect,
                },
            )
        })
        .collect()
}

/// Parsed model answer: (item ID, color) pairs. Pairs whose color is not in
/// the vocabulary are dropped at parse time — they can never score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalAnswer {
    pub pairs: Vec<(String, BlockColor)>,
}

#[derive(Deserialize)]
struct RetrievalWire {
    ids: Vec<serde_json::Value>,
    colors: Vec<String>,
}

/// Parses a retrieval reply: a JSON object with `ids` and `colors` arrays.
/// Numeric IDs are zero-padded; list lengths are reconciled by zipping.
pub fn parse_retrieval_response(text: &str) -> Result<RetrievalAnswer, String> {
    let wire: RetrievalWire = jsonx::parse_object(text)?;
    let ids = wire.ids.into_iter().map(|v| match v {
        serde_json::Value::Number(n) => n.to_string(),
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    });
    let pairs = ids
        .zip(wire.colors)
        .filter_map(|(id, color)| parse_color(&color).map(|c| (normalize_id(&id), c)))
        .collect();
    Ok(RetrievalAnswer { pairs })
}

/// Recall over ground-truth items: an item counts as correct when any
/// answered pair carries its ID with the right color. IDs outside the
/// ground truth are ignored.
pub fn score_retrieval(gt: &[BenchItem], answer: &RetrievalAnswer) -> f64 {
    assert!(!gt.is_empty(), "cannot score an empty suite");
    let correct = gt
        .iter()
        .filter(|item| {
            answer
                .pairs
                .iter()
                .any(|(id, color)| *id == item.item_id && *color == item.block_color)
        })
        .count();
    correct as f64 / gt.len() as f64
}

/// One row of the layout sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub layout: Layout,
    pub images_per_request: usize,
    /// Mean per-request accuracy over completed requests (0 when none).
    pub accuracy: f64,
    /// Requests that failed at the backend and were excluded from the mean.
    pub incomplete: usize,
}

fn composites_for_chunk(
    chunk: &[BenchItem],
    layout: Layout,
    cell: CellSize,
) -> Result<Vec<AttachedImage>, BenchError> {
    let mut composites = Vec::new();
    for (i, group) in chunk.chunks(layout.capacity()).enumerate() {
        // Items are already annotated; stitching must not redraw IDs.
        let frames: Vec<(&str, &RgbImage)> = group
            .iter()
            .map(|item| (item.item_id.as_str(), &item.image))
            .collect();
        let stitched = stitch_with(&frames, layout, cell, false)?;
        composites.push(AttachedImage {
            label: format!("grid-{i:02}"),
            image: resize_for_vlm(&stitched.raster),
        });
    }
    Ok(composites)
}

/// Sweeps layouts over the suite. Each request carries `images_per_request`
/// items stitched into as many grids as the layout needs. Backend failures
/// mark the request incomplete; replies that parse to nothing score 0.
pub fn run_layout_sweep(
    suite: &[BenchItem],
    layouts: &[Layout],
    images_per_request: usize,
    cell: CellSize,
    backend: &dyn VlmBackend,
) -> Result<Vec<SweepRow>, BenchError> {
    assert!(
        images_per_request >= 1,
        "need at least one image per request"
    );
    assert!(!suite.is_empty(), "cannot sweep an empty suite");
    let mut rows = Vec::with_capacity(layouts.len());
    for &layout in layouts {
        let mut accuracies = Vec::new();
        let mut incomplete = 0usize;
        for chunk in suite.chunks(images_per_request) {
            let composites = composites_for_chunk(chunk, layout, cell)?;
            let message =
                ChatMessage::user_with_images(prompts::render_retrieval(chunk.len()), composites);
            match backend.chat(&[message]) {
                Ok(reply) => {
                    let answer = parse_retrieval_response(&reply)
                        .unwrap_or(RetrievalAnswer { pairs: Vec::new() });
                    accuracies.push(score_retrieval(chunk, &answer));
                }
                Err(e) => {
                    log::warn!("sweep request failed for layout {layout}: {e}");
                    incomplete += 1;
                }
            }
        }
        let accuracy = if accuracies.is_empty() {
            0.0
        } else {
            accuracies.iter().sum::<f64>() / accuracies.len() as f64
        };
        rows.push(SweepRow {
            layout,
            images_per_request,
            accuracy,
            incomplete,
        });
    }
    Ok(rows)
}

/// One row of the request-timing harness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub copies: usize,
    /// Mean wall seconds over successful trials (0 when none succeeded).
    pub mean_s: f64,
    pub failed_trials: usize,
}

/// Fixed text for timing requests; the reply content is irrelevant.
pub const TIMING_PROMPT: &str = "Reply with the single word: ready.";

/// Measures mean request wall time with 1..=max_copies attached copies of
/// `image`, `trials` requests each, strictly sequentially. Failed trials
/// are counted and excluded from the mean.
pub fn time_requests(
    image: &RgbImage,
    max_copies: usize,
    trials: usize,
    backend: &dyn VlmBackend,
) -> Vec<TimingRow> {
    assert!(
        max_copies >= 1 && trials >= 1,
        "need at least one copy and one trial"
    );
    let resized = resize_for_vlm(image);
    let mut rows = Vec::with_capacity(max_copies);
    for copies in 1..=max_copies {
        let attachments: Vec<AttachedImage> = (0..copies)
            .map(|i| AttachedImage {
                label: format!("copy-{i:02}"),
                image: resized.clone(),
            })
            .collect();
        let message = ChatMessage::user_with_images(TIMING_PROMPT, attachments);
        let mut elapsed = Vec::new();
        let mut failed = 0usize;
        for _ in 0..trials {
            let start = Instant::now();
            match backend.chat(std::slice::from_ref(&message)) {
                Ok(_) => elapsed.push(start.elapsed().as_secs_f64()),
                Err(_) => failed += 1,
            }
        }
        let mean_s = if elapsed.is_empty() {
            0.0
        } else {
            elapsed.iter().sum::<f64>() / elapsed.len() as f64
        };
        rows.push(TimingRow {
            copies,
            mean_s,
            failed_trials: failed,
        });
    }
    rows
}

/// Oracle backend for sweep integrity checks: every reply lists the full
/// suite's (ID, color) pairs, so each chunk finds its items and the scorer
/// ignores the rest.
pub struct EchoBackend {
    response: String,
}

impl EchoBackend {
    pub fn new(suite: &[BenchItem]) -> EchoBackend {
        let ids: Vec<&str> = suite.iter().map(|i| i.item_id.as_str()).collect();
        let colors: Vec<&str> = suite.iter().map(|i| i.block_color.name()).collect();
        let response = serde_json::json!({ "ids": ids, "colors": colors }).to_string();
        EchoBackend { response }
    }
}

impl VlmBackend for EchoBackend {
    fn chat(&self, _messages: &[ChatMessage]) -> Result<String, BackendError> {
        Ok(self.response.clone())
    }
}

/// Like [`EchoBackend`] but answers per chunk (in request order) and flips
/// the last item's color, so a 4-item request scores exactly 0.75.
pub struct CorruptingBackend {
    responses: Vec<String>,
    cursor: Mutex<usize>,
}

impl CorruptingBackend {
    pub fn new(suite: &[BenchItem], images_per_request: usize) -> CorruptingBackend {
        let responses = suite
            .chunks(images_per_request)
            .map(|chunk| {
                let ids: Vec<&str> = chunk.iter().map(|i| i.item_id.as_str()).collect();
                let mut colors: Vec<&str> = chunk.iter().map(|i| i.block_color.name()).collect();
                if let (Some(last), Some(item)) = (colors.last_mut(), chunk.last()) {
                    *last = item.block_color.next().name();
                }
                serde_json::json!({ "ids": ids, "colors": colors }).to_string()
            })
            .collect();
        CorruptingBackend {
            responses,
            cursor: Mutex::new(0),
        }
    }
}

impl VlmBackend for CorruptingBackend {
    fn chat(&self, _messages: &[ChatMessage]) -> Result<String, BackendError> {
        let mut cursor = self.cursor.lock().expect("cursor lock");
        let reply = self.responses[*cursor % self.responses.len()].clone();
        *cursor += 1;
        Ok(reply)
    }
}

/// Writes sweep rows as CSV.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), BenchError> {
    let mut text = String::from("layout_rows,layout_cols,images_per_request,accuracy,incomplete\n");
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.layout.rows, row.layout.cols, row.images_per_request, row.accuracy, row.incomplete
        ));
    }
    std::fs::write(path, text).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Writes timing rows as CSV.
pub fn write_timing_csv(path: &Path, rows: &[TimingRow]) -> Result<(), BenchError> {
    let mut text = String::from("copies,mean_s,failed_trials\n");
    for row in rows {
        text.push_str(&format!(
            "{},{},{}\n",
            row.copies, row.mean_s, row.failed_trials
        ));
    }
    std::fs::write(path, text).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}
