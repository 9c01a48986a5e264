//! Dynamic image stitching: pack n frames into at most L grid composites.
//!
//! Planning chooses among four grid shapes — (4,1), (2,4), (8,2), (9,3) with
//! capacities 4/8/16/27 — preferring the smallest cells-per-image mix that
//! still fits the soft limit `L`. When even (9,3) grids cannot fit within L
//! images, the plan overflows: as many full (9,3) grids as possible, then the
//! remainder re-planned with a limit of one image. Except in that overflow
//! case the plan uses grids in ascending capacity order and only the
//! largest-capacity grid may have unused cells.
//!
//! Rendering letterboxes each frame into a fixed cell, fills unused cells
//! with solid gray, and draws the five-digit frame ID in red at the top-left
//! corner of its cell.

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

/// Grid shape in (rows, columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub rows: u32,
    pub cols: u32,
}

impl Layout {
    pub const R4X1: Layout = Layout { rows: 4, cols: 1 };
    pub const R2X4: Layout = Layout { rows: 2, cols: 4 };
    pub const R8X2: Layout = Layout { rows: 8, cols: 2 };
    pub const R9X3: Layout = Layout { rows: 9, cols: 3 };

    pub fn new(rows: u32, cols: u32) -> Layout {
        assert!(
            rows >= 1 && cols >= 1,
            "layout must have positive dimensions"
        );
        Layout { rows, cols }
    }

    pub fn capacity(&self) -> usize {
        (self.rows * self.cols) as usize
    }

    /// Parses a `"4x1"`-style string.
    pub fn parse(s: &str) -> Result<Layout, StitchError> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| StitchError::BadLayoutSpec(s.to_string()))?;
        let rows: u32 = r
            .trim()
            .parse()
            .map_err(|_| StitchError::BadLayoutSpec(s.to_string()))?;
        let cols: u32 = c
            .trim()
            .parse()
            .map_err(|_| StitchError::BadLayoutSpec(s.to_string()))?;
        if rows == 0 || cols == 0 {
            return Err(StitchError::BadLayoutSpec(s.to_string()));
        }
        Ok(Layout { rows, cols })
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// One planned composite: a grid shape plus the input indices placed in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layout: Layout,
    /// Indices into the planner's input sequence, in cell order.
    pub frames: Vec<usize>,
}

/// The full packing plan for one input sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchPlan {
    pub entries: Vec<PlanEntry>,
    /// True when the input exceeded 27*L and the plan overflowed the limit.
    pub soft_limit_exceeded: bool,
}

impl StitchPlan {
    pub fn image_count(&self) -> usize {
        self.entries.len()
    }

    pub fn total_capacity(&self) -> usize {
        self.entries.iter().map(|e| e.layout.capacity()).sum()
    }
}

/// Mathematical ceiling of `a / b` for positive `b`.
fn ceil_div(a: i64, b: i64) -> i64 {
    debug_assert!(b > 0);
    (a + b - 1).div_euclid(b)
}

/// Splits `range` into consecutive capacity-sized chunks of `layout`.
fn emit_chunks(range: std::ops::Range<usize>, layout: Layout, out: &mut Vec<PlanEntry>) {
    let cap = layout.capacity();
    let mut start = range.start;
    while start < range.end {
        let end = (start + cap).min(range.end);
        out.push(PlanEntry {
            layout,
            frames: (start..end).collect(),
        });
        start = end;
    }
}

fn plan_range(range: std::ops::Range<usize>, limit: usize, out: &mut Vec<PlanEntry>) -> bool {
    let n = range.len() as i64;
    let l = limit as i64;
    let base = range.start;
    if n <= 4 * l {
        emit_chunks(range, Layout::R4X1, out);
        false
    } else if n <= 8 * l {
        let n8 = ceil_div(n - 4 * l, 4);
        let n4 = l - n8;
        debug_assert!(n8 >= 1 && n4 >= 0);
        let cut = base + (4 * n4) as usize;
        emit_chunks(base..cut, Layout::R4X1, out);
        emit_chunks(cut..range.end, Layout::R2X4, out);
        false
    } else if n <= 16 * l {
        let n16 = ceil_div(n - 8 * l, 8);
        let rem = (n - 16 * n16).max(0);
        let n48 = l - n16;
        let n8 = ceil_div(rem - 4 * n48, 4);
        let n4 = n48 - n8;
        debug_assert!(n16 >= 1 && n8 >= 0 && n4 >= 0);
        let cut4 = base + (4 * n4) as usize;
        let cut8 = cut4 + (8 * n8) as usize;
        emit_chunks(base..cut4, Layout::R4X1, out);
        emit_chunks(cut4..cut8, Layout::R2X4, out);
        emit_chunks(cut8..range.end, Layout::R8X2, out);
        false
    } else if n <= 27 * l {
        let n27 = ceil_div(n - 16 * l, 11);
        let n4816 = l - n27;
        let rem1 = (n - 27 * n27).max(0);
        let n16 = ceil_div(rem1 - 8 * n4816, 8);
        let n48 = n4816 - n16;
        let rem2 = (rem1 - 16 * n16).max(0);
        let n8 = ceil_div(rem2 - 4 * n48, 4);
        let n4 = n48 - n8;
        debug_assert!(n27 >= 1 && n16 >= 0 && n8 >= 0 && n4 >= 0);
        let cut4 = base + (4 * n4) as usize;
        let cut8 = cut4 + (8 * n8) as usize;
        let cut16 = cut8 + (16 * n16) as usize;
        emit_chunks(base..cut4, Layout::R4X1, out);
        emit_chunks(cut4..cut8, Layout::R2X4, out);
        emit_chunks(cut8..cut16, Layout::R8X2, out);
        emit_chunks(cut16..range.end, Layout::R9X3, out);
        false
    } else {
        let n27 = n / 27;
        let cut = base + (27 * n27) as usize;
        emit_chunks(base..cut, Layout::R9X3, out);
        plan_range(cut..range.end, 1, out);
        true
    }
}

/// Plans grid layouts for `n` frames under a soft limit of `soft_limit`
/// composite images. Frame indices `0..n` are assigned in order.
pub fn plan_layouts(n: usize, soft_limit: usize) -> StitchPlan {
    assert!(soft_limit >= 1, "soft limit must be >= 1");
    let mut entries = Vec::new();
    let soft_limit_exceeded = plan_range(0..n, soft_limit, &mut entries);
    StitchPlan {
        entries,
        soft_limit_exceeded,
    }
}

/// Cell size in pixels for grid composites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSize {
    pub width: u32,
    pub height: u32,
}

impl Default for CellSize {
    /// 4:3 cells sized so a (4,1) composite lands near the resize bound.
    fn default() -> Self {
        CellSize {
            width: 512,
            height: 384,
        }
    }
}

/// Solid fill for unused cells and letterbox bars.
pub const BACKGROUND_GRAY: Rgb<u8> = Rgb([128, 128, 128]);
/// Frame IDs are drawn in pure red...
pub const ID_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
/// ...at this fixed line height, inset from the cell corner by [`ID_MARGIN`].
pub const ID_TEXT_SIZE: u32 = 24;
pub const ID_MARGIN: u32 = 4;

#[derive(Debug, Error)]
pub enum StitchError {
    #[error("{given} frames exceed layout {layout} capacity {capacity}")]
    TooManyFrames {
        given: usize,
        layout: Layout,
        capacity: usize,
    },
    #[error("invalid layout spec {0:?} (expected ROWSxCOLS)")]
    BadLayoutSpec(String),
    #[error("frame id {0:?} is not numeric; grid IDs render digits only")]
    NonNumericId(String),
}

/// A rendered composite and the frame placed in each cell.
#[derive(Debug, Clone)]
pub struct StitchedImage {
    pub raster: RgbImage,
    pub layout: Layout,
    /// `(cell_index, frame_id)` pairs in placement order (row-major).
    pub cell_map: Vec<(usize, String)>,
}

/// Uniformly rescales `img` to fit `(w, h)` and centers it on a gray canvas.
fn letterbox(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    let scale = f64::min(
        w as f64 / img.width() as f64,
        h as f64 / img.height() as f64,
    );
    let nw = ((img.width() as f64 * scale).round() as u32).clamp(1, w);
    let nh = ((img.height() as f64 * scale).round() as u32).clamp(1, h);
    let resized = if (nw, nh) == (img.width(), img.height()) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, imageops::FilterType::Triangle)
    };
    let mut canvas = RgbImage::from_pixel(w, h, BACKGROUND_GRAY);
    imageops::overlay(
        &mut canvas,
        &resized,
        ((w - nw) / 2) as i64,
        ((h - nh) / 2) as i64,
    );
    canvas
}

/// Renders frames into a `layout` grid with `cell`-sized cells.
///
/// Cells fill in row-major order; leftovers are solid gray. When `draw_ids`
/// is set each frame's ID is drawn in red at the top-left of its cell (IDs
/// must be numeric). Fewer frames than capacity is fine, more is an error.
pub fn stitch_with(
    frames: &[(&str, &RgbImage)],
    layout: Layout,
    cell: CellSize,
    draw_ids: bool,
) -> Result<StitchedImage, StitchError> {
    if frames.len() > layout.capacity() {
        return Err(StitchError::TooManyFrames {
            given: frames.len(),
            layout,
            capacity: layout.capacity(),
        });
    }
    if draw_ids {
        if let Some((id, _)) = frames
            .iter()
            .find(|(id, _)| id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()))
        {
            return Err(StitchError::NonNumericId(id.to_string()));
        }
    }
    let mut raster = RgbImage::from_pixel(
        layout.cols * cell.width,
        layout.rows * cell.height,
        BACKGROUND_GRAY,
    );
    let mut cell_map = Vec::with_capacity(frames.len());
    for (i, (frame_id, img)) in frames.iter().enumerate() {
        let row = i as u32 / layout.cols;
        let col = i as u32 % layout.cols;
        let (x0, y0) = (col * cell.width, row * cell.height);
        let boxed = letterbox(img, cell.width, cell.height);
        imageops::overlay(&mut raster, &boxed, x0 as i64, y0 as i64);
        if draw_ids {
            text::draw_text(
                &mut raster,
                (x0 + ID_MARGIN) as i64,
                (y0 + ID_MARGIN) as i64,
                frame_id,
                ID_TEXT_SIZE,
                ID_COLOR,
            );
        }
        cell_map.push((i, frame_id.to_string()));
    }
    Ok(StitchedImage {
        raster,
        layout,
        cell_map,
    })
}

/// [`stitch_with`] drawing IDs, the form the grounding pipeline uses.
pub fn stitch(
    frames: &[(&str, &RgbImage)],
    layout: Layout,
    cell: CellSize,
) -> Result<StitchedImage, StitchError> {
    stitch_with(frames, layout, cell, true)
}

/// Renders every entry of a plan over `frames` (parallel to plan indices).
pub fn render_plan(
    plan: &StitchPlan,
    frames: &[(&str, &RgbImage)],
    cell: CellSize,
    draw_ids: bool,
) -> Result<Vec<StitchedImage>, StitchError> {
    plan.entries
        .iter()
        .map(|entry| {
            let subset: Vec<(&str, &RgbImage)> = entry.frames.iter().map(|&i| frames[i]).collect();
            stitch_with(&subset, entry.layout, cell, draw_ids)
        })
        .collect()
}

/// Maximum long-side pixels after VLM pre-resize.
pub const VLM_MAX_LONG: u32 = 2048;
/// Maximum short-side pixels after VLM pre-resize.
pub const VLM_MAX_SHORT: u32 = 768;

/// Downscales (never upscales) so the long side is at most 2048 px and the
/// short side at most 768 px, preserving aspect ratio.
pub fn resize_for_vlm(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let long = w.max(h) as f64;
    let short = w.min(h) as f64;
    let scale = (VLM_MAX_LONG as f64 / long)
        .min(VLM_MAX_SHORT as f64 / short)
        .min(1.0);
    if scale >= 1.0 {
        return img.clone();
    }
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    imageops::resize(img, nw, nh, imageops::FilterType::Triangle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layouts_of(plan: &StitchPlan) -> Vec<(Layout, usize)> {
        plan.entries
            .iter()
            .map(|e| (e.layout, e.frames.len()))
            .collect()
    }

    #[test]
    fn forty_frames_limit_six() {
        let plan = plan_layouts(40, 6);
        assert_eq!(
            layouts_of(&plan),
            vec![
                (Layout::R4X1, 4),
                (Layout::R4X1, 4),
                (Layout::R2X4, 8),
                (Layout::R2X4, 8),
                (Layout::R2X4, 8),
                (Layout::R2X4, 8),
            ]
        );
        assert!(!plan.soft_limit_exceeded);
    }

    #[test]
    fn eighty_four_frames_limit_six() {
        let plan = plan_layouts(84, 6);
        assert_eq!(
            layouts_of(&plan),
            vec![
                (Layout::R4X1, 4),
                (Layout::R8X2, 16),
                (Layout::R8X2, 16),
                (Layout::R8X2, 16),
                (Layout::R8X2, 16),
                (Layout::R8X2, 16),
            ]
        );
        assert!(!plan.soft_limit_exceeded);
    }

    #[test]
    fn four_frames_limit_one() {
        let plan = plan_layouts(4, 1);
        assert_eq!(layouts_of(&plan), vec![(Layout::R4X1, 4)]);
        assert!(!plan.soft_limit_exceeded);
    }

    #[test]
    fn two_hundred_frames_overflow() {
        let plan = plan_layouts(200, 6);
        let mut expect = vec![(Layout::R9X3, 27); 7];
        expect.push((Layout::R8X2, 11));
        assert_eq!(layouts_of(&plan), expect);
        assert!(plan.soft_limit_exceeded);
        assert_eq!(plan.image_count(), 8);
    }

    #[test]
    fn zero_frames_empty_plan() {
        let plan = plan_layouts(0, 6);
        assert!(plan.entries.is_empty());
        assert!(!plan.soft_limit_exceeded);
    }

    #[test]
    fn frames_assigned_in_order_without_gaps() {
        let plan = plan_layouts(84, 6);
        let all: Vec<usize> = plan
            .entries
            .iter()
            .flat_map(|e| e.frames.iter().copied())
            .collect();
        assert_eq!(all, (0..84).collect::<Vec<_>>());
    }

    fn flat(id: &str, w: u32, h: u32, rgb: [u8; 3]) -> (String, RgbImage) {
        (id.to_string(), RgbImage::from_pixel(w, h, Rgb(rgb)))
    }

    #[test]
    fn stitch_marks_ids_and_fills_unused_cells() {
        let cell = CellSize::default();
        let frames = vec![
            flat("00000", cell.width, cell.height, [0, 0, 200]),
            flat("00001", cell.width, cell.height, [0, 150, 0]),
            flat("00002", cell.width, cell.height, [90, 0, 90]),
        ];
        let refs: Vec<(&str, &RgbImage)> =
            frames.iter().map(|(id, img)| (id.as_str(), img)).collect();
        let out = stitch(&refs, Layout::R2X4, cell).unwrap();
        assert_eq!(out.raster.width(), 4 * cell.width);
        assert_eq!(out.raster.height(), 2 * cell.height);
        assert_eq!(out.cell_map.len(), 3);

        // IDs are readable back out of the pixels in placement order.
        for (i, (id, _)) in frames.iter().map(|(a, b)| (a, b)).enumerate() {
            let row = i as u32 / 4;
            let col = i as u32 % 4;
            let x = (col * cell.width + ID_MARGIN) as i64;
            let y = (row * cell.height + ID_MARGIN) as i64;
            assert!(
                text::text_matches(&out.raster, x, y, id, ID_TEXT_SIZE, ID_COLOR),
                "cell {i} should carry id {id}"
            );
        }

        // All five unused cells are solid gray.
        for i in 3..8u32 {
            let (row, col) = (i / 4, i % 4);
            for (dx, dy) in [
                (0, 0),
                (cell.width - 1, cell.height - 1),
                (cell.width / 2, cell.height / 2),
            ] {
                assert_eq!(
                    *out.raster
                        .get_pixel(col * cell.width + dx, row * cell.height + dy),
                    BACKGROUND_GRAY
                );
            }
        }
    }

    #[test]
    fn stitch_rejects_overflow_and_non_numeric_ids() {
        let cell = CellSize {
            width: 32,
            height: 24,
        };
        let frames: Vec<(String, RgbImage)> = (0..5)
            .map(|i| flat(&format!("{i:05}"), 32, 24, [10, 10, 10]))
            .collect();
        let refs: Vec<(&str, &RgbImage)> =
            frames.iter().map(|(id, img)| (id.as_str(), img)).collect();
        assert!(matches!(
            stitch(&refs, Layout::R4X1, cell),
            Err(StitchError::TooManyFrames { given: 5, .. })
        ));

        let bad = flat("frameA", 32, 24, [0, 0, 0]);
        assert!(matches!(
            stitch(&[(bad.0.as_str(), &bad.1)], Layout::R4X1, cell),
            Err(StitchError::NonNumericId(_))
        ));
    }

    #[test]
    fn exact_size_input_cell_content_is_untouched() {
        let cell = CellSize {
            width: 64,
            height: 48,
        };
        let mut img = RgbImage::from_pixel(64, 48, Rgb([5, 200, 40]));
        img.put_pixel(63, 47, Rgb([255, 255, 255]));
        let out = stitch(&[("00009", &img)], Layout::R4X1, cell).unwrap();
        // Outside the ID text region the cell equals the input exactly.
        let (tw, th) = text::text_extent("00009", ID_TEXT_SIZE);
        for y in 0..48u32 {
            for x in 0..64u32 {
                let in_text =
                    x >= ID_MARGIN && x < ID_MARGIN + tw && y >= ID_MARGIN && y < ID_MARGIN + th;
                if !in_text {
                    assert_eq!(
                        out.raster.get_pixel(x, y),
                        img.get_pixel(x, y),
                        "at {x},{y}"
                    );
                }
            }
        }
    }

    #[test]
    fn letterbox_centers_and_scales_like_reference_resize() {
        let cell = CellSize {
            width: 100,
            height: 80,
        };
        let img = RgbImage::from_fn(50, 80, |x, y| Rgb([(x * 5) as u8, (y * 3) as u8, 9]));
        let out = stitch_with(&[("00000", &img)], Layout::R4X1, cell, false).unwrap();
        // Scale = min(100/50, 80/80) = 1 vertically binding... = min(2.0, 1.0) = 1.0
        // so content is 50x80 centered horizontally at x=25.
        let reference = img.clone();
        for y in 0..80u32 {
            for x in 0..50u32 {
                assert_eq!(out.raster.get_pixel(x + 25, y), reference.get_pixel(x, y));
            }
            assert_eq!(*out.raster.get_pixel(0, y), BACKGROUND_GRAY);
            assert_eq!(*out.raster.get_pixel(99, y), BACKGROUND_GRAY);
        }
    }

    #[test]
    fn letterbox_downscale_matches_library_resize() {
        let cell = CellSize {
            width: 40,
            height: 40,
        };
        let img = RgbImage::from_fn(80, 40, |x, y| Rgb([(x + y) as u8, x as u8, y as u8]));
        let out = stitch_with(&[("00000", &img)], Layout::R4X1, cell, false).unwrap();
        let expect = imageops::resize(&img, 40, 20, imageops::FilterType::Triangle);
        for y in 0..20u32 {
            for x in 0..40u32 {
                assert_eq!(out.raster.get_pixel(x, y + 10), expect.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn vlm_resize_bounds() {
        let wide = RgbImage::from_pixel(4096, 1024, Rgb([1, 2, 3]));
        let out = resize_for_vlm(&wide);
        assert_eq!((out.width(), out.height()), (2048, 512));

        let square = RgbImage::from_pixel(2048, 2048, Rgb([1, 2, 3]));
        let out = resize_for_vlm(&square);
        assert_eq!((out.width(), out.height()), (768, 768));

        let small = RgbImage::from_pixel(1000, 700, Rgb([1, 2, 3]));
        let out = resize_for_vlm(&small);
        assert_eq!((out.width(), out.height()), (1000, 700));
    }

    proptest::proptest! {
        #[test]
        fn plan_covers_each_frame_once_with_capacity(n in 0usize..400, l in 1usize..8) {
            let plan = plan_layouts(n, l);
            let mut seen = vec![false; n];
            for e in &plan.entries {
                proptest::prop_assert!(e.frames.len() <= e.layout.capacity());
                for &i in &e.frames {
                    proptest::prop_assert!(!seen[i], "frame {} placed twice", i);
                    seen[i] = true;
                }
            }
            proptest::prop_assert!(seen.iter().all(|&s| s));
            proptest::prop_assert!(plan.total_capacity() >= n);
            // Only the final composite may have unused cells.
            for e in plan.entries.iter().rev().skip(1) {
                proptest::prop_assert_eq!(e.frames.len(), e.layout.capacity());
            }
            if n <= 27 * l {
                proptest::prop_assert!(plan.image_count() <= l);
                proptest::prop_assert!(!plan.soft_limit_exceeded);
                // Grids appear in ascending capacity order.
                for w in plan.entries.windows(2) {
                    proptest::prop_assert!(w[0].layout.capacity() <= w[1].layout.capacity());
                }
            } else {
                proptest::prop_assert!(plan.soft_limit_exceeded);
            }
        }

        #[test]
        fn image_count_monotonic_in_n(n in 0usize..300, l in 1usize..6) {
            let a = plan_layouts(n, l).image_count();
            let b = plan_layouts(n + 1, l).image_count();
            proptest::prop_assert!(b >= a);
        }
    }
}
