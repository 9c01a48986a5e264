//! Minimal raster digit font for drawing frame and object IDs on images.
//!
//! Everything downstream (stitched-grid IDs, candidate annotations, benchmark
//! item IDs) only ever renders decimal digits, so a small built-in 5x7 bitmap
//! font is enough and keeps rendering fully deterministic. Glyphs are scaled
//! by an integer factor; `size` is the rendered line height in pixels and must
//! be a multiple of [`LINE_UNITS`].

use image::{Rgb, RgbImage};

/// Glyph grid width in font units.
pub const GLYPH_W: u32 = 5;
/// Glyph grid height in font units.
pub const GLYPH_H: u32 = 7;
/// Line height in font units (glyph rows plus one row of leading).
pub const LINE_UNITS: u32 = 8;
/// Horizontal advance per character in font units.
pub const ADVANCE_UNITS: u32 = 6;

/// 5x7 bitmaps for '0'..='9'; each row is a 5-bit pattern, MSB on the left.
const DIGITS: [[u8; 7]; 10] = [
    [
        0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110,
    ], // 0
    [
        0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110,
    ], // 1
    [
        0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111,
    ], // 2
    [
        0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110,
    ], // 3
    [
        0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010,
    ], // 4
    [
        0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110,
    ], // 5
    [
        0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110,
    ], // 6
    [
        0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000,
    ], // 7
    [
        0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110,
    ], // 8
    [
        0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100,
    ], // 9
];

fn glyph(c: char) -> Option<&'static [u8; 7]> {
    c.to_digit(10).map(|d| &DIGITS[d as usize])
}

/// Integer scale factor for a rendered line height of `size` pixels.
///
/// Panics if `size` is not a positive multiple of [`LINE_UNITS`].
pub fn scale_for_size(size: u32) -> u32 {
    assert!(
        size >= LINE_UNITS && size % LINE_UNITS == 0,
        "text size must be a positive multiple of {LINE_UNITS}, got {size}"
    );
    size / LINE_UNITS
}

/// Pixel width and height of `text` rendered at line height `size`.
pub fn text_extent(text: &str, size: u32) -> (u32, u32) {
    let s = scale_for_size(size);
    let n = text.chars().count() as u32;
    if n == 0 {
        return (0, size);
    }
    // Last character does not need its trailing advance gap.
    ((n - 1) * ADVANCE_UNITS * s + GLYPH_W * s, size)
}

/// Draws `text` (digits only) with its top-left corner at `(x, y)`.
///
/// Pixels outside the image are silently clipped. Non-digit characters panic:
/// IDs are validated as numeric long before they reach rendering.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, size: u32, color: Rgb<u8>) {
    let s = scale_for_size(size) as i64;
    let mut pen_x = x;
    for c in text.chars() {
        let g = glyph(c).unwrap_or_else(|| panic!("unsupported glyph {c:?}: only digits render"));
        for (row, bits) in g.iter().enumerate() {
            for col in 0..GLYPH_W as i64 {
                if bits & (1 << (GLYPH_W as i64 - 1 - col)) == 0 {
                    continue;
                }
                for dy in 0..s {
                    for dx in 0..s {
                        let px = pen_x + col * s + dx;
                        let py = y + row as i64 * s + dy;
                        if px >= 0
                            && py >= 0
                            && (px as u32) < img.width()
                            && (py as u32) < img.height()
                        {
                            img.put_pixel(px as u32, py as u32, color);
                        }
                    }
                }
            }
        }
        pen_x += ADVANCE_UNITS as i64 * s;
    }
}

/// Draws `text` on a filled background rectangle (one scale unit of padding).
///
/// Returns the background rectangle as `(x, y, w, h)` after clipping-free
/// placement (the rectangle itself may extend past the image and is clipped
/// pixel-wise like the glyphs).
pub fn draw_text_boxed(
    img: &mut RgbImage,
    x: i64,
    y: i64,
    text: &str,
    size: u32,
    fg: Rgb<u8>,
    bg: Rgb<u8>,
) -> (i64, i64, u32, u32) {
    let s = scale_for_size(size) as i64;
    let (tw, th) = text_extent(text, size);
    let (bw, bh) = (tw as i64 + 2 * s, th as i64 + 2 * s);
    for py in y..y + bh {
        for px in x..x + bw {
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, bg);
            }
        }
    }
    draw_text(img, x + s, y + s, text, size, fg);
    (x, y, bw as u32, bh as u32)
}

/// True when every glyph-on pixel of `text` rendered at `(x, y)` equals `color`.
///
/// Used by tests and integrity checks to read IDs back out of rendered grids.
pub fn text_matches(img: &RgbImage, x: i64, y: i64, text: &str, size: u32, color: Rgb<u8>) -> bool {
    let s = scale_for_size(size) as i64;
    let mut pen_x = x;
    for c in text.chars() {
        let Some(g) = glyph(c) else { return false };
        for (row, bits) in g.iter().enumerate() {
            for col in 0..GLYPH_W as i64 {
                if bits & (1 << (GLYPH_W as i64 - 1 - col)) == 0 {
                    continue;
                }
                let px = pen_x + col * s;
                let py = y + row as i64 * s;
                if px < 0 || py < 0 || px as u32 >= img.width() || py as u32 >= img.height() {
                    return false;
                }
                if *img.get_pixel(px as u32, py as u32) != color {
                    return false;
                }
            }
        }
        pen_x += ADVANCE_UNITS as i64 * s;
    }
    true
}
