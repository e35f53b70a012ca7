//! Deterministic heatmap rendering for magnitude fields.
//!
//! Fields are colorized with the viridis scale, upscaled by nearest
//! neighbor to at least 256 px, and annotated with their min/max values
//! using a built-in 5×7 bitmap font. Identical inputs always produce
//! identical PNG bytes.

use image::{Rgb, RgbImage};
use std::path::Path;

use super::viridis::VIRIDIS;
use crate::error::{Error, Result};
use crate::room_acoustics::MagnitudeField;

const BAR_HEIGHT: u32 = 16;
const BAR_BG: Rgb<u8> = Rgb([24, 24, 24]);
const TEXT_COLOR: Rgb<u8> = Rgb([230, 230, 230]);
const PANEL_GAP: u32 = 8;
const PANEL_BG: Rgb<u8> = Rgb([12, 12, 12]);

/// 5×7 glyphs, one row per byte, bit 4 = leftmost pixel.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x15, 0x15],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        't' => [0x08, 0x08, 0x1E, 0x08, 0x08, 0x09, 0x06],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        's' => [0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'c' => [0x00, 0x00, 0x0E, 0x11, 0x10, 0x11, 0x0E],
        'g' => [0x00, 0x00, 0x0F, 0x11, 0x0F, 0x01, 0x0E],
        'b' => [0x10, 0x10, 0x1E, 0x11, 0x11, 0x11, 0x1E],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        _ => [0u8; 7],
    }
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: Rgb<u8>) {
    let mut x = x0;
    for c in text.chars() {
        let g = glyph(c);
        for (dy, row) in g.iter().enumerate() {
            for dx in 0..5u32 {
                if row & (1 << (4 - dx)) != 0 {
                    let (px, py) = (x + dx, y0 + dy as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, color);
                    }
                }
            }
        }
        x += 6;
    }
}

fn color_for(v: f64, min: f64, max: f64) -> Rgb<u8> {
    let t = if max > min { ((v - min) / (max - min)).clamp(0.0, 1.0) } else { 0.0 };
    let idx = (t * 255.0).round() as usize;
    Rgb(VIRIDIS[idx.min(255)])
}

fn validate(field: &MagnitudeField) -> Result<(f64, f64)> {
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("heatmap field contains non-finite values".into()));
    }
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

fn tile_scale(field: &MagnitudeField) -> u32 {
    // At least 256 px on the longer field axis.
    let longest = field.dim().0.max(field.dim().1) as u32;
    256u32.div_ceil(longest).max(1)
}

fn draw_tile(img: &mut RgbImage, x0: u32, y0: u32, field: &MagnitudeField, min: f64, max: f64, scale: u32) {
    let (rows, cols) = field.dim();
    for i in 0..rows {
        for j in 0..cols {
            let color = color_for(field[[i, j]], min, max);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(x0 + j as u32 * scale + dx, y0 + i as u32 * scale + dy, color);
                }
            }
        }
    }
}

fn annotation(min: f64, max: f64) -> String {
    format!("min={min:.3e} max={max:.3e}")
}

/// Render one field to an image: colorized tile plus a min/max bar.
pub fn render_heatmap_image(field: &MagnitudeField) -> Result<RgbImage> {
    let (min, max) = validate(field)?;
    let scale = tile_scale(field);
    let (rows, cols) = field.dim();
    let (w, h) = (cols as u32 * scale, rows as u32 * scale);
    let mut img = RgbImage::from_pixel(w, h + BAR_HEIGHT, BAR_BG);
    draw_tile(&mut img, 0, 0, field, min, max, scale);
    draw_text(&mut img, 4, h + 4, &annotation(min, max), TEXT_COLOR);
    Ok(img)
}

/// Render and save as PNG.
pub fn render_heatmap(field: &MagnitudeField, path: &Path) -> Result<()> {
    let img = render_heatmap_image(field)?;
    save_png(&img, path)
}

/// Render labeled fields side by side on a shared color scale.
pub fn render_panel_image(entries: &[(&str, &MagnitudeField)]) -> Result<RgbImage> {
    if entries.is_empty() {
        return Err(Error::Contract("panel needs at least one field".into()));
    }
    let dim = entries[0].1.dim();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (_, f) in entries {
        if f.dim() != dim {
            return Err(Error::Contract("panel fields must share one grid shape".into()));
        }
        let (lo, hi) = validate(f)?;
        min = min.min(lo);
        max = max.max(hi);
    }
    let scale = tile_scale(entries[0].1);
    let (tw, th) = (dim.1 as u32 * scale, dim.0 as u32 * scale);
    let tile_h = BAR_HEIGHT + th + BAR_HEIGHT;
    let n = entries.len() as u32;
    let width = n * tw + (n + 1) * PANEL_GAP;
    let mut img = RgbImage::from_pixel(width, tile_h + 2 * PANEL_GAP, PANEL_BG);
    for (idx, (label, field)) in entries.iter().enumerate() {
        let x0 = PANEL_GAP + idx as u32 * (tw + PANEL_GAP);
        let y0 = PANEL_GAP;
        for y in y0..y0 + tile_h {
            for x in x0..x0 + tw {
                img.put_pixel(x, y, BAR_BG);
            }
        }
        draw_text(&mut img, x0 + 4, y0 + 4, label, TEXT_COLOR);
        draw_tile(&mut img, x0, y0 + BAR_HEIGHT, field, min, max, scale);
        draw_text(&mut img, x0 + 4, y0 + BAR_HEIGHT + th + 4, &annotation(min, max), TEXT_COLOR);
    }
    Ok(img)
}

pub fn render_panel(entries: &[(&str, &MagnitudeField)], path: &Path) -> Result<()> {
    let img = render_panel_image(entries)?;
    save_png(&img, path)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("writing {}: {e}", path.display()))))
}
