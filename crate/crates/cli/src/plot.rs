//! Minimal raster plots written as PNG.

use std::path::Path;

use crate::error::{CliError, Result};

pub type Rgb = [u8; 3];

pub const PALETTE: [Rgb; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GREY: Rgb = [200, 200, 200];

// 3x5 glyphs, one row per nibble.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'e' => [0, 7, 7, 4, 7],
        ' ' => [0, 0, 0, 0, 0],
        _ => return None,
    })
}

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![background; width * height],
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: Rgb) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.set(x, y, c);
            }
        }
    }

    pub fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb, thick: i64) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = (x0 + t * (x1 - x0)).round() as i64;
            let y = (y0 + t * (y1 - y0)).round() as i64;
            self.fill_rect(x - thick / 2, y - thick / 2, thick, thick, c);
        }
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], c: Rgb, thick: i64) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], c, thick);
        }
    }

    pub fn dot(&mut self, (x, y): (f64, f64), r: i64, c: Rgb) {
        let (cx, cy) = (x.round() as i64, y.round() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.set(cx + dx, cy + dy, c);
                }
            }
        }
    }

    /// Digits and a few symbols at `scale` pixels per glyph cell.
    pub fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: Rgb) {
        for (k, ch) in s.chars().enumerate() {
            let Some(g) = glyph(ch) else { continue };
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        self.fill_rect(x + (k as i64 * 4 + col) * scale, y + row as i64 * scale, scale, scale, c);
                    }
                }
            }
        }
    }

    /// Copies an RGB image scaled up by an integer factor.
    pub fn blit(&mut self, x0: i64, y0: i64, rgb: &[u8], size: usize, scale: usize) {
        for y in 0..size * scale {
            for x in 0..size * scale {
                let i = ((y / scale) * size + x / scale) * 3;
                self.set(x0 + x as i64, y0 + y as i64, [rgb[i], rgb[i + 1], rgb[i + 2]]);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| CliError::data(format!("{}: {e}", path.display()));
        let mut w = enc.write_header().map_err(fail)?;
        let flat: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        w.write_image_data(&flat).map_err(fail)?;
        w.finish().map_err(fail)
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Axes with labelled extremes mapping data to pixel coordinates.
pub struct Axes {
    pub canvas: Canvas,
    x: (f64, f64),
    y: (f64, f64),
    log_y: bool,
}

const LEFT: f64 = 70.0;
const BOTTOM: f64 = 30.0;
const PAD: f64 = 15.0;

impl Axes {
    pub fn new(width: usize, height: usize, x: (f64, f64), y: (f64, f64), log_y: bool) -> Self {
        let fix = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x, mut y) = (fix(x), fix(y));
        if log_y {
            y = (y.0.max(1e-12).ln(), y.1.max(1e-12).ln());
            y = fix(y);
        }
        let mut canvas = Canvas::new(width, height, WHITE);
        let (w, h) = (width as f64, height as f64);
        for k in 0..=4 {
            let gy = PAD + (h - BOTTOM - PAD) * k as f64 / 4.0;
            canvas.line((LEFT, gy), (w - PAD, gy), GREY, 1);
        }
        canvas.line((LEFT, PAD), (LEFT, h - BOTTOM), BLACK, 1);
        canvas.line((LEFT, h - BOTTOM), (w - PAD, h - BOTTOM), BLACK, 1);
        let label = |v: f64| tick(if log_y { v.exp() } else { v });
        canvas.text(4, PAD as i64, &label(y.1), 2, BLACK);
        canvas.text(4, (h - BOTTOM) as i64 - 10, &label(y.0), 2, BLACK);
        canvas.text(LEFT as i64, (h - BOTTOM) as i64 + 8, &tick(x.0), 2, BLACK);
        let right = tick(x.1);
        canvas.text((w - PAD) as i64 - right.len() as i64 * 8, (h - BOTTOM) as i64 + 8, &right, 2, BLACK);
        Self { canvas, x, y, log_y }
    }

    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let y = if self.log_y { y.max(1e-12).ln() } else { y };
        let (w, h) = (self.canvas.width as f64, self.canvas.height as f64);
        let px = LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (w - LEFT - PAD);
        let py = (h - BOTTOM) - (y - self.y.0) / (self.y.1 - self.y.0) * (h - BOTTOM - PAD);
        (px, py)
    }

    pub fn series(&mut self, pts: &[(f64, f64)], c: Rgb) {
        let mapped: Vec<_> = pts.iter().map(|&(x, y)| self.map(x, y)).collect();
        self.canvas.polyline(&mapped, c, 2);
    }

    pub fn point(&mut self, x: f64, y: f64, c: Rgb) {
        let p = self.map(x, y);
        self.canvas.dot(p, 5, c);
    }
}

pub fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_map_corners() {
        let a = Axes::new(200, 100, (0.0, 10.0), (1.0, 3.0), false);
        assert_eq!(a.map(0.0, 1.0), (LEFT, 100.0 - BOTTOM));
        assert_eq!(a.map(10.0, 3.0), (200.0 - PAD, PAD));
    }

    #[test]
    fn text_draws_known_glyphs_only() {
        let mut c = Canvas::new(20, 10, WHITE);
        c.text(0, 0, "1?", 1, BLACK);
        let dark = c.pixels.iter().filter(|p| **p == BLACK).count();
        assert_eq!(dark, 1 + 2 + 1 + 1 + 3);
    }
}
