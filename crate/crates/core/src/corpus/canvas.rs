//! Rasterization primitives that paint colour and element labels together.

use serde::{Deserialize, Serialize};

use super::font;
use crate::raster::ChartImage;

/// Per-pixel element class stored in chart masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Element {
    Background = 0,
    Text = 1,
    Mark = 2,
    Axis = 3,
    Legend = 4,
}

impl Element {
    pub const ALL: [Element; 5] = [Element::Background, Element::Text, Element::Mark, Element::Axis, Element::Legend];

    pub fn from_u8(v: u8) -> Option<Element> {
        Self::ALL.get(v as usize).copied()
    }
}

pub type Rgb = [f32; 3];

pub struct Canvas {
    pub image: ChartImage,
    pub mask: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: Rgb) -> Self {
        Self { image: ChartImage::new(width, height, background), mask: vec![0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn put(&mut self, x: i64, y: i64, color: Rgb, label: Element) {
        if x < 0 || y < 0 || x as usize >= self.width() || y as usize >= self.height() {
            return;
        }
        let (x, y, w) = (x as usize, y as usize, self.width());
        self.image.set_pixel(x, y, color);
        self.mask[y * w + x] = label as u8;
    }

    /// Pixels whose centres lie in `[x0, x1) x [y0, y1)`.
    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb, label: Element) {
        let (xa, xb) = ((x0.min(x1) - 0.5).ceil() as i64, (x0.max(x1) - 0.5).ceil() as i64);
        let (ya, yb) = ((y0.min(y1) - 0.5).ceil() as i64, (y0.max(y1) - 0.5).ceil() as i64);
        for y in ya..yb {
            for x in xa..xb {
                self.put(x, y, color, label);
            }
        }
    }

    /// Pixels within `width / 2` of the segment.
    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), width: f64, color: Rgb, label: Element) {
        let r = (width / 2.0).max(0.5);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let xa = (a.0.min(b.0) - r).floor() as i64;
        let xb = (a.0.max(b.0) + r).ceil() as i64;
        let ya = (a.1.min(b.1) - r).floor() as i64;
        let yb = (a.1.max(b.1) + r).ceil() as i64;
        for y in ya..=yb {
            for x in xa..=xb {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) };
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                if qx * qx + qy * qy <= r * r {
                    self.put(x, y, color, label);
                }
            }
        }
    }

    pub fn circle(&mut self, c: (f64, f64), radius: f64, color: Rgb, label: Element) {
        self.line(c, c, 2.0 * radius, color, label);
    }

    /// Even-odd scanline fill sampled at pixel centres.
    pub fn polygon(&mut self, pts: &[(f64, f64)], color: Rgb, label: Element) {
        if pts.len() < 3 {
            return;
        }
        let ya = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as i64;
        let yb = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(self.height() as f64) as i64;
        let mut xs = Vec::new();
        for y in ya..yb {
            let py = y as f64 + 0.5;
            xs.clear();
            for i in 0..pts.len() {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                if (a.1 <= py) != (b.1 <= py) {
                    xs.push(a.0 + (py - a.1) / (b.1 - a.1) * (b.0 - a.0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks(2) {
                if let [l, r] = pair {
                    let (xa, xb) = ((l - 0.5).ceil() as i64, (r - 0.5).ceil() as i64);
                    for x in xa..xb {
                        self.put(x, y, color, label);
                    }
                }
            }
        }
    }

    /// Draw `text` with its top-left corner at (`x`, `y`).
    pub fn text(&mut self, x: f64, y: f64, text: &str, scale: usize, color: Rgb, label: Element) {
        let (x0, y0) = (x.round() as i64, y.round() as i64);
        for (i, c) in text.chars().enumerate() {
            let gx = x0 + (i * font::ADVANCE * scale) as i64;
            for fy in 0..font::GLYPH_H {
                for fx in 0..font::GLYPH_W {
                    if font::lit(c, fx, fy) {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                self.put(gx + (fx * scale + sx) as i64, y0 + (fy * scale + sy) as i64, color, label);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Text centred horizontally on `cx`.
    pub fn text_centered(&mut self, cx: f64, y: f64, text: &str, scale: usize, color: Rgb, label: Element) {
        self.text(cx - font::text_width(text, scale) as f64 / 2.0, y, text, scale, color, label);
    }

    pub fn count(&self, label: Element) -> usize {
        self.mask.iter().filter(|&&m| m == label as u8).count()
    }
}

/// Truncate `text` so that it renders within `max_px` at `scale`.
pub fn fit_text(text: &str, scale: usize, max_px: f64) -> String {
    let max_chars = ((max_px / scale as f64 + 1.0) / font::ADVANCE as f64).floor().max(0.0) as usize;
    text.chars().take(max_chars).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_covers_pixel_centres() {
        let mut c = Canvas::new(10, 10, [1.0; 3]);
        c.fill_rect(1.0, 2.0, 4.0, 3.0, [0.0; 3], Element::Mark);
        assert_eq!(c.count(Element::Mark), 3);
    }

    #[test]
    fn polygon_square_matches_rect() {
        let mut a = Canvas::new(12, 12, [1.0; 3]);
        let mut b = Canvas::new(12, 12, [1.0; 3]);
        a.polygon(&[(2.0, 2.0), (9.0, 2.0), (9.0, 7.0), (2.0, 7.0)], [0.0; 3], Element::Mark);
        b.fill_rect(2.0, 2.0, 9.0, 7.0, [0.0; 3], Element::Mark);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.count(Element::Mark), 35);
    }

    #[test]
    fn text_marks_only_lit_pixels() {
        let mut c = Canvas::new(20, 10, [1.0; 3]);
        c.text(0.0, 0.0, "I", 1, [0.0; 3], Element::Text);
        assert_eq!(c.count(Element::Text), glyph_pixels('I'));
        assert_eq!(fit_text("ABCDEFGH", 1, 17.0), "ABC");
    }

    fn glyph_pixels(ch: char) -> usize {
        font::glyph(ch).iter().map(|r| r.count_ones() as usize).sum()
    }
}
