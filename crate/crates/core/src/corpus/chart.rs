//! Chart specifications and the native renderer that produces an image plus an
//! aligned element mask.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::canvas::{fit_text, Canvas, Element, Rgb};
use super::density::{kde_density, Bandwidth};
use super::CorpusError;
use crate::raster::{ChartImage, Plane};

pub const MIN_CHART_SIDE: usize = 300;
pub const MAX_CHART_SIDE: usize = 3000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartType {
    Bar,
    Line,
    Scatter,
    Pie,
    Area,
    Density,
    Network,
    Treemap,
    Heatmap,
    Radar,
}

impl ChartType {
    pub const ALL: [ChartType; 10] = [
        ChartType::Bar,
        ChartType::Line,
        ChartType::Scatter,
        ChartType::Pie,
        ChartType::Area,
        ChartType::Density,
        ChartType::Network,
        ChartType::Treemap,
        ChartType::Heatmap,
        ChartType::Radar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChartType::Bar => "bar",
            ChartType::Line => "line",
            ChartType::Scatter => "scatter",
            ChartType::Pie => "pie",
            ChartType::Area => "area",
            ChartType::Density => "density",
            ChartType::Network => "network",
            ChartType::Treemap => "treemap",
            ChartType::Heatmap => "heatmap",
            ChartType::Radar => "radar",
        }
    }

    /// Types that read the same data shape and can therefore replace this one.
    pub fn compatible_targets(self) -> &'static [ChartType] {
        use ChartType::*;
        match self {
            Bar | Line | Area | Pie | Treemap | Radar => &[Bar, Line, Area, Pie, Treemap, Radar],
            Scatter | Density => &[Scatter, Density],
            Heatmap => &[Heatmap],
            Network => &[Network],
        }
    }
}

impl fmt::Display for ChartType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChartType {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| CorpusError::UnsupportedChart(s.to_string()))
    }
}

/// One table value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v).filter(|v| v.is_finite()),
            Cell::Text(s) => s.trim().parse().ok().filter(|v: &f64| v.is_finite()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Cell::Num(v) => fmt_num(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// Channel assignments. For network charts `x` and `y` are the edge endpoints;
/// for heatmaps `color` holds the cell value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub x: String,
    pub y: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
    /// KDE bandwidth as a fraction of the data range (density charts).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theme {
    pub name: String,
    #[serde(default = "one")]
    pub font_scale: f32,
}

fn one() -> f32 {
    1.0
}

impl Default for Theme {
    fn default() -> Self {
        Self { name: "light".into(), font_scale: 1.0 }
    }
}

pub const THEMES: [&str; 4] = ["light", "dark", "pastel", "mono"];

struct Palette {
    background: Rgb,
    ink: Rgb,
    series: [Rgb; 8],
}

fn hex(v: u32) -> Rgb {
    [(v >> 16) as f32 / 255.0, ((v >> 8) & 0xff) as f32 / 255.0, (v & 0xff) as f32 / 255.0]
}

fn palette(name: &str) -> Option<Palette> {
    let p = |bg: u32, ink: u32, s: [u32; 8]| Palette { background: hex(bg), ink: hex(ink), series: s.map(hex) };
    Some(match name {
        "light" => p(0xffffff, 0x333333, [0x4e79a7, 0xf28e2b, 0xe15759, 0x76b7b2, 0x59a14f, 0xedc948, 0xb07aa1, 0xff9da7]),
        "dark" => p(0x202124, 0xe8eaed, [0x8ab4f8, 0xf6ae2d, 0xf28b82, 0x81c995, 0xfdd663, 0xc58af9, 0x78d9ec, 0xff8bcb]),
        "pastel" => p(0xfbf8f1, 0x4a4a58, [0xa1c9f4, 0xffb482, 0x8de5a1, 0xff9f9b, 0xd0bbff, 0xdebb9b, 0xfab0e4, 0xb9f2f0]),
        "mono" => p(0xffffff, 0x000000, [0x08306b, 0x2171b5, 0x4292c6, 0x6baed6, 0x252525, 0x636363, 0x969696, 0x084594]),
        _ => return None,
    })
}

fn mix(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub chart_type: ChartType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub encoding: Encoding,
    #[serde(default)]
    pub theme: Theme,
    pub width: usize,
    pub height: usize,
}

impl ChartSpec {
    /// Parse JSON, reporting unknown chart types as [`CorpusError::UnsupportedChart`].
    pub fn from_json(text: &str) -> Result<ChartSpec, CorpusError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(t) = value.get("chart_type").and_then(|t| t.as_str()) {
            t.parse::<ChartType>()?;
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("chart specs always serialize")
    }

    fn column(&self, name: &str) -> Result<usize, CorpusError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CorpusError::InvalidSpec(format!("encoding references missing column {name:?}")))
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for (what, v) in [("width", self.width), ("height", self.height)] {
            if !(MIN_CHART_SIDE..=MAX_CHART_SIDE).contains(&v) {
                return Err(CorpusError::InvalidSpec(format!("{what} {v} outside [{MIN_CHART_SIDE}, {MAX_CHART_SIDE}]")));
            }
        }
        if palette(&self.theme.name).is_none() {
            return Err(CorpusError::InvalidSpec(format!("unknown theme {:?}", self.theme.name)));
        }
        if !(0.25..=8.0).contains(&self.theme.font_scale) {
            return Err(CorpusError::InvalidSpec(format!("font_scale {} outside [0.25, 8]", self.theme.font_scale)));
        }
        self.column(&self.encoding.x)?;
        self.column(&self.encoding.y)?;
        if let Some(c) = &self.encoding.color {
            self.column(c)?;
        }
        if let Some(i) = self.rows.iter().position(|r| r.len() != self.columns.len()) {
            return Err(CorpusError::InvalidSpec(format!("row {i} has {} cells, expected {}", self.rows[i].len(), self.columns.len())));
        }
        if self.rows.is_empty() {
            return Err(CorpusError::DegenerateData(format!("{} chart has no rows", self.chart_type)));
        }
        if let Some(b) = self.encoding.bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return Err(CorpusError::InvalidSpec(format!("bandwidth {b} must be positive")));
            }
        }
        Ok(())
    }

    fn numbers(&self, col: &str) -> Result<Vec<f64>, CorpusError> {
        let i = self.column(col)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                row[i].as_f64().ok_or_else(|| CorpusError::InvalidSpec(format!("row {r}: column {col:?} is not numeric")))
            })
            .collect()
    }

    fn labels(&self, col: &str) -> Result<Vec<String>, CorpusError> {
        let i = self.column(col)?;
        Ok(self.rows.iter().map(|row| row[i].label()).collect())
    }

    /// Category/value pairs with duplicate categories summed, in first-seen order.
    pub fn category_values(&self) -> Result<Vec<(String, f64)>, CorpusError> {
        let (xs, ys) = (self.labels(&self.encoding.x)?, self.numbers(&self.encoding.y)?);
        let mut out: Vec<(String, f64)> = Vec::new();
        let mut at: HashMap<String, usize> = HashMap::new();
        for (x, y) in xs.into_iter().zip(ys) {
            match at.get(&x) {
                Some(&i) => out[i].1 += y,
                None => {
                    at.insert(x.clone(), out.len());
                    out.push((x, y));
                }
            }
        }
        Ok(out)
    }

    /// Numeric (x, y) points with their optional colour group.
    pub fn points(&self) -> Result<Vec<(f64, f64, Option<String>)>, CorpusError> {
        let (xs, ys) = (self.numbers(&self.encoding.x)?, self.numbers(&self.encoding.y)?);
        let groups = match &self.encoding.color {
            Some(c) => self.labels(c)?.into_iter().map(Some).collect(),
            None => vec![None; xs.len()],
        };
        Ok(xs.into_iter().zip(ys).zip(groups).map(|((x, y), g)| (x, y, g)).collect())
    }
}

/// Per-pixel element labels, row-major, aligned with the chart image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElementMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl ElementMask {
    pub fn get(&self, x: usize, y: usize) -> Element {
        Element::from_u8(self.labels[y * self.width + x]).unwrap_or(Element::Background)
    }

    pub fn count(&self, e: Element) -> usize {
        self.labels.iter().filter(|&&l| l == e as u8).count()
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<(), CorpusError> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("mask buffer matches its dimensions");
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| CorpusError::Io(std::io::Error::other(e)))
    }

    pub fn load(path: &std::path::Path) -> Result<ElementMask, CorpusError> {
        let img = image::open(path).map_err(|e| CorpusError::Io(std::io::Error::other(e)))?.into_luma8();
        let (w, h) = img.dimensions();
        Ok(ElementMask { width: w as usize, height: h as usize, labels: img.into_raw() })
    }

    /// Label map as a plane of raw class values.
    pub fn to_plane(&self) -> Plane {
        Plane::from_vec(self.width, self.height, self.labels.iter().map(|&l| l as f32).collect())
    }
}

#[derive(Clone, Debug)]
pub struct RenderedChart {
    pub image: ChartImage,
    pub mask: ElementMask,
    pub spec: ChartSpec,
}

pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if a >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if a >= 1e4 {
        format!("{:.0}K", v / 1e3)
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else if a >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

struct Frame {
    fs: usize,
    pal: Palette,
    seed: u64,
    /// Plot area: left, top, right, bottom.
    plot: [f64; 4],
    legend_x: f64,
}

impl Frame {
    fn series(&self, i: usize) -> Rgb {
        self.pal.series[(i + self.seed as usize) % self.pal.series.len()]
    }
    fn pw(&self) -> f64 {
        self.plot[2] - self.plot[0]
    }
    fn ph(&self) -> f64 {
        self.plot[3] - self.plot[1]
    }
}

/// Maps [lo, hi] onto [a, b].
#[derive(Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, a: f64, b: f64) -> Self {
        let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        Self { lo, hi, a, b }
    }
    fn at(&self, v: f64) -> f64 {
        self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)))
}

/// Render `spec`; `seed` varies palette rotation and network layout only.
pub fn generate_chart(spec: &ChartSpec, seed: u64) -> Result<RenderedChart, CorpusError> {
    spec.validate()?;
    let pal = palette(&spec.theme.name).expect("validated theme");
    let (w, h) = (spec.width, spec.height);
    let mut cv = Canvas::new(w, h, pal.background);
    let side = w.min(h) as f64;
    let fs = ((spec.theme.font_scale as f64 * side / 320.0).round() as usize).max(1);
    let pad = (side * 0.04).round();
    let th = (7 * fs) as f64;
    let mut top = pad;
    if let Some(t) = &spec.title {
        let t = fit_text(t, fs, w as f64 - 2.0 * pad);
        cv.text_centered(w as f64 / 2.0, pad, &t, fs, pal.ink, Element::Text);
        top += th + pad;
    }
    let legend_w = if needs_legend(spec) { (side * 0.22).round() } else { 0.0 };
    let axes = matches!(
        spec.chart_type,
        ChartType::Bar | ChartType::Line | ChartType::Area | ChartType::Scatter | ChartType::Density | ChartType::Heatmap
    );
    let left = if axes { pad + 6.0 * (6 * fs) as f64 } else { pad };
    let bottom = if axes { h as f64 - pad - th - 2.0 * fs as f64 - 4.0 } else { h as f64 - pad };
    let right = w as f64 - pad - legend_w;
    let frame = Frame { fs, pal, seed, plot: [left, top, right, bottom], legend_x: right + pad * 0.5 };
    if frame.pw() < 40.0 || frame.ph() < 40.0 {
        return Err(CorpusError::InvalidSpec("chart too small for its title and labels".into()));
    }
    match spec.chart_type {
        ChartType::Bar => draw_bar(&mut cv, &frame, spec)?,
        ChartType::Line => draw_line(&mut cv, &frame, spec, false)?,
        ChartType::Area => draw_line(&mut cv, &frame, spec, true)?,
        ChartType::Scatter => draw_scatter(&mut cv, &frame, spec)?,
        ChartType::Pie => draw_pie(&mut cv, &frame, spec)?,
        ChartType::Density => draw_density(&mut cv, &frame, spec)?,
        ChartType::Network => draw_network(&mut cv, &frame, spec)?,
        ChartType::Treemap => draw_treemap(&mut cv, &frame, spec)?,
        ChartType::Heatmap => draw_heatmap(&mut cv, &frame, spec)?,
        ChartType::Radar => draw_radar(&mut cv, &frame, spec)?,
    }
    Ok(RenderedChart { mask: ElementMask { width: w, height: h, labels: cv.mask }, image: cv.image, spec: spec.clone() })
}

fn needs_legend(spec: &ChartSpec) -> bool {
    spec.chart_type == ChartType::Pie
        || (matches!(spec.chart_type, ChartType::Scatter | ChartType::Line) && spec.encoding.color.is_some())
}

fn legend(cv: &mut Canvas, f: &Frame, entries: &[(String, Rgb)]) {
    let step = (10 * f.fs) as f64 + 4.0;
    let sw = (7 * f.fs) as f64;
    let max_px = cv.width() as f64 - f.legend_x - sw - 2.0 * f.fs as f64 - 4.0;
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = f.plot[1] + i as f64 * step;
        if y + step > f.plot[3] {
            break;
        }
        cv.fill_rect(f.legend_x, y, f.legend_x + sw, y + sw, *color, Element::Legend);
        let label = fit_text(name, f.fs, max_px);
        cv.text(f.legend_x + sw + 2.0 * f.fs as f64, y, &label, f.fs, f.pal.ink, Element::Legend);
    }
}

/// Left axis with five value ticks and the bottom axis line at `base`.
fn value_axes(cv: &mut Canvas, f: &Frame, ys: &Scale, base: f64) {
    let lw = f.fs.max(1) as f64;
    let [l, t, r, b] = f.plot;
    cv.line((l, t), (l, b), lw, f.pal.ink, Element::Axis);
    cv.line((l, base), (r, base), lw, f.pal.ink, Element::Axis);
    for k in 0..5 {
        let v = ys.lo + (ys.hi - ys.lo) * k as f64 / 4.0;
        let y = ys.at(v);
        cv.line((l - 3.0 * lw, y), (l, y), lw, f.pal.ink, Element::Axis);
        let label = fit_text(&fmt_num(v), f.fs, l - 5.0 * lw);
        let tw = super::font::text_width(&label, f.fs) as f64;
        cv.text(l - 4.0 * lw - tw, y - (7 * f.fs) as f64 / 2.0, &label, f.fs, f.pal.ink, Element::Text);
    }
    let _ = b;
}

fn category_labels(cv: &mut Canvas, f: &Frame, centers: &[(f64, String)], slot: f64) {
    let y = f.plot[3] + 2.0 * f.fs as f64 + 3.0;
    let stride = if slot < (4 * 6 * f.fs) as f64 { ((4 * 6 * f.fs) as f64 / slot).ceil() as usize } else { 1 };
    for (i, (cx, label)) in centers.iter().enumerate() {
        if i % stride == 0 {
            let label = fit_text(label, f.fs, slot * stride as f64 - 2.0);
            cv.text_centered(*cx, y, &label, f.fs, f.pal.ink, Element::Text);
        }
    }
}

fn draw_bar(cv: &mut Canvas, f: &Frame, spec: &ChartSpec) -> Result<(), CorpusError> {
    let cats = spec.category_values()?;
    let (lo, hi) = bounds(cats.iter().map(|c| c.1));
    let ys = Scale::new(lo.min(0.0), hi.max(0.0), f.plot[3], f.plot[1]);
    let base = ys.at(0.0);
    let slot = f.pw() / cats.len() as f64;
    let bw = (slot * 0.7).max(1.0);
    let mut centers = Vec::new();
    for (i, (name, v)) in cats.iter().enumerate() {
        let cx = f.plot[0] + slot * (i as f64 + 0.5);
        let y = ys.at(*v);
        let (y0, y1) = if (y - base).abs() < 1.0 { (base - 1.0, base) } else { (y.min(base), y.max(base)) };
        cv.fill_rect(cx - bw / 2.0, y0, cx + bw / 2.0, y1, f.series(0), Element::Mark);
        centers.push((cx, name.clone()));
    }
    value_axes(cv, f, &ys, base);
    category_labels(cv, f, &centers, slot);
    Ok(())
}

fn draw_line(cv: &mut Canvas, f: &Frame, spec: &ChartSpec, area: bool) -> Result<(), CorpusError> {
    let xs_num = spec.numbers(&spec.encoding.x).ok();
    let ys_all = spec.numbers(&spec.encoding.y)?;
    let groups: Vec<String> = match (&spec.encoding.color, area) {
        (Some(c), false) => spec.labels(c)?,
        _ => vec![String::new(); ys_all.len()],
    };
    let mut order: Vec<String> = Vec::new();
    for g in &groups {
        if !order.contains(g) {
            order.push(g.clone());
        }
    }
    // x positions: numeric when the column is numeric, otherwise category slots.
    let (xpos, centers, slot): (Vec<f64>, Vec<(f64, String)>, f64) = match &xs_num {
        Some(xs) => {
            let (lo, hi) = bounds(xs.iter().copied());
            let sc = Scale::new(lo, hi, f.plot[0] + 4.0, f.plot[2] - 4.0);
            let ticks = (0..5).map(|k| {
                let v = sc.lo + (sc.hi - sc.lo) * k as f64 / 4.0;
                (sc.at(v), fmt_num(v))
            });
            (xs.iter().map(|&x| sc.at(x)).collect(), ticks.collect(), f.pw() / 5.0)
        }
        None => {
            let labels = spec.labels(&spec.encoding.x)?;
            let mut cats: Vec<String> = Vec::new();
            for l in &labels {
                if !cats.contains(l) {
                    cats.push(l.clone());
                }
            }
            let slot = f.pw() / cats.len() as f64;
            let pos = |l: &String| f.plot[0] + slot * (cats.iter().position(|c| c == l).unwrap_or(0) as f64 + 0.5);
            let centers = cats.iter().map(|c| (pos(c), c.clone())).collect();
            (labels.iter().map(pos).collect(), centers, slot)
        }
    };
    let (lo, hi) = bounds(ys_all.iter().copied());
    let (lo, hi) = if area { (lo.min(0.0), hi.max(0.0)) } else { (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo)) };
    let ys = Scale::new(lo, hi, f.plot[3], f.plot[1]);
    let base = if area { ys.at(0.0) } else { f.plot[3] };
    let lw = (2 * f.fs).max(2) as f64;
    let mut entries = Vec::new();
    for (gi, g) in order.iter().enumerate() {
        let mut pts: Vec<(f64, f64)> =
            (0..ys_all.len()).filter(|&i| &groups[i] == g).map(|i| (xpos[i], ys.at(ys_all[i]))).collect();
        if pts.len() < 2 {
            return Err(CorpusError::DegenerateData(format!("{} series {g:?} needs at least two rows", spec.chart_type)));
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = f.series(gi);
        if area {
            let mut poly = pts.clone();
            poly.push((pts[pts.len() - 1].0, base));
            poly.push((pts[0].0, base));
            cv.polygon(&poly, mix(color, f.pal.background, 0.45), Element::Mark);
        }
        for s in pts.windows(2) {
            cv.line(s[0], s[1], lw, color, Element::Mark);
        }
        if !area {
            for p in &pts {
                cv.circle(*p, lw * 1.2, color, Element::Mark);
            }
        }
        entries.push((g.clone(), color));
    }
    value_axes(cv, f, &ys, base);
    category_labels(cv, f, &centers, slot);
    if spec.encoding.color.is_some() && !area {
        legend(cv, f, &entries);
    }
    Ok(())
}

fn draw_scatter(cv: &mut Canvas, f: &Frame, spec: &ChartSpec) -> Result<(), CorpusError> {
    let pts = spec.points()?;
    let (xl, xh) = bounds(pts.iter().map(|p| p.0));
    let (yl, yh) = bounds(pts.iter().map(|p| p.1));
    let (mx, my) = (0.05 * (xh - xl), 0.05 * (yh - yl));
    let xs = Scale::new(xl - mx, xh + mx, f.plot[0], f.plot[2]);
    let ys = Scale::new(yl - my, yh + my, f.plot[3], f.plot[1]);
    let mut order: Vec<Option<String>> = Vec::new();
    for p in &pts {
        if !order.contains(&p.2) {
            order.push(p.2.clone());
        }
    }
    let r = (1.5 * f.fs as f64).max(2.5);
    for (x, y, g) in &pts {
        let gi = order.iter().position(|o| o == g).unwrap_or(0);
        cv.circle((xs.at(*x), ys.at(*y)), r, f.series(gi), Element::Mark);
    }
    value_axes(cv, f, &ys, f.plot[3]);
    let ticks: Vec<(f64, String)> = (0..5)
        .map(|k| {
            let v = xs.lo + (xs.hi - xs.lo) * k as f64 / 4.0;
            (xs.at(v), fmt_num(v))
        })
        .collect();
    category_labels(cv, f, &ticks, f.pw() / 5.0);
    if spec.encoding.color.is_some() {
        let entries: Vec<(String, Rgb)> =
            order.iter().enumerate().map(|(i, g)| (g.clone().unwrap_or_default(), f.series(i))).collect();
        legend(cv, f, &entries);
    }
    Ok(())
}

fn draw_pie(cv: &mut Canvas, f: &Frame, spec: &ChartSpec) -> Result<(), CorpusError> {
    let cats = spec.category_values()?;
    if cats.iter().any(|c| c.1 < 0.0) {
        return Err(CorpusError::DegenerateData("pie values must be non-negative".into()));
    }
    let total: f64 = cats.iter().map(|c| c.1).sum();
    if total <= 0.0 {
        return Err(CorpusError::DegenerateData("pie values sum to zero".into()));
    }
    let c = ((f.plot[0] + f.plot[2]) / 2.0, (f.plot[1] + f.plot[3]) / 2.0);
    let r = 0.45 * f.pw().min(f.ph());
    let mut a0 = -std::f64::consts::FRAC_PI_2;
    let mut entries = Vec::new();
    for (i, (name, v)) in cats.iter().enumerate() {
        let sweep = v / total * std::f64::consts::TAU;
        let steps = ((sweep * r / 3.0).ceil() as usize).max(2);
        let mut poly = vec![c];
        for k in 0..=steps {
            let a = a0 + sweep * k as f64 / steps as f64;
            poly.push((c.0 + r * a.cos(), c.1 + r * a.sin()));
        }
        let color = f.series(i);
        cv.polygon(&poly, color, Element::Mark);
        entries.push((name.clone(), color));
        a0 += sweep;
    }
    legend(cv, f, &entries);
    Ok(())
}

fn draw_density(cv: &mut Canvas, f: &Frame, spec: &ChartSpec) -> Result<(), CorpusError> {
    let pts = spec.points()?;
    if pts.len() < 2 {
        return Err(CorpusError::DegenerateData("density chart needs at least two points".into()));
    }
    let (xl, xh) = bounds(pts.iter().map(|p| p.0));
    let (yl, yh) = bounds(pts.iter().map(|p| p.1));
    let (mx, my) = (0.15 * (xh - xl).max(1e-9), 0.15 * (yh - yl).max(1e-9));
    let extent = [xl - mx, xh + mx, yl - my, yh + my];
    let bw = match spec.encoding.bandwidth {
        Some(frac) => Bandwidth::Fixed(frac * (extent[1] - extent[0]).max(extent[3] - extent[2])),
        None => Bandwidth::Auto,
    };
    let (gw, gh) = (f.pw().round() as usize, f.ph().round() as usize);
    let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1)).collect();
    let grid = kde_density(&xy, bw, (gw, gh), extent).map_err(|e| CorpusError::DegenerateData(e.to_string()))?;
    let peak = grid.values.iter().copied().fold(0.0, f64::max);
    let hot = f.series(2);
    let cool = f.series(0);
    let (x0, y0) = (f.plot[0].round() as i64, f.plot[1].round() as i64);
    for gy in 0..gh {
        for gx in 0..gw {
            // Grid rows run bottom-up in data space.
            let d = grid.values[gy * gw + gx] / peak;
            if d > 0.05 {
                let t = d as f32;
                let col = if t < 0.5 { mix(f.pal.background, cool, t * 2.0) } else { mix(cool, hot, (t - 0.5) * 2.0) };
                cv.put(x0 + gx as i64, y0 + (gh - 1 - gy) as i64, col, Element::Mark);
            }
        }
    }
    let ys = Scale::new(extent[2], extent[3], f.plot[3], f.plot[1]);
    value_axes(cv, f, &ys, f.plot[3]);
    let xs = Scale::new(extent[0], extent[1], f.plot[0], f.plot[2]);
    let ticks: Vec<(f64, String)> = (0..5)
        .map(|k| {
            let v = xs.lo + (xs.hi - xs.lo) * k as f64 / 4.0;
            (xs.at(v), fmt_num(v))
        })
        .collect();
    category_labels(cv, f, &ticks, f.pw() / 5.0);
    Ok(())
}

fn draw_network(cv: &mut Canvas, f: &Frame, spec: &ChartSpec) -> Result<(), CorpusError> {
    let (src, dst) = (spec.labels(&spec.encoding.x)?, spec.labels(&spec.encoding.y)?);
    let mut nodes: Vec<String> = Vec::new();
    for n in src.iter().chain(&dst) {
        if !nodes.contains(n) {
            nodes.push(n.clone());
        }
    }
    let c = ((f.plot[0] + f.plot[2]) / 2.0, (f.plot[1] + f.plot[3]) / 2.0);
    let r = 0.36 * f.pw().min(f.ph());
    let phase = (f.seed % 360) as f64 * std::f64::consts::PI / 180.0;
    let pos: Vec<(f64, f64)> = (0..nodes.len())
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / nodes.len() as f64;
            (c.0 + r * a.cos(), c.1 + r * a.sin())
        })
        .collect();
    let idx = |n: &String| nodes.iter().position(|m| m == n).expect("node collected above");
    let edge = mix(f.pal.ink, f.pal.background, 0.5);
    for (a, b) in src.iter().zip(&dst) {
        cv.line(pos[idx(a)], pos[idx(b)], f.fs.max(1) as f64, edge, Element::Mark);
    }
    let nr = (3.0 * f.fs as f64).max(4.0);
    for (i, p) in pos.iter().enumerate() {
        cv.circle(*p, nr, f.series(i % 3), Element::Mark);
        let label = fit_text(&nodes[i], f.fs, 0.25 * f.pw());
        let dx = p.0 - c.0;
        let lx = if dx >= 0.0 { p.0 + nr + 2.0 } else { p.0 - nr - 2.0 - super::font::text_width(&label, f.fs) as f64 };
        cv.text(lx, p.1 - (7 * f.fs) as f64 / 2.0, &label, f.fs, f.pal.ink, Element::Text);
    }
    Ok(())
}

/// Split `items` (value-descending) into rectangles by recursive bisection.
fn treemap_layout(items: &[(usize, f64)], rect: [f64; 4], out: &mut Vec<(usize, [f64; 4])>) {
    match items {
        [] => {}
        [(i, _)] => out.push((*i, rect)),
        _ => {
            let total: f64 = items.iter().map(|x| x.1).sum();
            let mut acc = 0.0;
            let mut k = 1;
            for (j, it) in items.iter().enumerate() {
                acc += it.1;
                if acc >= total / 2.0 {
                    k = (j + 1).clamp(1, items.len() - 1);
                    break;
                }
            }
            let share = items[..k].iter().map(|x| x.1).sum::<f64>() / total.max(1e-12);
            let [l, t, r, b] = rect;
            let (ra, rb) = if r - l >= b - t {
                let m = l + (r - l) * share;
                ([l, t, m, b], [m, t, r, b])
            } else {
                let m = t + (b - t) * share;
                ([l, t, r, m], [l, m, r, b])
            };
            treemap_layout(&items[..k], ra, out);
            treemap_layout(&items[k..], rb, out);
        }
    }
}

fn draw_treemap(cv: &mut Canvas, f: &Frame, spec: &ChartSpec) -> Result<(), CorpusError> {
    let cats = spec.category_values()?;
    if cats.iter().any(|c| c.1 < 0.0) || cats.iter().all(|c| c.1 <= 0.0) {
        return Err(CorpusError::DegenerateData("treemap values must be non-negative with a positive total".into()));
    }
    let mut items: Vec<(usize, f64)> = cats.iter().enumerate().filter(|c| c.1 .1 > 0.0).map(|(i, c)| (i, c.1)).collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut rects = Vec::new();
    treemap_layout(&items, f.plot, &mut rects);
    let gap = f.fs as f64;
    for (k, (i, [l, t, r, b])) in rects.into_iter().enumerate() {
        cv.fill_rect(l + gap, t + gap, r - gap, b - gap, f.series(k), Element::Mark);
        if r - l > (4 * 6 * f.fs) as f64 && b - t > (12 * f.fs) as f64 {
            let label = fit_text(&cats[i].0, f.fs, r - l - 4.0 * gap);
            cv.text(l + 2.0 * gap, t + 2.0 * gap, &label, f.fs, f.pal.background, Element::Text);
        }
    }
    Ok(())
}

fn draw_heatmap(cv: &mut Canvas, f: &Frame, spec: &ChartSpec) -> Result<(), CorpusError> {
    let vcol = spec
        .encoding
        .color
        .clone()
        .ok_or_else(|| CorpusError::InvalidSpec("heatmap needs a color column holding cell values".into()))?;
    let (xl, yl, vs) = (spec.labels(&spec.encoding.x)?, spec.labels(&spec.encoding.y)?, spec.numbers(&vcol)?);
    let uniq = |v: &[String]| {
        let mut u: Vec<String> = Vec::new();
        for s in v {
            if !u.contains(s) {
                u.push(s.clone());
            }
        }
        u
    };
    let (cx, cy) = (uniq(&xl), uniq(&yl));
    let (lo, hi) = bounds(vs.iter().copied());
    let (cw, ch) = (f.pw() / cx.len() as f64, f.ph() / cy.len() as f64);
    let (a, b) = (mix(f.pal.background, f.series(0), 0.15), f.series(2));
    for i in 0..vs.len() {
        let gx = cx.iter().position(|c| *c == xl[i]).expect("collected");
        let gy = cy.iter().position(|c| *c == yl[i]).expect("collected");
        let t = if hi > lo { ((vs[i] - lo) / (hi - lo)) as f32 } else { 1.0 };
        let (l, tp) = (f.plot[0] + gx as f64 * cw, f.plot[1] + gy as f64 * ch);
        cv.fill_rect(l + 1.0, tp + 1.0, l + cw - 1.0, tp + ch - 1.0, mix(a, b, t), Element::Mark);
    }
    let centers: Vec<(f64, String)> =
        cx.iter().enumerate().map(|(i, c)| (f.plot[0] + (i as f64 + 0.5) * cw, c.clone())).collect();
    category_labels(cv, f, &centers, cw);
    for (j, c) in cy.iter().enumerate() {
        let label = fit_text(c, f.fs, f.plot[0] - 8.0);
        let tw = super::font::text_width(&label, f.fs) as f64;
        let y = f.plot[1] + (j as f64 + 0.5) * ch - (7 * f.fs) as f64 / 2.0;
        if ch >= (8 * f.fs) as f64 || j % 2 == 0 {
            cv.text(f.plot[0] - 4.0 - tw, y, &label, f.fs, f.pal.ink, Element::Text);
        }
    }
    Ok(())
}

fn draw_radar(cv: &mut Canvas, f: &Frame, spec: &ChartSpec) -> Result<(), CorpusError> {
    let cats = spec.category_values()?;
    if cats.len() < 3 {
        return Err(CorpusError::DegenerateData("radar chart needs at least three categories".into()));
    }
    let hi = cats.iter().map(|c| c.1).fold(0.0, f64::max);
    if hi <= 0.0 || cats.iter().any(|c| c.1 < 0.0) {
        return Err(CorpusError::DegenerateData("radar values must be non-negative with a positive maximum".into()));
    }
    let c = ((f.plot[0] + f.plot[2]) / 2.0, (f.plot[1] + f.plot[3]) / 2.0);
    let r = 0.38 * f.pw().min(f.ph());
    let n = cats.len();
    let dir = |i: usize| {
        let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * i as f64 / n as f64;
        (a.cos(), a.sin())
    };
    let lw = f.fs.max(1) as f64;
    let grid = mix(f.pal.ink, f.pal.background, 0.6);
    for ring in 1..=4 {
        let rr = r * ring as f64 / 4.0;
        for i in 0..n {
            let (a, b) = (dir(i), dir((i + 1) % n));
            cv.line((c.0 + rr * a.0, c.1 + rr * a.1), (c.0 + rr * b.0, c.1 + rr * b.1), lw, grid, Element::Axis);
        }
    }
    for i in 0..n {
        let d = dir(i);
        cv.line(c, (c.0 + r * d.0, c.1 + r * d.1), lw, grid, Element::Axis);
    }
    let poly: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let (d, v) = (dir(i), cats[i].1 / hi);
            (c.0 + r * v * d.0, c.1 + r * v * d.1)
        })
        .collect();
    let color = f.series(0);
    cv.polygon(&poly, mix(color, f.pal.background, 0.4), Element::Mark);
    for i in 0..n {
        cv.line(poly[i], poly[(i + 1) % n], 2.0 * lw, color, Element::Mark);
    }
    for (i, (name, _)) in cats.iter().enumerate() {
        let d = dir(i);
        let label = fit_text(name, f.fs, 0.3 * f.pw());
        let tw = super::font::text_width(&label, f.fs) as f64;
        let (px, py) = (c.0 + (r + 6.0 * lw) * d.0, c.1 + (r + 6.0 * lw) * d.1);
        let lx = if d.0 > 0.2 { px } else if d.0 < -0.2 { px - tw } else { px - tw / 2.0 };
        let ly = if d.1 < -0.2 { py - (7 * f.fs) as f64 } else if d.1 > 0.2 { py } else { py - (7 * f.fs) as f64 / 2.0 };
        cv.text(lx, ly, &label, f.fs, f.pal.ink, Element::Text);
    }
    Ok(())
}

const WORDS: [&str; 24] = [
    "alpha", "beta", "gamma", "delta", "north", "south", "east", "west", "q1", "q2", "q3", "q4", "apple", "pear",
    "plum", "fig", "mon", "tue", "wed", "thu", "fri", "sat", "sun", "misc",
];

const TITLES: [&str; 8] = [
    "Quarterly revenue",
    "Site visits",
    "Sensor readings",
    "Survey results",
    "Energy use",
    "Population by region",
    "Team network",
    "Temperature",
];

fn pick_names(rng: &mut impl Rng, n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    while out.len() < n {
        let w = WORDS.choose(rng).expect("non-empty");
        let name = if out.iter().any(|o| o == w) { format!("{w}{}", out.len()) } else { w.to_string() };
        out.push(name);
    }
    out
}

/// Random, valid spec of the given type and size for corpus generation.
pub fn random_spec(chart_type: ChartType, width: usize, height: usize, rng: &mut impl Rng) -> ChartSpec {
    let theme = Theme { name: THEMES.choose(rng).expect("non-empty").to_string(), font_scale: rng.random_range(0.8..1.3) };
    let title = rng.random_bool(0.7).then(|| TITLES.choose(rng).expect("non-empty").to_string());
    let enc = |x: &str, y: &str, color: Option<&str>| Encoding {
        x: x.into(),
        y: y.into(),
        color: color.map(Into::into),
        bandwidth: None,
    };
    let num = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| Cell::Num((rng.random_range(lo..hi) * 10.0).round() / 10.0);
    let (columns, rows, encoding): (Vec<&str>, Vec<Vec<Cell>>, Encoding) = match chart_type {
        ChartType::Bar | ChartType::Line | ChartType::Area | ChartType::Pie | ChartType::Treemap | ChartType::Radar => {
            let n = rng.random_range(3..=9);
            let rows = pick_names(rng, n).into_iter().map(|c| vec![Cell::Text(c), num(rng, 1.0, 100.0)]).collect();
            (vec!["category", "value"], rows, enc("category", "value", None))
        }
        ChartType::Scatter | ChartType::Density => {
            let n = rng.random_range(20..=120);
            let groups = pick_names(rng, 3);
            let centers: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
            let rows = (0..n)
                .map(|_| {
                    let g = rng.random_range(0..3);
                    let jitter = |rng: &mut dyn rand::RngCore| (rng.random::<f64>() + rng.random::<f64>() - 1.0) * 25.0;
                    vec![
                        Cell::Num(((centers[g].0 + jitter(rng)) * 10.0).round() / 10.0),
                        Cell::Num(((centers[g].1 + jitter(rng)) * 10.0).round() / 10.0),
                        Cell::Text(groups[g].clone()),
                    ]
                })
                .collect();
            let color = (chart_type == ChartType::Scatter && rng.random_bool(0.5)).then_some("group");
            (vec!["x", "y", "group"], rows, enc("x", "y", color))
        }
        ChartType::Network => {
            let n = rng.random_range(4..=9);
            let names = pick_names(rng, n);
            let m = rng.random_range(names.len()..=2 * names.len());
            let rows = (0..m)
                .map(|k| {
                    let a = k % names.len();
                    let b = (a + rng.random_range(1..names.len())) % names.len();
                    vec![Cell::Text(names[a].clone()), Cell::Text(names[b].clone())]
                })
                .collect();
            (vec!["source", "target"], rows, enc("source", "target", None))
        }
        ChartType::Heatmap => {
            let (nx, ny) = (rng.random_range(3..=7), rng.random_range(3..=6));
            let xs = pick_names(rng, nx);
            let ys = pick_names(rng, ny);
            let mut rows = Vec::new();
            for y in &ys {
                for x in &xs {
                    rows.push(vec![Cell::Text(x.clone()), Cell::Text(y.clone()), num(rng, 0.0, 50.0)]);
                }
            }
            (vec!["col", "row", "value"], rows, enc("col", "row", Some("value")))
        }
    };
    ChartSpec {
        chart_type,
        title,
        columns: columns.into_iter().map(Into::into).collect(),
        rows,
        encoding,
        theme,
        width,
        height,
    }
}
