//! Corruption channels, the LSB baseline and the robustness suite.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Canvas, Element};
use crate::importance::{predict_importance, ImportanceModel};
use crate::metrics::tra;
use crate::pipeline::{decode_blocks, encode_with_map, DecodeReport, PayloadEnvelope, PayloadKind, PipelineError};
use crate::planner::PlanOptions;
use crate::qrcodec::split_text;
use crate::raster::{to_u8, ChartImage, RasterError};
use crate::stegonet::StegoModel;

pub const WATERMARK_TEXT: &str = "WATERMARK";
pub const WATERMARK_ALPHA: f32 = 0.3;
/// Payload used by the suite: 12,000 bits of text.
pub const SUITE_TEXT_BYTES: usize = 1500;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("invalid scenario: {0}")]
    BadScenario(String),
    #[error("{bits} bits exceed the LSB capacity of {capacity}")]
    CapacityExceeded { bits: usize, capacity: usize },
    #[error("perceptual distance unavailable: no feature backbone loaded")]
    Unavailable,
    #[error("feature backbone returned mismatched layers")]
    BackboneMismatch,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorruptionScenario {
    Clean,
    Watermark,
    Brightness { factor: f32 },
    Rotation { degrees: u32 },
    Jpeg { quality: u8 },
}

impl CorruptionScenario {
    /// Clean plus the four channels.
    pub fn standard() -> Vec<CorruptionScenario> {
        use CorruptionScenario::*;
        vec![
            Clean,
            Watermark,
            Brightness { factor: 0.9 },
            Brightness { factor: 1.1 },
            Rotation { degrees: 180 },
            Jpeg { quality: 90 },
        ]
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        match *self {
            CorruptionScenario::Brightness { factor } if factor != 0.9 && factor != 1.1 => {
                Err(DefenseError::BadScenario(format!("brightness factor {factor} is not 0.9 or 1.1")))
            }
            CorruptionScenario::Rotation { degrees } if ![90, 180, 270].contains(&degrees) => {
                Err(DefenseError::BadScenario(format!("rotation {degrees} is not 90, 180 or 270")))
            }
            CorruptionScenario::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(DefenseError::BadScenario(format!("jpeg quality {quality} outside 1..=100")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CorruptionScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorruptionScenario::Clean => write!(f, "clean"),
            CorruptionScenario::Watermark => write!(f, "watermark"),
            CorruptionScenario::Brightness { factor } => write!(f, "brightness x{factor}"),
            CorruptionScenario::Rotation { degrees } => write!(f, "rotation {degrees}"),
            CorruptionScenario::Jpeg { quality } => write!(f, "jpeg q{quality}"),
        }
    }
}

fn watermark(image: &ChartImage) -> ChartImage {
    let (w, h) = image.dims();
    let scale = (w.min(h) / 160).max(1);
    let text_w = (WATERMARK_TEXT.len() * 6 - 1) * scale;
    let margin = 4 * scale;
    let mut stamp = Canvas::new(w, h, [1.0; 3]);
    stamp.text(
        w.saturating_sub(text_w + margin) as f64,
        h.saturating_sub(7 * scale + margin) as f64,
        WATERMARK_TEXT,
        scale,
        [0.0; 3],
        Element::Text,
    );
    let mut out = image.clone();
    let ink = [0.5f32; 3];
    for y in 0..h {
        for x in 0..w {
            if stamp.mask[y * w + x] == Element::Text as u8 {
                let p = out.pixel(x, y);
                out.set_pixel(x, y, [0, 1, 2].map(|c| (1.0 - WATERMARK_ALPHA) * p[c] + WATERMARK_ALPHA * ink[c]));
            }
        }
    }
    out
}

/// Apply one corruption channel. Deterministic.
pub fn corrupt(image: &ChartImage, scenario: &CorruptionScenario) -> Result<ChartImage, DefenseError> {
    scenario.validate()?;
    Ok(match *scenario {
        CorruptionScenario::Clean => image.clone(),
        CorruptionScenario::Watermark => watermark(image),
        CorruptionScenario::Brightness { factor } => {
            ChartImage::from_planar(image.width, image.height, image.data.iter().map(|&v| (v * factor).clamp(0.0, 1.0)).collect())
        }
        CorruptionScenario::Rotation { degrees } => image.rotate(degrees / 90),
        CorruptionScenario::Jpeg { quality } => ChartImage::decode(&image.encode_jpeg(quality)?)?,
    })
}

pub fn lsb_capacity(image: &ChartImage) -> usize {
    image.data.len()
}

/// Channel samples in raster order: pixel by pixel, R then G then B.
fn raster_index(image: &ChartImage, k: usize) -> usize {
    let hw = image.width * image.height;
    (k % 3) * hw + k / 3
}

/// Replace the least significant bit of the first `bits.len()` 8-bit samples.
pub fn lsb_embed(image: &ChartImage, bits: &[bool]) -> Result<ChartImage, DefenseError> {
    let capacity = lsb_capacity(image);
    if bits.len() > capacity {
        return Err(DefenseError::CapacityExceeded { bits: bits.len(), capacity });
    }
    let mut out = image.quantize();
    for (k, &b) in bits.iter().enumerate() {
        let i = raster_index(image, k);
        let v = (to_u8(out.data[i]) & !1) | b as u8;
        out.data[i] = v as f32 / 255.0;
    }
    Ok(out)
}

pub fn lsb_extract(image: &ChartImage, n: usize) -> Result<Vec<bool>, DefenseError> {
    let capacity = lsb_capacity(image);
    if n > capacity {
        return Err(DefenseError::CapacityExceeded { bits: n, capacity });
    }
    Ok((0..n).map(|k| to_u8(image.data[raster_index(image, k)]) & 1 == 1).collect())
}

/// Most significant bit first.
pub fn bytes_to_bits(bytes: &[u8]) -> Vec<bool> {
    bytes.iter().flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1 == 1)).collect()
}

pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8).map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | b as u8) << (8 - c.len())).collect()
}

/// Multi-layer feature extractor for the perceptual distance.
pub trait FeatureBackbone: Send + Sync {
    fn name(&self) -> &str;
    /// One feature map per layer, each laid out as `channels x positions`.
    fn features(&self, image: &ChartImage) -> Vec<(usize, Vec<f32>)>;
}

/// Mean over layers of the squared distance between channel-normalised
/// features, averaged over positions.
pub fn perceptual_distance(
    a: &ChartImage,
    b: &ChartImage,
    backbone: Option<&dyn FeatureBackbone>,
) -> Result<f64, DefenseError> {
    let net = backbone.ok_or(DefenseError::Unavailable)?;
    let (fa, fb) = (net.features(a), net.features(b));
    if fa.len() != fb.len() || fa.is_empty() {
        return Err(DefenseError::BackboneMismatch);
    }
    let mut total = 0.0;
    for ((ca, xa), (cb, xb)) in fa.iter().zip(&fb) {
        if ca != cb || xa.len() != xb.len() || *ca == 0 {
            return Err(DefenseError::BackboneMismatch);
        }
        let n = xa.len() / ca;
        let norm = |x: &[f32], p: usize| (0..*ca).map(|c| (x[c * n + p] as f64).powi(2)).sum::<f64>().sqrt() + 1e-10;
        let mut layer = 0.0;
        for p in 0..n {
            let (na, nb) = (norm(xa, p), norm(xb, p));
            layer += (0..*ca).map(|c| (xa[c * n + p] as f64 / na - xb[c * n + p] as f64 / nb).powi(2)).sum::<f64>();
        }
        total += layer / n.max(1) as f64;
    }
    Ok(total / fa.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    VisCode,
    Lsb,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::VisCode => "viscode",
            Method::Lsb => "lsb",
        })
    }
}

/// Text recovery accuracy of a block-wise decode: each block that decoded is
/// compared position by position with the block it should hold.
pub fn block_tra(expected: &[u8], eta: usize, report: &Result<DecodeReport, PipelineError>) -> f64 {
    let Ok(report) = report else { return 0.0 };
    let Ok(blocks) = split_text(expected, eta) else { return 0.0 };
    let hits: usize = blocks
        .iter()
        .zip(&report.blocks)
        .map(|(want, got)| match got {
            Ok(bytes) => want.content.iter().zip(bytes).filter(|(a, b)| a == b).count(),
            Err(_) => 0,
        })
        .sum();
    hits as f64 / expected.len().max(1) as f64
}

pub fn lsb_tra(coded: &ChartImage, expected: &[u8]) -> f64 {
    match lsb_extract(coded, expected.len() * 8) {
        Ok(bits) => tra(expected, &bits_to_bytes(&bits)),
        Err(_) => 0.0,
    }
}

#[derive(Clone, Debug)]
pub struct DefenseConfig {
    pub scenarios: Vec<CorruptionScenario>,
    pub methods: Vec<Method>,
    pub text_bytes: usize,
    pub eta: usize,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            scenarios: CorruptionScenario::standard(),
            methods: vec![Method::VisCode, Method::Lsb],
            text_bytes: SUITE_TEXT_BYTES,
            eta: crate::qrcodec::DEFAULT_ETA,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub method: Method,
    pub scenario: CorruptionScenario,
    pub label: String,
    pub mean_tra: f64,
    pub items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub corpus: String,
    pub charts: usize,
    pub text_bytes: usize,
    pub rows: Vec<DefenseRow>,
    /// Methods or items that could not run, with the reason.
    pub skipped: Vec<String>,
}

impl DefenseReport {
    pub fn tra(&self, method: Method, scenario: &CorruptionScenario) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && &r.scenario == scenario).map(|r| r.mean_tra)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Methods as rows, scenarios as columns.
    pub fn to_markdown(&self) -> String {
        let mut scenarios: Vec<&CorruptionScenario> = Vec::new();
        let mut methods: Vec<Method> = Vec::new();
        for r in &self.rows {
            if !scenarios.contains(&&r.scenario) {
                scenarios.push(&r.scenario);
            }
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        let mut s = format!("Defense suite on {} ({} charts, {} bytes each)\n\n| method |", self.corpus, self.charts, self.text_bytes);
        for sc in &scenarios {
            s += &format!(" {sc} |");
        }
        s += "\n|---|";
        s += &"---|".repeat(scenarios.len());
        s += "\n";
        for m in methods {
            s += &format!("| {m} |");
            for sc in &scenarios {
                match self.tra(m, sc) {
                    Some(t) => s += &format!(" {:.2}% |", 100.0 * t),
                    None => s += " - |",
                }
            }
            s += "\n";
        }
        for k in &self.skipped {
            s += &format!("\nskipped: {k}");
        }
        s
    }
}

/// Trained networks used by the learned method.
pub struct VisCodeModels<'a> {
    pub importance: &'a ImportanceModel,
    pub stego: &'a StegoModel,
}

pub fn random_text(len: usize, rng: &mut impl Rng) -> Vec<u8> {
    (0..len).map(|_| rng.random_range(0x20u8..0x7f)).collect()
}

/// Embed a random text in every chart with each method, pass the result
/// through every scenario and average the recovery accuracy.
pub fn run_defense_suite(
    corpus: &str,
    charts: &[ChartImage],
    models: Option<VisCodeModels<'_>>,
    cfg: &DefenseConfig,
) -> Result<DefenseReport, DefenseError> {
    for s in &cfg.scenarios {
        s.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sums = vec![vec![(0.0f64, 0usize); cfg.scenarios.len()]; cfg.methods.len()];
    let mut skipped = Vec::new();
    for (ci, chart) in charts.iter().enumerate() {
        let env = PayloadEnvelope::new(PayloadKind::Metadata, random_text(cfg.text_bytes, &mut rng));
        let bytes = env.to_bytes().expect("suite payloads are small");
        for (mi, method) in cfg.methods.iter().enumerate() {
            let coded = match method {
                Method::Lsb => match lsb_embed(chart, &bytes_to_bits(&bytes)) {
                    Ok(c) => c,
                    Err(e) => {
                        skipped.push(format!("lsb chart {ci}: {e}"));
                        continue;
                    }
                },
                Method::VisCode => {
                    let Some(m) = &models else { continue };
                    let coded = predict_importance(chart, m.importance)
                        .map_err(PipelineError::from)
                        .and_then(|v| encode_with_map(chart, &env, &v, m.stego, cfg.eta, &PlanOptions::default()));
                    match coded {
                        Ok(c) => c.image,
                        Err(e) => {
                            skipped.push(format!("viscode chart {ci}: {e}"));
                            continue;
                        }
                    }
                }
            };
            for (si, sc) in cfg.scenarios.iter().enumerate() {
                let received = corrupt(&coded, sc)?.quantize();
                let t = match (method, &models) {
                    (Method::Lsb, _) => lsb_tra(&received, &bytes),
                    (Method::VisCode, Some(m)) => block_tra(&bytes, cfg.eta, &decode_blocks(&received, m.stego)),
                    (Method::VisCode, None) => unreachable!("skipped above"),
                };
                sums[mi][si].0 += t;
                sums[mi][si].1 += 1;
            }
        }
    }
    if models.is_none() && cfg.methods.contains(&Method::VisCode) {
        skipped.push("viscode: no trained checkpoints".into());
    }
    let mut rows = Vec::new();
    for (mi, method) in cfg.methods.iter().enumerate() {
        for (si, sc) in cfg.scenarios.iter().enumerate() {
            let (sum, n) = sums[mi][si];
            if n > 0 {
                rows.push(DefenseRow { method: *method, scenario: *sc, label: sc.to_string(), mean_tra: sum / n as f64, items: n });
            }
        }
    }
    Ok(DefenseReport { corpus: corpus.to_string(), charts: charts.len(), text_bytes: cfg.text_bytes, rows, skipped })
}
