//! Synthetic training and test corpora: rendered charts with element masks,
//! importance ground truth derived from the masks, and QR samples.

mod canvas;
mod chart;
mod density;
pub(crate) mod font;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use canvas::{Canvas, Element, Rgb};
pub use chart::{
    fmt_num, generate_chart, random_spec, Cell, ChartSpec, ChartType, ElementMask, Encoding, RenderedChart, Theme,
    MAX_CHART_SIDE, MIN_CHART_SIDE, THEMES,
};
pub use density::{kde_density, silverman, Bandwidth, DensityError, DensityGrid};

use crate::qrcodec::{self, EccLevel, QrError};
use crate::raster::{ChartImage, Plane, RasterError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unsupported chart type {0:?}")]
    UnsupportedChart(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("invalid chart spec: {0}")]
    InvalidSpec(String),
    #[error("need at least 2 items to split, got {0}")]
    TooFewItems(usize),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("mask is {0:?} but image is {1:?}")]
    MaskMismatch((usize, usize), (usize, usize)),
    #[error("corpus layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Qr(#[from] QrError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Base importance of each element class before smoothing.
pub fn element_weight(e: Element) -> f32 {
    match e {
        Element::Text => 1.0,
        Element::Mark => 0.9,
        Element::Legend => 0.8,
        Element::Axis => 0.5,
        Element::Background => 0.0,
    }
}

/// Importance ground truth. `all_background` flags masks without any drawn
/// element, for which the map is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceGt {
    pub map: Plane,
    pub all_background: bool,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur; pixels outside the plane count as zero.
pub fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = p.dims();
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sx = x as i64 + j as i64 - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * p.data[y * w + sx as usize] as f64;
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = Plane::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sy = y as i64 + j as i64 - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            out.data[y * w + x] = acc as f32;
        }
    }
    out
}

/// Weight mask pixels by element class, blur with `blur_sigma` and rescale to
/// a maximum of 1.
pub fn synth_importance_gt(mask: &ElementMask, blur_sigma: f64) -> ImportanceGt {
    let base = Plane::from_vec(mask.width, mask.height, mask.labels.iter().map(|&l| element_weight(Element::from_u8(l).unwrap_or(Element::Background))).collect());
    if base.data.iter().all(|&v| v == 0.0) {
        log::warn!("importance ground truth requested for an all-background mask");
        return ImportanceGt { map: base, all_background: true };
    }
    let mut map = gaussian_blur(&base, blur_sigma);
    let peak = map.data.iter().copied().fold(0.0f32, f32::max);
    map.data.iter_mut().for_each(|v| *v = (*v / peak).clamp(0.0, 1.0));
    ImportanceGt { map, all_background: false }
}

/// A QR symbol of a random payload rendered at its tier.
#[derive(Clone, Debug, PartialEq)]
pub struct QrSample {
    pub payload: String,
    pub ecc_level: EccLevel,
    /// Square side of the rendered raster (the tier resolution, grown if needed).
    pub tier: usize,
    pub image: Plane,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct QrSampleMeta {
    payload: String,
    ecc: EccLevel,
    tier: usize,
}

pub const MAX_QR_PAYLOAD: usize = 2900;

/// `n` samples with payload lengths uniform over 1..=2900 and printable ASCII content.
pub fn generate_qr_corpus(n: usize, seed: u64) -> Result<Vec<QrSample>, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=MAX_QR_PAYLOAD);
            let payload: String = (0..len).map(|_| rng.random_range(0x20u8..0x7f) as char).collect();
            qr_sample(payload)
        })
        .collect()
}

pub fn qr_sample(payload: String) -> Result<QrSample, CorpusError> {
    let tier = qrcodec::map_config(payload.len())?;
    let size = qrcodec::region_size(payload.len(), &tier)?;
    let r = qrcodec::render_qr(payload.as_bytes(), tier.ecc_level, size)?;
    Ok(QrSample { payload, ecc_level: tier.ecc_level, tier: size, image: r.plane })
}

/// Stratified split: each category contributes its share of the
/// `round(n * train_fraction)` training items (largest remainders first), and
/// both sides are non-empty.
pub fn split_dataset<T: Clone, K: Ord + Clone>(
    items: &[T],
    category: impl Fn(&T) -> K,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    if items.len() < 2 {
        return Err(CorpusError::TooFewItems(items.len()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(train_fraction));
    }
    let n = items.len();
    let target = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(category(it)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut quotas: Vec<(usize, f64)> = Vec::new();
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let exact = idx.len() as f64 * target as f64 / n as f64;
        quotas.push((exact.floor() as usize, exact - exact.floor()));
    }
    let mut short = target - quotas.iter().map(|q| q.0).sum::<usize>();
    let mut by_rem: Vec<usize> = (0..quotas.len()).collect();
    by_rem.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for g in by_rem {
        if short == 0 {
            break;
        }
        quotas[g].0 += 1;
        short -= 1;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (idx, (q, _)) in groups.values().zip(&quotas) {
        let mut sorted_train: Vec<usize> = idx[..*q].to_vec();
        let mut sorted_test: Vec<usize> = idx[*q..].to_vec();
        sorted_train.sort_unstable();
        sorted_test.sort_unstable();
        train.extend(sorted_train);
        test.extend(sorted_test);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train.into_iter().map(|i| items[i].clone()).collect(), test.into_iter().map(|i| items[i].clone()).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Contents of `corpus.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    /// Importance blur sigma as a fraction of the shorter image side.
    pub blur_fraction: f64,
    pub charts: SplitLists,
    pub qr: SplitLists,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub charts: usize,
    pub qr_codes: usize,
    pub seed: u64,
    pub min_side: usize,
    pub max_side: usize,
    pub train_fraction: f64,
    /// Gaussian sigma for importance ground truth, as a fraction of the shorter side.
    pub blur_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { charts: 150, qr_codes: 300, seed: 1, min_side: 300, max_side: 800, train_fraction: 2.0 / 3.0, blur_fraction: 0.02 }
    }
}

impl CorpusConfig {
    pub fn sigma_for(&self, w: usize, h: usize) -> f64 {
        self.blur_fraction * w.min(h) as f64
    }
}

/// Charts cycle through the ten types so each category is equally represented.
pub fn random_chart(index: usize, cfg: &CorpusConfig) -> Result<RenderedChart, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64));
    let t = ChartType::ALL[index % ChartType::ALL.len()];
    let w = rng.random_range(cfg.min_side..=cfg.max_side);
    let h = rng.random_range(cfg.min_side..=cfg.max_side);
    let spec = random_spec(t, w, h, &mut rng);
    generate_chart(&spec, rng.random())
}

/// On-disk corpus: `charts/`, `masks/`, `specs/`, `qr/` and `corpus.json`.
pub struct CorpusDir {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

fn chart_id(i: usize) -> String {
    format!("c{i:05}")
}

fn qr_id(i: usize) -> String {
    format!("q{i:05}")
}

fn split_lists<T>(
    items: &[(String, T)],
    cat: impl Fn(&(String, T)) -> String,
    cfg: &CorpusConfig,
) -> Result<SplitLists, CorpusError>
where
    T: Clone,
{
    if items.len() < 2 {
        return Ok(SplitLists { train: items.iter().map(|i| i.0.clone()).collect(), test: Vec::new() });
    }
    let (a, b) = split_dataset(items, cat, cfg.train_fraction, cfg.seed)?;
    Ok(SplitLists { train: a.into_iter().map(|i| i.0).collect(), test: b.into_iter().map(|i| i.0).collect() })
}

impl CorpusDir {
    pub fn generate(root: &Path, cfg: &CorpusConfig) -> Result<CorpusDir, CorpusError> {
        for sub in ["charts", "masks", "specs", "qr"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let mut chart_items = Vec::new();
        for i in 0..cfg.charts {
            let c = random_chart(i, cfg)?;
            let id = chart_id(i);
            c.image.save_png(root.join("charts").join(format!("{id}.png")))?;
            c.mask.save_png(&root.join("masks").join(format!("{id}.png")))?;
            fs::write(root.join("specs").join(format!("{id}.json")), c.spec.to_json())?;
            chart_items.push((id, c.spec.chart_type));
        }
        let mut qr_items = Vec::new();
        for (i, s) in generate_qr_corpus(cfg.qr_codes, cfg.seed ^ 0x0a11)?.into_iter().enumerate() {
            let id = qr_id(i);
            s.image.save_png(root.join("qr").join(format!("{id}.png")))?;
            let meta = QrSampleMeta { payload: s.payload, ecc: s.ecc_level, tier: s.tier };
            fs::write(root.join("qr").join(format!("{id}.json")), serde_json::to_string(&meta)?)?;
            qr_items.push((id, s.ecc_level));
        }
        let charts = split_lists(&chart_items, |c| c.1.name().to_string(), cfg)?;
        let qr = split_lists(&qr_items, |q| q.1.to_string(), cfg)?;
        let manifest = CorpusManifest { seed: cfg.seed, blur_fraction: cfg.blur_fraction, charts, qr };
        fs::write(root.join("corpus.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(CorpusDir { root: root.to_path_buf(), manifest })
    }

    pub fn open(root: &Path) -> Result<CorpusDir, CorpusError> {
        let text = fs::read_to_string(root.join("corpus.json"))
            .map_err(|e| CorpusError::Layout(format!("{}: {e}", root.join("corpus.json").display())))?;
        Ok(CorpusDir { root: root.to_path_buf(), manifest: serde_json::from_str(&text)? })
    }

    pub fn load_chart(&self, id: &str) -> Result<(ChartImage, ElementMask, ChartSpec), CorpusError> {
        let image = ChartImage::load(self.root.join("charts").join(format!("{id}.png")))?;
        let mask = ElementMask::load(&self.root.join("masks").join(format!("{id}.png")))?;
        if (mask.width, mask.height) != image.dims() {
            return Err(CorpusError::MaskMismatch((mask.width, mask.height), image.dims()));
        }
        let spec = ChartSpec::from_json(&fs::read_to_string(self.root.join("specs").join(format!("{id}.json")))?)?;
        Ok((image, mask, spec))
    }

    /// Image plus importance ground truth at the sigma recorded in the manifest.
    pub fn load_importance_pair(&self, id: &str) -> Result<(ChartImage, Plane), CorpusError> {
        let (image, mask, _) = self.load_chart(id)?;
        let sigma = self.manifest.blur_fraction * image.width.min(image.height) as f64;
        Ok((image, synth_importance_gt(&mask, sigma).map))
    }

    pub fn load_qr(&self, id: &str) -> Result<QrSample, CorpusError> {
        let meta: QrSampleMeta = serde_json::from_str(&fs::read_to_string(self.root.join("qr").join(format!("{id}.json")))?)?;
        let image = Plane::load(self.root.join("qr").join(format!("{id}.png")))?;
        Ok(QrSample { payload: meta.payload, ecc_level: meta.ecc, tier: meta.tier, image })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bar_spec(n: usize) -> ChartSpec {
        ChartSpec {
            chart_type: ChartType::Bar,
            title: Some("Sales".into()),
            columns: vec!["k".into(), "v".into()],
            rows: (0..n).map(|i| vec![Cell::Text(format!("c{i}")), Cell::Num(10.0 + 7.0 * i as f64)]).collect(),
            encoding: Encoding { x: "k".into(), y: "v".into(), color: None, bandwidth: None },
            theme: Theme::default(),
            width: 600,
            height: 400,
        }
    }

    /// 4-connected components of `label` in the mask.
    fn components(mask: &ElementMask, label: Element) -> usize {
        let (w, h) = (mask.width, mask.height);
        let mut seen = vec![false; w * h];
        let mut count = 0;
        for start in 0..w * h {
            if seen[start] || mask.labels[start] != label as u8 {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut nb = Vec::new();
                if x > 0 {
                    nb.push(i - 1)
                }
                if x + 1 < w {
                    nb.push(i + 1)
                }
                if y > 0 {
                    nb.push(i - w)
                }
                if y + 1 < h {
                    nb.push(i + w)
                }
                for j in nb {
                    if !seen[j] && mask.labels[j] == label as u8 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn bar_chart_has_one_mark_region_per_category() {
        let c = generate_chart(&bar_spec(5), 7).unwrap();
        assert_eq!(c.image.dims(), (600, 400));
        assert_eq!((c.mask.width, c.mask.height), (600, 400));
        assert_eq!(components(&c.mask, Element::Mark), 5);
        assert!(c.mask.count(Element::Text) > 0 && c.mask.count(Element::Axis) > 0);
    }

    #[test]
    fn rendering_is_deterministic() {
        for t in ChartType::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let spec = random_spec(t, 420, 360, &mut rng);
            let (a, b) = (generate_chart(&spec, 9).unwrap(), generate_chart(&spec, 9).unwrap());
            assert_eq!(a.image, b.image, "{t}");
            assert_eq!(a.mask, b.mask, "{t}");
        }
    }

    #[test]
    fn every_type_draws_marks_and_background() {
        for t in ChartType::ALL {
            for seed in 0..3u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = random_spec(t, 500, 400, &mut rng);
                let c = generate_chart(&spec, seed).unwrap();
                assert!(c.mask.count(Element::Mark) > 0, "{t} seed {seed}");
                assert!(c.mask.count(Element::Background) > 0, "{t} seed {seed}");
                assert!(c.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn mask_pixels_differ_from_background_colour_only_where_drawn() {
        let c = generate_chart(&bar_spec(4), 1).unwrap();
        for y in 0..c.mask.height {
            for x in 0..c.mask.width {
                if c.mask.get(x, y) == Element::Background {
                    assert_eq!(c.image.pixel(x, y), [1.0; 3]);
                }
            }
        }
    }

    #[test]
    fn degenerate_and_unsupported_inputs() {
        let mut s = bar_spec(3);
        s.chart_type = ChartType::Scatter;
        s.columns = vec!["x".into(), "y".into()];
        s.encoding = Encoding { x: "x".into(), y: "y".into(), color: None, bandwidth: None };
        s.rows.clear();
        assert!(matches!(generate_chart(&s, 1), Err(CorpusError::DegenerateData(_))));
        let mut line = bar_spec(1);
        line.chart_type = ChartType::Line;
        assert!(matches!(generate_chart(&line, 1), Err(CorpusError::DegenerateData(_))));
        let json = bar_spec(2).to_json().replace("\"bar\"", "\"sankey\"");
        assert!(matches!(ChartSpec::from_json(&json), Err(CorpusError::UnsupportedChart(t)) if t == "sankey"));
        let mut small = bar_spec(3);
        small.width = 299;
        assert!(matches!(generate_chart(&small, 1), Err(CorpusError::InvalidSpec(_))));
        let mut missing = bar_spec(3);
        missing.encoding.y = "nope".into();
        assert!(matches!(generate_chart(&missing, 1), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn spec_json_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in ChartType::ALL {
            let s = random_spec(t, 640, 480, &mut rng);
            assert_eq!(ChartSpec::from_json(&s.to_json()).unwrap(), s);
        }
    }

    #[test]
    fn theme_swap_keeps_geometry() {
        let a = bar_spec(6);
        let mut b = a.clone();
        b.theme.name = "dark".into();
        let (ra, rb) = (generate_chart(&a, 2).unwrap(), generate_chart(&b, 2).unwrap());
        assert_eq!(ra.mask, rb.mask);
        assert_ne!(ra.image, rb.image);
    }

    fn single_block_mask() -> ElementMask {
        let mut labels = vec![0u8; 32 * 32];
        for y in 12..18 {
            for x in 10..20 {
                labels[y * 32 + x] = Element::Text as u8;
            }
        }
        ElementMask { width: 32, height: 32, labels }
    }

    #[test]
    fn importance_of_all_background_is_zero() {
        let gt = synth_importance_gt(&ElementMask { width: 40, height: 30, labels: vec![0; 1200] }, 3.0);
        assert!(gt.all_background);
        assert!(gt.map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn importance_without_blur_is_the_text_indicator() {
        let m = single_block_mask();
        let gt = synth_importance_gt(&m, 0.0);
        for (l, v) in m.labels.iter().zip(&gt.map.data) {
            assert_eq!(*v, if *l == Element::Text as u8 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn blurred_importance_matches_direct_convolution() {
        let m = single_block_mask();
        let sigma = 4.0f64;
        let gt = synth_importance_gt(&m, sigma).map;
        // Direct 2-D convolution with the same truncated, normalised kernel.
        let r = (3.0 * sigma).ceil() as i64;
        let norm: f64 = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).sum();
        let mut oracle = vec![0.0f64; 32 * 32];
        for y in 0..32i64 {
            for x in 0..32i64 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sx, sy) = (x + dx, y + dy);
                        if (0..32).contains(&sx) && (0..32).contains(&sy) && m.labels[(sy * 32 + sx) as usize] != 0 {
                            acc += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
                oracle[(y * 32 + x) as usize] = acc / (norm * norm);
            }
        }
        let peak = oracle.iter().copied().fold(0.0, f64::max);
        for (o, v) in oracle.iter().zip(&gt.data) {
            assert!((o / peak - *v as f64).abs() < 1e-5);
        }
        // Maximum at the block centroid, decaying outward along a row.
        let best = (0..1024).max_by(|&a, &b| gt.data[a].total_cmp(&gt.data[b])).unwrap();
        assert!((best % 32).abs_diff(15) <= 1 && (best / 32).abs_diff(15) <= 1);
        for x in 15..31 {
            assert!(gt.get(x + 1, 15) <= gt.get(x, 15));
        }
    }

    #[test]
    fn qr_corpus_tiers_follow_the_table() {
        let corpus = generate_qr_corpus(40, 1).unwrap();
        assert_eq!(corpus.len(), 40);
        for s in &corpus {
            let tier = qrcodec::map_config(s.payload.len()).unwrap();
            assert_eq!(s.ecc_level, tier.ecc_level);
            assert!(s.tier >= tier.resolution);
            assert_eq!(s.image.dims(), (s.tier, s.tier));
            assert_eq!(qrcodec::post_qr(&s.image).unwrap(), s.payload.as_bytes());
        }
        let s = qr_sample("x".repeat(300)).unwrap();
        assert_eq!((s.ecc_level, s.tier), (EccLevel::H, 100));
        let s = qr_sample("x".repeat(2500)).unwrap();
        assert_eq!((s.ecc_level, s.tier), (EccLevel::L, 300));
    }

    #[test]
    fn split_examples() {
        let items: Vec<(usize, usize)> = (0..1500).map(|i| (i, i % 10)).collect();
        let (a, b) = split_dataset(&items, |x| x.1, 2.0 / 3.0, 1).unwrap();
        assert_eq!((a.len(), b.len()), (1000, 500));
        for c in 0..10 {
            assert_eq!(a.iter().filter(|x| x.1 == c).count(), 100);
        }
        let (a, b) = split_dataset(&[1, 2, 3], |_| 0, 2.0 / 3.0, 1).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));
        assert!(matches!(split_dataset(&[1], |_| 0, 0.5, 1), Err(CorpusError::TooFewItems(1))));
        assert!(matches!(split_dataset(&[1, 2], |_| 0, 1.0, 1), Err(CorpusError::BadFraction(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn split_is_disjoint_exhaustive_stratified_and_deterministic(
            cats in proptest::collection::vec(0usize..4, 2..120),
            frac in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let items: Vec<(usize, usize)> = cats.iter().copied().enumerate().collect();
            let (a, b) = split_dataset(&items, |x| x.1, frac, seed).unwrap();
            let mut all: Vec<usize> = a.iter().chain(&b).map(|x| x.0).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..items.len()).collect::<Vec<_>>());
            prop_assert!(!a.is_empty() && !b.is_empty());
            for c in 0..4 {
                let n_c = items.iter().filter(|x| x.1 == c).count() as f64;
                let got = a.iter().filter(|x| x.1 == c).count() as f64;
                prop_assert!((got - n_c * a.len() as f64 / items.len() as f64).abs() <= 1.0 + 1e-9);
            }
            let again = split_dataset(&items, |x| x.1, frac, seed).unwrap();
            prop_assert_eq!(again, (a, b));
        }

        #[test]
        fn importance_gt_is_bounded_with_unit_peak(seed in any::<u64>(), t in 0usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_spec(ChartType::ALL[t], 320, 300, &mut rng);
            let c = generate_chart(&spec, seed).unwrap();
            let gt = synth_importance_gt(&c.mask, 3.0);
            prop_assert!(gt.map.data.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((gt.map.data.iter().copied().fold(0.0f32, f32::max) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn corpus_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { charts: 12, qr_codes: 6, seed: 4, min_side: 300, max_side: 340, ..Default::default() };
        let c = CorpusDir::generate(dir.path(), &cfg).unwrap();
        assert_eq!(c.manifest.charts.train.len() + c.manifest.charts.test.len(), 12);
        let back = CorpusDir::open(dir.path()).unwrap();
        assert_eq!(back.manifest, c.manifest);
        let id = &back.manifest.charts.train[0];
        let (img, mask, spec) = back.load_chart(id).unwrap();
        assert_eq!(img.dims(), (spec.width, spec.height));
        let fresh = random_chart(id[1..].parse().unwrap(), &cfg).unwrap();
        assert_eq!(mask, fresh.mask);
        let q = back.load_qr(&back.manifest.qr.train[0]).unwrap();
        assert_eq!(qrcodec::post_qr(&q.image).unwrap(), q.payload.as_bytes());
    }
}
