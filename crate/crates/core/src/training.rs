//! Training sets built from the synthetic corpus.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{generate_qr_corpus, random_chart, synth_importance_gt, CorpusConfig, CorpusDir, CorpusError};
use crate::importance::ImportancePair;
use crate::raster::{ChartImage, Plane};
use crate::stegonet::PatchPair;

/// Side of the carrier crops stored per stego training pair.
pub const PAIR_SIDE: usize = 96;

/// A chart and its importance ground truth.
#[derive(Clone, Debug)]
pub struct LabeledChart {
    pub id: String,
    pub image: ChartImage,
    pub importance: Plane,
}

/// Charts `range` of the synthetic stream described by `cfg`, rendered in memory.
pub fn synthetic_charts(range: Range<usize>, cfg: &CorpusConfig) -> Result<Vec<LabeledChart>, CorpusError> {
    range
        .map(|i| {
            let c = random_chart(i, cfg)?;
            let sigma = cfg.sigma_for(c.image.width, c.image.height);
            Ok(LabeledChart { id: format!("c{i:05}"), importance: synth_importance_gt(&c.mask, sigma).map, image: c.image })
        })
        .collect()
}

pub fn load_charts(dir: &CorpusDir, ids: &[String]) -> Result<Vec<LabeledChart>, CorpusError> {
    ids.iter()
        .map(|id| {
            let (image, importance) = dir.load_importance_pair(id)?;
            Ok(LabeledChart { id: id.clone(), image, importance })
        })
        .collect()
}

pub fn importance_pairs(charts: &[LabeledChart], side: usize) -> Vec<ImportancePair> {
    charts.iter().map(|c| ImportancePair::resized(&c.image, &c.importance, side)).collect()
}

/// QR rasters of random printable payloads across all tiers.
pub fn qr_secrets(n: usize, seed: u64) -> Result<Vec<Plane>, CorpusError> {
    Ok(generate_qr_corpus(n, seed)?.into_iter().map(|s| s.image).collect())
}

pub fn load_qr_secrets(dir: &CorpusDir, ids: &[String]) -> Result<Vec<Plane>, CorpusError> {
    ids.iter().map(|id| Ok(dir.load_qr(id)?.image)).collect()
}

/// `per_chart` random `side` crops of every chart, each paired with a random
/// crop of a random secret.
pub fn stego_pairs(
    charts: &[LabeledChart],
    secrets: &[Plane],
    per_chart: usize,
    side: usize,
    seed: u64,
) -> Vec<PatchPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let secrets: Vec<&Plane> = secrets.iter().filter(|s| s.width >= side && s.height >= side).collect();
    let mut out = Vec::with_capacity(charts.len() * per_chart);
    for c in charts {
        let (w, h) = c.image.dims();
        if w < side || h < side || secrets.is_empty() {
            continue;
        }
        for _ in 0..per_chart {
            let (x, y) = (rng.random_range(0..=w - side), rng.random_range(0..=h - side));
            let s = secrets[rng.random_range(0..secrets.len())];
            let (sx, sy) = (rng.random_range(0..=s.width - side), rng.random_range(0..=s.height - side));
            out.push(PatchPair {
                carrier: c.image.crop(x, y, side, side),
                secret: s.crop(sx, sy, side, side),
                importance: c.importance.crop(x, y, side, side),
            });
        }
    }
    out
}
