//! Evaluation harnesses shared by the command line and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defense::{block_tra, random_text};
use crate::importance::{eval_saliency, predict_importance, ImportanceModel, SaliencyError};
use crate::metrics::{psnr, ssim};
use crate::pipeline::{decode_blocks, encode_with_map, PayloadEnvelope, PayloadKind, PipelineError};
use crate::planner::PlanOptions;
use crate::raster::{ChartImage, Plane};
use crate::stegonet::{StegoError, StegoModel};
use crate::training::LabeledChart;

/// Where the encoder gets its importance map from.
#[derive(Clone, Copy)]
pub enum ImportanceSource<'a> {
    Model(&'a ImportanceModel),
    /// The synthetic ground truth shipped with each chart.
    GroundTruth,
}

impl ImportanceSource<'_> {
    fn map(&self, chart: &LabeledChart) -> Result<Plane, PipelineError> {
        match self {
            ImportanceSource::Model(m) => Ok(predict_importance(&chart.image, m)?),
            ImportanceSource::GroundTruth => Ok(chart.importance.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StegItem {
    pub id: String,
    pub blocks: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub tra: f64,
    /// The whole envelope came back with a valid checksum.
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StegReport {
    pub corpus: String,
    pub text_bytes: usize,
    pub eta: usize,
    pub items: Vec<StegItem>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_tra: f64,
    pub skipped: Vec<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl StegReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "Steganography on {} ({} charts, {} bytes each, eta {})\n\n| PSNR | SSIM | TRA |\n|---|---|---|\n| {:.2} | {:.4} | {:.2}% |\n",
            self.corpus,
            self.items.len(),
            self.text_bytes,
            self.eta,
            self.mean_psnr,
            self.mean_ssim,
            100.0 * self.mean_tra
        );
        for k in &self.skipped {
            s += &format!("\nskipped: {k}");
        }
        s
    }
}

/// Lossless channel: the coded image is written as 8-bit PNG and read back.
fn png_channel(img: &ChartImage) -> Result<ChartImage, PipelineError> {
    Ok(ChartImage::decode(&img.encode_png()?)?)
}

/// Embed a random text of `text_bytes` into every chart and decode it again.
/// Charts whose capacity is too small are listed in `skipped`.
pub fn eval_steg(
    corpus: &str,
    charts: &[LabeledChart],
    source: ImportanceSource<'_>,
    stego: &StegoModel,
    text_bytes: usize,
    eta: usize,
    seed: u64,
) -> Result<StegReport, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for chart in charts {
        let env = PayloadEnvelope::new(PayloadKind::Metadata, random_text(text_bytes, &mut rng));
        let carrier = chart.image.quantize();
        let v = source.map(chart)?;
        let coded = match encode_with_map(&carrier, &env, &v, stego, eta, &PlanOptions::default()) {
            Ok(c) => c,
            Err(e @ PipelineError::CapacityExceeded { .. }) => {
                skipped.push(format!("{}: {e}", chart.id));
                continue;
            }
            Err(e) => return Err(e),
        };
        let received = png_channel(&coded.image)?;
        let report = decode_blocks(&received, stego);
        let bytes = env.to_bytes()?;
        let exact = report.as_ref().ok().and_then(|r| r.envelope().ok()).is_some_and(|e| e == env);
        items.push(StegItem {
            id: chart.id.clone(),
            blocks: coded.plan.content_boxes.len(),
            psnr: psnr(&carrier, &received)?,
            ssim: ssim(&carrier, &received)?,
            tra: block_tra(&bytes, eta, &report),
            exact,
        });
    }
    Ok(StegReport {
        corpus: corpus.to_string(),
        text_bytes,
        eta,
        mean_psnr: mean(items.iter().map(|i| i.psnr)),
        mean_ssim: mean(items.iter().map(|i| i.ssim)),
        mean_tra: mean(items.iter().map(|i| i.tra)),
        items,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub bits: usize,
    pub blocks: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub tra: f64,
    pub exact: bool,
}

/// Quality of one chart as the payload grows through `bits`.
pub fn capacity_sweep(
    chart: &ChartImage,
    importance: &Plane,
    stego: &StegoModel,
    bits: &[usize],
    eta: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let carrier = chart.quantize();
    bits.iter()
        .map(|&b| {
            let env = PayloadEnvelope::new(PayloadKind::Metadata, random_text(b.div_ceil(8), &mut rng));
            let coded = encode_with_map(&carrier, &env, importance, stego, eta, &PlanOptions::default())?;
            let received = png_channel(&coded.image)?;
            let report = decode_blocks(&received, stego);
            let exact = report.as_ref().ok().and_then(|r| r.envelope().ok()).is_some_and(|e| e == env);
            Ok(SweepPoint {
                bits: b,
                blocks: coded.plan.content_boxes.len(),
                psnr: psnr(&carrier, &received)?,
                ssim: ssim(&carrier, &received)?,
                tra: block_tra(&env.to_bytes()?, eta, &report),
                exact,
            })
        })
        .collect()
}

pub fn sweep_markdown(points: &[SweepPoint]) -> String {
    let mut s = String::from("| bits | blocks | PSNR | SSIM | TRA |\n|---|---|---|---|---|\n");
    for p in points {
        s += &format!("| {} | {} | {:.2} | {:.4} | {:.2}% |\n", p.bits, p.blocks, p.psnr, p.ssim, 100.0 * p.tra);
    }
    s
}

/// Mean squared pixel error over the pixels in the top tenth of each chart's
/// importance map, after encoding the whole chart with a QR secret tiled to
/// its size. Secrets and offsets depend only on `seed`, so two models see
/// identical inputs and the results pair up by index.
pub fn top_decile_errors(charts: &[LabeledChart], secrets: &[Plane], stego: &StegoModel, seed: u64) -> Result<Vec<f64>, StegoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if secrets.is_empty() {
        return Ok(out);
    }
    for c in charts {
        let (w, h) = c.image.dims();
        let s = &secrets[rng.random_range(0..secrets.len())];
        let (ox, oy) = (rng.random_range(0..s.width), rng.random_range(0..s.height));
        let mut secret = Plane::new(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                secret.set(x, y, s.get((x + ox) % s.width, (y + oy) % s.height));
            }
        }
        let carrier = c.image.quantize();
        let coded = stego.encode_region(&carrier, &secret)?.quantize();
        let v = &c.importance;
        let mut sorted = v.data.clone();
        sorted.sort_by(f32::total_cmp);
        let cut = sorted[sorted.len() * 9 / 10];
        let n = w * h;
        let (mut sum, mut count) = (0.0f64, 0usize);
        for (i, &vi) in v.data.iter().enumerate() {
            if vi >= cut {
                for ch in 0..3 {
                    let d = (coded.data[ch * n + i] - carrier.data[ch * n + i]) as f64;
                    sum += d * d;
                }
                count += 3;
            }
        }
        out.push(sum / count as f64);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub corpus: String,
    pub charts: usize,
    pub mean_cc: f64,
    pub mean_rmse: f64,
    pub mean_r2: f64,
    /// Predictions with no variance; their CC and R^2 count as zero.
    pub constant_maps: usize,
}

impl SaliencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        format!(
            "Importance prediction on {} ({} charts)\n\n| CC | RMSE | R2 |\n|---|---|---|\n| {:.3} | {:.3} | {:.3} |\n",
            self.corpus, self.charts, self.mean_cc, self.mean_rmse, self.mean_r2
        )
    }
}

pub fn eval_saliency_suite(corpus: &str, charts: &[LabeledChart], model: &ImportanceModel) -> Result<SaliencyReport, PipelineError> {
    let (mut cc, mut rmse, mut r2, mut constant) = (Vec::new(), Vec::new(), Vec::new(), 0);
    for c in charts {
        let pred = predict_importance(&c.image, model)?;
        match eval_saliency(&pred, &c.importance) {
            Ok(s) => {
                cc.push(s.cc);
                rmse.push(s.rmse);
                r2.push(s.r2);
            }
            Err(SaliencyError::ConstantMap { rmse: e }) => {
                constant += 1;
                cc.push(0.0);
                rmse.push(e);
                r2.push(0.0);
            }
            Err(SaliencyError::Metric(e)) => return Err(e.into()),
        }
    }
    Ok(SaliencyReport {
        corpus: corpus.to_string(),
        charts: charts.len(),
        mean_cc: mean(cc.into_iter()),
        mean_rmse: mean(rmse.into_iter()),
        mean_r2: mean(r2.into_iter()),
        constant_maps: constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;
    use crate::stegonet::StegoConfig;
    use crate::training::{qr_secrets, synthetic_charts};

    fn tiny() -> StegoModel {
        let cfg = StegoConfig { branch_width: 4, fusion_width: 4, decoder_width: 4, decoder_depth: 1, ..StegoConfig::desk() };
        StegoModel::new(cfg, 1)
    }

    #[test]
    fn decile_errors_are_paired_and_deterministic() {
        let charts = synthetic_charts(0..3, &CorpusConfig::default()).unwrap();
        let secrets = qr_secrets(4, 1).unwrap();
        let m = tiny();
        let a = top_decile_errors(&charts, &secrets, &m, 9).unwrap();
        let b = top_decile_errors(&charts, &secrets, &m, 9).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert!(a.iter().all(|e| e.is_finite() && *e >= 0.0));
    }

    #[test]
    fn steg_report_skips_charts_that_cannot_hold_the_text() {
        let cfg = CorpusConfig { min_side: 300, max_side: 320, ..CorpusConfig::default() };
        let charts = synthetic_charts(0..2, &cfg).unwrap();
        let r = eval_steg("t", &charts, ImportanceSource::GroundTruth, &tiny(), 5000, 800, 1).unwrap();
        assert!(r.items.is_empty());
        assert_eq!(r.skipped.len(), 2);
        assert!(r.to_markdown().contains("skipped"));
    }
}
