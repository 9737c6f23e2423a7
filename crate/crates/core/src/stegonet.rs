//! Encoder and decoder networks that hide a QR raster inside a chart patch,
//! their losses, joint training and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    self, Adam, BatchNorm2d, BundleError, Conv2d, ConvTranspose2d, Layer, ParamVisitor, ParamVisitorMut, Parameterized,
    Relu, Sequential, Sigmoid, Tensor,
};
use crate::raster::{ChartImage, Plane};

pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_IMPORTANCE_FLOOR: f32 = 0.2;

#[derive(Debug, Error)]
pub enum StegoError {
    #[error("patch is {0}x{1}; encoder needs both sides to be multiples of 4")]
    BadResolution(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no training pairs")]
    EmptyCorpus,
    #[error("need at least {need} training pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("importance floor must lie in [0, 1], got {0}")]
    BadImportanceFloor(f32),
    #[error("checkpoint: {0}")]
    Bundle(#[from] BundleError),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StegoConfig {
    /// Channels of each feature-extraction branch.
    pub branch_width: usize,
    /// Channels of the three fusion convolutions.
    pub fusion_width: usize,
    pub decoder_width: usize,
    /// Number of 3x3 convolutions in the decoder.
    pub decoder_depth: usize,
    pub alpha: f64,
    pub learning_rate: f32,
    /// Side of the random crops drawn from each pair during training.
    pub patch: usize,
    pub batch: usize,
    /// Round coded patches onto the 8-bit grid in the forward pass
    /// (straight-through in the backward pass).
    pub quantize: bool,
    /// Replace the importance weights with ones (ablation).
    pub uniform_importance: bool,
    /// Lower bound applied to importance weights during training so that
    /// background pixels still carry some reconstruction cost.
    #[serde(default = "default_importance_floor")]
    pub importance_floor: f32,
}

fn default_importance_floor() -> f32 {
    DEFAULT_IMPORTANCE_FLOOR
}

impl Default for StegoConfig {
    fn default() -> Self {
        Self {
            branch_width: 32,
            fusion_width: 64,
            decoder_width: 32,
            decoder_depth: 5,
            alpha: DEFAULT_ALPHA,
            learning_rate: 1e-3,
            patch: 64,
            batch: 8,
            quantize: true,
            uniform_importance: false,
            importance_floor: DEFAULT_IMPORTANCE_FLOOR,
        }
    }
}

impl StegoConfig {
    /// Narrow preset that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self { branch_width: 16, fusion_width: 32, decoder_width: 24, decoder_depth: 5, patch: 48, ..Self::default() }
    }
}

/// One training example: a carrier crop, a QR raster of the same size and the
/// importance of the carrier pixels.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub carrier: ChartImage,
    pub secret: Plane,
    pub importance: Plane,
}

impl PatchPair {
    pub fn validate(&self) -> Result<(), StegoError> {
        let d = self.carrier.dims();
        if self.secret.dims() != d || self.importance.dims() != d {
            return Err(StegoError::ShapeMismatch(format!(
                "carrier {:?}, secret {:?}, importance {:?}",
                d,
                self.secret.dims(),
                self.importance.dims()
            )));
        }
        Ok(())
    }
}

pub struct Encoder {
    carrier_in: Sequential,
    secret_in: Sequential,
    fusion: Sequential,
    up: Sequential,
    head: Sequential,
    branch_width: usize,
    cache: Option<(Tensor, Tensor)>,
}

fn branch(inputs: usize, width: usize, rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new()
        .push(Conv2d::same(inputs, width, 3, rng))
        .push(Relu::new())
        .push(Conv2d::new(width, width, 4, 2, 1, rng))
        .push(Relu::new())
}

/// Moves `c` a fraction `t` of the way to white (`t > 0`) or black (`t < 0`),
/// so the result stays in [0,1] for any `t` in [-1,1].
fn headroom(c: f32, t: f32) -> f32 {
    if t >= 0.0 { c + t * (1.0 - c) } else { c + t * c }
}

impl Encoder {
    pub fn new(cfg: &StegoConfig, rng: &mut ChaCha8Rng) -> Self {
        let (b, f) = (cfg.branch_width, cfg.fusion_width);
        let mut fusion = Sequential::new();
        for i in 0..3 {
            fusion = fusion
                .push(Conv2d::same(if i == 0 { 2 * b } else { f }, f, 3, rng))
                .push(BatchNorm2d::new(f))
                .push(Relu::new());
        }
        let mut head_out = Conv2d::same(b, 3, 3, rng);
        // Start from the identity mapping: a zero residual reproduces the carrier.
        head_out.weight.value.iter_mut().for_each(|w| *w *= 0.1);
        Self {
            carrier_in: branch(3, b, rng),
            secret_in: branch(1, b, rng),
            fusion,
            up: Sequential::new().push(ConvTranspose2d::new(f, b, 4, 2, 1, rng)).push(Relu::new()),
            head: Sequential::new().push(Conv2d::same(b, b, 3, rng)).push(Relu::new()).push(head_out),
            branch_width: b,
            cache: None,
        }
    }

    fn check(carrier: &Tensor, secret: &Tensor) -> Result<(), StegoError> {
        let (h, w) = (carrier.h(), carrier.w());
        if h % 4 != 0 || w % 4 != 0 {
            return Err(StegoError::BadResolution(w, h));
        }
        if carrier.c() != 3 || secret.c() != 1 || (secret.h(), secret.w(), secret.n()) != (h, w, carrier.n()) {
            return Err(StegoError::ShapeMismatch(format!("carrier {:?} secret {:?}", carrier.shape, secret.shape)));
        }
        Ok(())
    }

    fn output(carrier: &Tensor, residual: &Tensor) -> Tensor {
        let data = residual.data.iter().zip(&carrier.data).map(|(&r, &c)| headroom(c, r.tanh())).collect();
        Tensor::from_vec(carrier.shape, data)
    }

    pub fn infer(&self, carrier: &Tensor, secret: &Tensor) -> Result<Tensor, StegoError> {
        Self::check(carrier, secret)?;
        let a = self.carrier_in.infer(carrier);
        let b = self.secret_in.infer(secret);
        let x = self.fusion.infer(&Tensor::concat_channels(&a, &b));
        let r = self.head.infer(&self.up.infer(&x));
        Ok(Self::output(carrier, &r))
    }

    pub fn forward(&mut self, carrier: &Tensor, secret: &Tensor) -> Result<Tensor, StegoError> {
        Self::check(carrier, secret)?;
        let a = self.carrier_in.forward(carrier);
        let b = self.secret_in.forward(secret);
        let x = self.fusion.forward(&Tensor::concat_channels(&a, &b));
        let r = self.head.forward(&self.up.forward(&x));
        let y = Self::output(carrier, &r);
        self.cache = Some((carrier.clone(), r));
        Ok(y)
    }

    /// Backpropagate the gradient w.r.t. the coded output into the parameters.
    pub fn backward(&mut self, grad: &Tensor) {
        let (carrier, residual) = self.cache.take().expect("encoder backward without forward");
        let dz = Tensor::from_vec(
            grad.shape,
            grad.data
                .iter()
                .zip(residual.data.iter().zip(&carrier.data))
                .map(|(&g, (&r, &c))| {
                    let t = r.tanh();
                    g * (1.0 - t * t) * if t >= 0.0 { 1.0 - c } else { c }
                })
                .collect(),
        );
        let g = self.up.backward(&self.head.backward(&dz));
        let g = self.fusion.backward(&g);
        let (ga, gb) = g.split_channels(self.branch_width);
        self.carrier_in.backward(&ga);
        self.secret_in.backward(&gb);
    }
}

impl Parameterized for Encoder {
    fn visit(&self, f: &mut ParamVisitor<'_>) {
        self.carrier_in.visit("carrier", f);
        self.secret_in.visit("secret", f);
        self.fusion.visit("fusion", f);
        self.up.visit("up", f);
        self.head.visit("head", f);
    }
    fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        self.carrier_in.visit_mut("carrier", f);
        self.secret_in.visit_mut("secret", f);
        self.fusion.visit_mut("fusion", f);
        self.up.visit_mut("up", f);
        self.head.visit_mut("head", f);
    }
}

pub struct Decoder {
    net: Sequential,
}

impl Decoder {
    pub fn new(cfg: &StegoConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.decoder_width;
        let mut net = Sequential::new().push(Conv2d::same(3, w, 3, rng)).push(Relu::new());
        for _ in 0..cfg.decoder_depth.saturating_sub(2) {
            net = net.push(Conv2d::same(w, w, 3, rng)).push(Relu::new());
        }
        Self { net: net.push(Conv2d::same(w, 1, 3, rng)).push(Sigmoid::new()) }
    }

    pub fn infer(&self, coded: &Tensor) -> Tensor {
        self.net.infer(coded)
    }
}

impl Parameterized for Decoder {
    fn visit(&self, f: &mut ParamVisitor<'_>) {
        self.net.visit("net", f)
    }
    fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        self.net.visit_mut("net", f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StegoMeta {
    pub config: StegoConfig,
    pub seed: u64,
    pub epochs: usize,
    pub converged: bool,
    pub loss_curve: Vec<f64>,
    pub pairs: usize,
}

/// Trained encoder/decoder pair with its training metadata.
pub struct StegoModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub meta: StegoMeta,
}

impl Parameterized for StegoModel {
    fn visit(&self, f: &mut ParamVisitor<'_>) {
        Parameterized::visit(&self.encoder, &mut |n, p| f(&nn::join("enc", n), p));
        Parameterized::visit(&self.decoder, &mut |n, p| f(&nn::join("dec", n), p));
    }
    fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        self.encoder.visit_mut(&mut |n, p| f(&nn::join("enc", n), p));
        self.decoder.visit_mut(&mut |n, p| f(&nn::join("dec", n), p));
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

impl StegoModel {
    /// Freshly initialised (untrained) networks.
    pub fn new(config: StegoConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let decoder = Decoder::new(&config, &mut rng);
        let meta = StegoMeta { config, seed, epochs: 0, converged: false, loss_curve: Vec::new(), pairs: 0 };
        Self { encoder, decoder, meta }
    }

    pub fn alpha(&self) -> f64 {
        self.meta.config.alpha
    }

    /// Writes `path` (weights) and `path` with a `.meta.json` extension.
    pub fn save(&self, path: &Path) -> Result<(), StegoError> {
        nn::save_bundle(self, BufWriter::new(File::create(path)?))?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(meta_path(path))?), &self.meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StegoError> {
        let meta: StegoMeta = serde_json::from_reader(BufReader::new(File::open(meta_path(path))?))?;
        let mut model = Self::new(meta.config.clone(), meta.seed);
        nn::load_bundle(&mut model, BufReader::new(File::open(path)?))?;
        model.meta = meta;
        Ok(model)
    }

    /// Hide `secret` in `carrier`. Both sides must be multiples of 4.
    pub fn encode_patch(&self, carrier: &ChartImage, secret: &Plane) -> Result<ChartImage, StegoError> {
        if carrier.dims() != secret.dims() {
            return Err(StegoError::ShapeMismatch(format!("carrier {:?} secret {:?}", carrier.dims(), secret.dims())));
        }
        let y = self.encoder.infer(&carrier.to_tensor(), &secret.to_tensor())?;
        Ok(ChartImage::from_tensor(&y, 0))
    }

    /// [`Self::encode_patch`] for any size: pads reflectively to a multiple of 4,
    /// encodes, and crops back.
    pub fn encode_region(&self, carrier: &ChartImage, secret: &Plane) -> Result<ChartImage, StegoError> {
        match self.encode_patch(carrier, secret) {
            Err(StegoError::BadResolution(w, h)) => {
                let (pw, ph) = (w.next_multiple_of(4), h.next_multiple_of(4));
                let c = reflect_pad_image(carrier, pw, ph);
                let s = reflect_pad(secret, pw, ph);
                Ok(self.encode_patch(&c, &s)?.crop(0, 0, w, h))
            }
            other => other,
        }
    }

    /// Recover the single-channel secret estimate in [0,1].
    pub fn decode_patch(&self, coded: &ChartImage) -> Plane {
        Plane::from_tensor(&self.decoder.infer(&coded.to_tensor()), 0)
    }
}

/// Reflect (without repeating the edge) into a larger canvas anchored at (0,0).
pub fn reflect_pad(p: &Plane, w: usize, h: usize) -> Plane {
    let idx = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n { m } else { period - m }
    };
    let mut out = Plane::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, p.get(idx(x, p.width), idx(y, p.height)));
        }
    }
    out
}

fn reflect_pad_image(img: &ChartImage, w: usize, h: usize) -> ChartImage {
    let [r, g, b] = [0, 1, 2].map(|c| reflect_pad(&img.channel(c), w, h));
    ChartImage::from_channels(&r, &g, &b)
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> StegoError {
    StegoError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

/// Importance-weighted squared error, averaged over every channel value:
/// `(1/3N) sum_p sum_c V_p (I_c - I_c')^2`.
pub fn loss_encoder(v: &Plane, ic: &ChartImage, ic2: &ChartImage) -> Result<f64, StegoError> {
    if v.dims() != ic.dims() || ic.dims() != ic2.dims() {
        return Err(shape_err("loss_encoder", v.dims(), ic2.dims()));
    }
    let n = v.data.len();
    let mut acc = 0.0f64;
    for c in 0..3 {
        for i in 0..n {
            let d = ic.data[c * n + i] as f64 - ic2.data[c * n + i] as f64;
            acc += v.data[i] as f64 * d * d;
        }
    }
    Ok(acc / (3 * n) as f64)
}

pub fn mse_plane(a: &Plane, b: &Plane) -> Result<f64, StegoError> {
    if a.dims() != b.dims() {
        return Err(shape_err("mse", a.dims(), b.dims()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.data.len() as f64)
}

/// `loss_encoder + alpha * MSE(I_s, I_s')`.
pub fn loss_joint(v: &Plane, ic: &ChartImage, ic2: &ChartImage, is: &Plane, is2: &Plane, alpha: f64) -> Result<f64, StegoError> {
    Ok(loss_encoder(v, ic, ic2)? + alpha * mse_plane(is, is2)?)
}

/// Joint loss with its gradients w.r.t. the coded image and the decoded secret.
pub fn loss_joint_grad(
    v: &Plane,
    ic: &ChartImage,
    ic2: &ChartImage,
    is: &Plane,
    is2: &Plane,
    alpha: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), StegoError> {
    let loss = loss_joint(v, ic, ic2, is, is2, alpha)?;
    let n = v.data.len();
    let mut d_ic2 = vec![0.0; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            d_ic2[c * n + i] = 2.0 * v.data[i] as f64 * (ic2.data[c * n + i] as f64 - ic.data[c * n + i] as f64) / (3 * n) as f64;
        }
    }
    let d_is2 = is2.data.iter().zip(&is.data).map(|(&p, &t)| 2.0 * alpha * (p as f64 - t as f64) / n as f64).collect();
    Ok((loss, d_ic2, d_is2))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    /// Stop early once the epoch loss improves by less than this (relative)
    /// over `patience` epochs.
    pub tolerance: f64,
    pub patience: usize,
    pub log_every: usize,
}

impl TrainOptions {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self { epochs, seed, tolerance: 1e-4, patience: 10, log_every: 0 }
    }
}

pub const MIN_STEGO_PAIRS: usize = 64;

fn random_crop(pair_dims: (usize, usize), side: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let (w, h) = pair_dims;
    (rng.random_range(0..=w - side), rng.random_range(0..=h - side))
}

/// Jointly train encoder and decoder. Secrets are re-paired with carriers at
/// random every epoch and each example is a random crop of `config.patch`.
pub fn train_stego(pairs: &[PatchPair], config: StegoConfig, opts: &TrainOptions) -> Result<StegoModel, StegoError> {
    if pairs.is_empty() {
        return Err(StegoError::EmptyCorpus);
    }
    if pairs.len() < MIN_STEGO_PAIRS {
        return Err(StegoError::TooFewPairs { need: MIN_STEGO_PAIRS, got: pairs.len() });
    }
    if config.alpha.is_nan() || config.alpha <= 0.0 {
        return Err(StegoError::BadAlpha(config.alpha));
    }
    if !(0.0..=1.0).contains(&config.importance_floor) {
        return Err(StegoError::BadImportanceFloor(config.importance_floor));
    }
    for p in pairs {
        p.validate()?;
    }
    let min_side = pairs.iter().map(|p| p.carrier.width.min(p.carrier.height)).min().unwrap_or(0);
    let side = (config.patch.min(min_side) / 4) * 4;
    if side < 8 {
        return Err(StegoError::BadResolution(min_side, min_side));
    }

    let mut model = StegoModel::new(config.clone(), opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut opt = Adam::new(config.learning_rate);
    let mut curve = Vec::new();
    let mut converged = false;
    let batch = config.batch.max(1);
    let hw = side * side;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut secret_of: Vec<usize> = (0..pairs.len()).collect();
        secret_of.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            let mut c = Tensor::zeros(b, 3, side, side);
            let mut s = Tensor::zeros(b, 1, side, side);
            let mut v = vec![0.0f32; b * hw];
            for (k, &i) in chunk.iter().enumerate() {
                let p = &pairs[i];
                let (x, y) = random_crop(p.carrier.dims(), side, &mut rng);
                c.sample_mut(k).copy_from_slice(&p.carrier.crop(x, y, side, side).data);
                if !config.uniform_importance {
                    let crop = p.importance.crop(x, y, side, side);
                    for (dst, &src) in v[k * hw..(k + 1) * hw].iter_mut().zip(&crop.data) {
                        *dst = src.max(config.importance_floor);
                    }
                } else {
                    v[k * hw..(k + 1) * hw].iter_mut().for_each(|e| *e = 1.0);
                }
                let sp = &pairs[secret_of[i]].secret;
                let (sx, sy) = random_crop(sp.dims(), side, &mut rng);
                s.sample_mut(k).copy_from_slice(&sp.crop(sx, sy, side, side).data);
            }

            let coded = model.encoder.forward(&c, &s)?;
            let fed = if config.quantize {
                Tensor::from_vec(coded.shape, coded.data.iter().map(|&x| (x * 255.0).round() / 255.0).collect())
            } else {
                coded.clone()
            };
            let decoded = model.decoder.net.forward(&fed);

            // Batch-mean of the per-sample joint loss.
            let (mut enc, mut dec) = (0.0f64, 0.0f64);
            let mut g_coded = Tensor::zeros(b, 3, side, side);
            let mut g_dec = Tensor::zeros(b, 1, side, side);
            let enc_scale = 2.0 / (3 * hw * b) as f64;
            let dec_scale = 2.0 * config.alpha / (hw * b) as f64;
            for k in 0..b {
                for ch in 0..3 {
                    for i in 0..hw {
                        let idx = (k * 3 + ch) * hw + i;
                        let d = coded.data[idx] as f64 - c.data[idx] as f64;
                        let w = v[k * hw + i] as f64;
                        enc += w * d * d;
                        g_coded.data[idx] = (enc_scale * w * d) as f32;
                    }
                }
                for i in 0..hw {
                    let idx = k * hw + i;
                    let d = decoded.data[idx] as f64 - s.data[idx] as f64;
                    dec += d * d;
                    g_dec.data[idx] = (dec_scale * d) as f32;
                }
            }
            let loss = enc / (3 * hw * b) as f64 + config.alpha * dec / (hw * b) as f64;
            epoch_loss += loss * b as f64;

            // Straight-through: the decoder's input gradient flows to the encoder unchanged.
            let g_fed = model.decoder.net.backward(&g_dec);
            g_coded.add_assign(&g_fed);
            model.encoder.backward(&g_coded);
            opt.step(&mut model);
        }
        let mean = epoch_loss / pairs.len() as f64;
        curve.push(mean);
        if opts.log_every > 0 && epoch % opts.log_every == 0 {
            log::info!("stego epoch {epoch}: joint loss {mean:.6}");
        }
        if curve.len() > opts.patience {
            let old = curve[curve.len() - 1 - opts.patience];
            if old > 0.0 && (old - mean) / old < opts.tolerance {
                converged = true;
                break;
            }
        }
    }
    model.meta.epochs = curve.len();
    model.meta.loss_curve = curve;
    model.meta.converged = converged;
    model.meta.pairs = pairs.len();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_plane(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Plane {
        Plane::from_vec(w, h, (0..w * h).map(|_| rng.random::<f32>()).collect())
    }

    fn rand_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ChartImage {
        ChartImage::from_planar(w, h, (0..3 * w * h).map(|_| rng.random::<f32>()).collect())
    }

    #[test]
    fn loss_encoder_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (v, a, b) = (rand_plane(8, 8, &mut rng), rand_image(8, 8, &mut rng), rand_image(8, 8, &mut rng));
        let mut oracle = 0.0f64;
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let d = a.get(c, x, y) as f64 - b.get(c, x, y) as f64;
                    oracle += v.get(x, y) as f64 * d * d;
                }
            }
        }
        oracle /= 192.0;
        assert!((loss_encoder(&v, &a, &b).unwrap() - oracle).abs() < 1e-9);
        assert_eq!(loss_encoder(&v, &a, &a).unwrap(), 0.0);
        assert_eq!(loss_encoder(&Plane::new(8, 8, 0.0), &a, &b).unwrap(), 0.0);
        assert!(loss_encoder(&Plane::new(7, 8, 0.0), &a, &b).is_err());
    }

    #[test]
    fn joint_loss_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (v, a, b) = (rand_plane(6, 6, &mut rng), rand_image(6, 6, &mut rng), rand_image(6, 6, &mut rng));
        let (s, s2) = (rand_plane(6, 6, &mut rng), rand_plane(6, 6, &mut rng));
        let j = loss_joint(&v, &a, &b, &s, &s2, 0.25).unwrap();
        let parts = loss_encoder(&v, &a, &b).unwrap() + 0.25 * mse_plane(&s, &s2).unwrap();
        assert!((j - parts).abs() <= 1e-12);
        assert_eq!(loss_joint(&v, &a, &b, &s, &s2, 0.0).unwrap(), loss_encoder(&v, &a, &b).unwrap());
        assert_eq!(loss_joint(&v, &a, &a, &s, &s, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (v, a, b) = (rand_plane(6, 6, &mut rng), rand_image(6, 6, &mut rng), rand_image(6, 6, &mut rng));
        let (s, s2) = (rand_plane(6, 6, &mut rng), rand_plane(6, 6, &mut rng));
        let (_, g_img, g_sec) = loss_joint_grad(&v, &a, &b, &s, &s2, 0.25).unwrap();
        // The loss is quadratic in each output, so central differences are exact
        // up to rounding; the step only needs to dominate f32 storage error.
        let h = 1e-2f32;
        let mut worst = 0.0f64;
        for i in 0..b.data.len() {
            let (mut p, mut m) = (b.clone(), b.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let num = (loss_joint(&v, &a, &p, &s, &s2, 0.25).unwrap() - loss_joint(&v, &a, &m, &s, &s2, 0.25).unwrap())
                / (p.data[i] as f64 - m.data[i] as f64);
            worst = worst.max((num - g_img[i]).abs() / g_img[i].abs().max(1e-6));
        }
        for i in 0..s2.data.len() {
            let (mut p, mut m) = (s2.clone(), s2.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let num = (loss_joint(&v, &a, &b, &s, &p, 0.25).unwrap() - loss_joint(&v, &a, &b, &s, &m, 0.25).unwrap())
                / (p.data[i] as f64 - m.data[i] as f64);
            worst = worst.max((num - g_sec[i]).abs() / g_sec[i].abs().max(1e-6));
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn untrained_outputs_stay_in_range_and_keep_shape() {
        let model = StegoModel::new(StegoConfig::desk(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = rand_image(32, 32, &mut rng);
        let s = rand_plane(32, 32, &mut rng);
        let coded = model.encode_patch(&c, &s).unwrap();
        assert_eq!(coded.dims(), (32, 32));
        assert!(coded.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let dec = model.decode_patch(&coded);
        assert_eq!(dec.dims(), (32, 32));
        assert!(dec.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn odd_sizes_are_refused_then_padded() {
        let model = StegoModel::new(StegoConfig::desk(), 7);
        let c = ChartImage::new(30, 30, [1.0; 3]);
        let s = Plane::new(30, 30, 1.0);
        assert!(matches!(model.encode_patch(&c, &s), Err(StegoError::BadResolution(30, 30))));
        assert_eq!(model.encode_region(&c, &s).unwrap().dims(), (30, 30));
    }

    #[test]
    fn zero_residual_reproduces_every_8bit_level() {
        for level in 0..=255u8 {
            let c = level as f32 / 255.0;
            let y = Encoder::output(&Tensor::from_vec([1, 1, 1, 1], vec![c]), &Tensor::zeros(1, 1, 1, 1));
            assert_eq!(crate::raster::to_u8(y.data[0]), level);
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_the_edge() {
        let p = Plane::from_vec(3, 1, vec![0.0, 1.0, 2.0]);
        let r = reflect_pad(&p, 6, 1);
        assert_eq!(r.data, vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0]);
    }
}
