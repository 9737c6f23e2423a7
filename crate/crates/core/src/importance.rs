//! Visual importance network: a configurable U-Net with an optional residual
//! refinement stage, its hybrid BCE + SSIM loss, training and evaluation.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{ssim_plane_grad, ssim_plane_window, MetricError, SSIM_WINDOW};
use crate::nn::{
    self, Adam, BatchNorm2d, BundleError, Conv2d, Layer, MaxPool2, ParamVisitor, ParamVisitorMut, Parameterized,
    Relu, Sequential, Tensor, UpsampleNearest2,
};
use crate::raster::{ChartImage, Plane};

/// Predictions are clipped into `[EPS, 1-EPS]` before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;
pub const MIN_IMAGE_SIDE: usize = 64;
pub const MIN_TRAIN_PAIRS: usize = 16;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("image is {0}x{1}; importance prediction needs at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")]
    ImageTooSmall(usize, usize),
    #[error("no training pairs")]
    EmptyCorpus,
    #[error("need at least {MIN_TRAIN_PAIRS} training pairs, got {0}")]
    TooFewPairs(usize),
    #[error("invalid network configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("checkpoint: {0}")]
    Bundle(#[from] BundleError),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceNetConfig {
    /// Number of resolution stages (down and up).
    pub depth: usize,
    pub base_width: usize,
    pub refinement: bool,
    /// Square side the network runs at; inputs are resized to it and back.
    pub input_size: usize,
}

impl Default for ImportanceNetConfig {
    fn default() -> Self {
        Self { depth: 4, base_width: 16, refinement: true, input_size: 256 }
    }
}

impl ImportanceNetConfig {
    pub fn validate(&self) -> Result<(), ImportanceError> {
        let bad = |m: String| Err(ImportanceError::BadConfig(m));
        if self.depth < 2 {
            return bad(format!("depth {} < 2", self.depth));
        }
        if self.base_width < 8 {
            return bad(format!("base_width {} < 8", self.base_width));
        }
        let div = 1usize << (self.depth - 1);
        if self.input_size == 0 || self.input_size % div != 0 {
            return bad(format!("input_size {} is not a multiple of {div}", self.input_size));
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width << stage.min(2)
    }
}

/// Two 3x3 conv+BN layers with an identity or 1x1-projected shortcut.
struct ResBlock {
    body: Sequential,
    proj: Option<Conv2d>,
    out: Relu,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let body = Sequential::new()
            .push(Conv2d::same(cin, cout, 3, rng))
            .push(BatchNorm2d::new(cout))
            .push(Relu::new())
            .push(Conv2d::same(cout, cout, 3, rng))
            .push(BatchNorm2d::new(cout));
        let proj = (cin != cout).then(|| Conv2d::same(cin, cout, 1, rng));
        Self { body, proj, out: Relu::new() }
    }
}

impl Layer for ResBlock {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.body.infer(x);
        match &self.proj {
            Some(p) => y.add_assign(&p.infer(x)),
            None => y.add_assign(x),
        }
        self.out.infer(&y)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut y = self.body.forward(x);
        match &mut self.proj {
            Some(p) => y.add_assign(&p.forward(x)),
            None => y.add_assign(x),
        }
        self.out.forward(&y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.out.backward(grad);
        let mut gx = self.body.backward(&g);
        match &mut self.proj {
            Some(p) => gx.add_assign(&p.backward(&g)),
            None => gx.add_assign(&g),
        }
        gx
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.body.visit(&nn::join(prefix, "body"), f);
        if let Some(p) = &self.proj {
            p.visit(&nn::join(prefix, "proj"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.body.visit_mut(&nn::join(prefix, "body"), f);
        if let Some(p) = &mut self.proj {
            p.visit_mut(&nn::join(prefix, "proj"), f);
        }
    }
}

/// U-Net producing importance logits.
pub struct ImportanceNet {
    config: ImportanceNetConfig,
    down: Vec<ResBlock>,
    pools: Vec<MaxPool2>,
    ups: Vec<UpsampleNearest2>,
    up: Vec<ResBlock>,
    head: Conv2d,
    refine: Option<Sequential>,
    /// Channel counts of the skip tensors, needed to split gradients.
    skip_channels: Vec<usize>,
}

impl ImportanceNet {
    pub fn new(config: ImportanceNetConfig, seed: u64) -> Result<Self, ImportanceError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.depth;
        let mut down = Vec::new();
        let mut cin = 3;
        for s in 0..d {
            down.push(ResBlock::new(cin, config.width(s), &mut rng));
            cin = config.width(s);
        }
        let mut up = Vec::new();
        for s in (0..d - 1).rev() {
            up.push(ResBlock::new(config.width(s + 1) + config.width(s), config.width(s), &mut rng));
        }
        let head = Conv2d::same(config.width(0), 1, 3, &mut rng);
        let refine = config.refinement.then(|| {
            let w = config.base_width;
            Sequential::new()
                .push(Conv2d::same(1, w, 3, &mut rng))
                .push(Relu::new())
                .push(Conv2d::same(w, w, 3, &mut rng))
                .push(Relu::new())
                .push(Conv2d::same(w, 1, 3, &mut rng))
        });
        Ok(Self {
            skip_channels: (0..d - 1).map(|s| config.width(s)).collect(),
            pools: (0..d - 1).map(|_| MaxPool2::new()).collect(),
            ups: (0..d - 1).map(|_| UpsampleNearest2::new()).collect(),
            config,
            down,
            up,
            head,
            refine,
        })
    }

    pub fn config(&self) -> &ImportanceNetConfig {
        &self.config
    }

    /// Logits for a batch at the configured input size.
    pub fn infer_logits(&self, x: &Tensor) -> Tensor {
        let d = self.config.depth;
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for s in 0..d {
            cur = self.down[s].infer(&cur);
            if s + 1 < d {
                skips.push(cur.clone());
                cur = self.pools[s].infer(&cur);
            }
        }
        for (i, s) in (0..d - 1).rev().enumerate() {
            let u = self.ups[i].infer(&cur);
            cur = self.up[i].infer(&Tensor::concat_channels(&u, &skips[s]));
        }
        let coarse = self.head.infer(&cur);
        match &self.refine {
            Some(r) => {
                let mut out = r.infer(&coarse);
                out.add_assign(&coarse);
                out
            }
            None => coarse,
        }
    }

    fn forward_logits(&mut self, x: &Tensor) -> Tensor {
        let d = self.config.depth;
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for s in 0..d {
            cur = self.down[s].forward(&cur);
            if s + 1 < d {
                skips.push(cur.clone());
                cur = self.pools[s].forward(&cur);
            }
        }
        for (i, s) in (0..d - 1).rev().enumerate() {
            let u = self.ups[i].forward(&cur);
            cur = self.up[i].forward(&Tensor::concat_channels(&u, &skips[s]));
        }
        let coarse = self.head.forward(&cur);
        match &mut self.refine {
            Some(r) => {
                let mut out = r.forward(&coarse);
                out.add_assign(&coarse);
                out
            }
            None => coarse,
        }
    }

    fn backward_logits(&mut self, grad: &Tensor) {
        let d = self.config.depth;
        let mut g = match &mut self.refine {
            Some(r) => {
                let mut g = r.backward(grad);
                g.add_assign(grad);
                g
            }
            None => grad.clone(),
        };
        g = self.head.backward(&g);
        let mut skip_grads: Vec<Option<Tensor>> = (0..d - 1).map(|_| None).collect();
        for i in (0..d - 1).rev() {
            let s = d - 2 - i;
            let gc = self.up[i].backward(&g);
            let up_c = gc.c() - self.skip_channels[s];
            let (gu, gs) = gc.split_channels(up_c);
            skip_grads[s] = Some(gs);
            g = self.ups[i].backward(&gu);
        }
        for s in (0..d).rev() {
            if s + 1 < d {
                g = self.pools[s].backward(&g);
                g.add_assign(skip_grads[s].as_ref().expect("skip gradient"));
            }
            g = self.down[s].backward(&g);
        }
    }
}

impl Parameterized for ImportanceNet {
    fn visit(&self, f: &mut ParamVisitor<'_>) {
        for (i, b) in self.down.iter().enumerate() {
            b.visit(&format!("down{i}"), f);
        }
        for (i, b) in self.up.iter().enumerate() {
            b.visit(&format!("up{i}"), f);
        }
        self.head.visit("head", f);
        if let Some(r) = &self.refine {
            r.visit("refine", f);
        }
    }

    fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        for (i, b) in self.down.iter_mut().enumerate() {
            b.visit_mut(&format!("down{i}"), f);
        }
        for (i, b) in self.up.iter_mut().enumerate() {
            b.visit_mut(&format!("up{i}"), f);
        }
        self.head.visit_mut("head", f);
        if let Some(r) = &mut self.refine {
            r.visit_mut("refine", f);
        }
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn check_same(a: &Plane, b: &Plane) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::ShapeMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// Binary cross-entropy of prediction `v` against target `g`, averaged over pixels.
pub fn loss_bce(g: &Plane, v: &Plane) -> Result<f64, MetricError> {
    check_same(g, v)?;
    let mut acc = 0.0;
    for (&t, &p) in g.data.iter().zip(&v.data) {
        let (t, p) = (t as f64, (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS));
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(acc / g.data.len() as f64)
}

/// `1 - SSIM(x, y)` over `window`-sized windows.
pub fn loss_ssim_window(x: &Plane, y: &Plane, window: usize) -> Result<f64, MetricError> {
    Ok(1.0 - ssim_plane_window(x, y, window)?)
}

pub fn loss_ssim(x: &Plane, y: &Plane) -> Result<f64, MetricError> {
    loss_ssim_window(x, y, SSIM_WINDOW)
}

pub fn loss_hybrid(g: &Plane, v: &Plane) -> Result<f64, MetricError> {
    loss_hybrid_window(g, v, SSIM_WINDOW)
}

pub fn loss_hybrid_window(g: &Plane, v: &Plane, window: usize) -> Result<f64, MetricError> {
    Ok(loss_bce(g, v)? + loss_ssim_window(g, v, window)?)
}

/// Which terms of the hybrid objective to train with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Hybrid,
    Bce,
    Ssim,
}

/// Loss and its gradient with respect to the prediction `v`.
pub fn loss_grad(g: &Plane, v: &Plane, kind: LossKind, window: usize) -> Result<(f64, Vec<f64>), MetricError> {
    check_same(g, v)?;
    let n = g.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; g.data.len()];
    if kind != LossKind::Ssim {
        loss += loss_bce(g, v)?;
        for (i, (&t, &p)) in g.data.iter().zip(&v.data).enumerate() {
            let (t, p) = (t as f64, p as f64);
            if p > BCE_EPS && p < 1.0 - BCE_EPS {
                grad[i] += (-t / p + (1.0 - t) / (1.0 - p)) / n;
            }
        }
    }
    if kind != LossKind::Bce {
        let (s, ds) = ssim_plane_grad(g, v, window)?;
        loss += 1.0 - s;
        for (o, d) in grad.iter_mut().zip(ds) {
            *o -= d;
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f32,
    pub batch: usize,
    pub loss: LossKind,
    pub ssim_window: usize,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine_decay: bool,
}

impl ImportanceTrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self { epochs, seed, learning_rate: 1e-3, batch: 4, loss: LossKind::Hybrid, ssim_window: SSIM_WINDOW, cosine_decay: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMeta {
    pub config: ImportanceNetConfig,
    pub training: Option<ImportanceTrainConfig>,
    pub loss_curve: Vec<f64>,
}

/// Trained network plus metadata; this is what gets checkpointed.
pub struct ImportanceModel {
    pub net: ImportanceNet,
    pub meta: ImportanceMeta,
}

impl Parameterized for ImportanceModel {
    fn visit(&self, f: &mut ParamVisitor<'_>) {
        self.net.visit(f)
    }
    fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        self.net.visit_mut(f)
    }
}

/// One training example, already at the network's input size.
#[derive(Clone, Debug)]
pub struct ImportancePair {
    pub image: ChartImage,
    pub target: Plane,
}

impl ImportancePair {
    pub fn resized(image: &ChartImage, target: &Plane, side: usize) -> Self {
        Self { image: image.resize(side, side), target: target.resize(side, side) }
    }
}

impl ImportanceModel {
    pub fn new(config: ImportanceNetConfig, seed: u64) -> Result<Self, ImportanceError> {
        let net = ImportanceNet::new(config.clone(), seed)?;
        Ok(Self { net, meta: ImportanceMeta { config, training: None, loss_curve: Vec::new() } })
    }

    pub fn save(&self, path: &Path) -> Result<(), ImportanceError> {
        nn::save_bundle(self, BufWriter::new(File::create(path)?))?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(path.with_extension("meta.json"))?), &self.meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ImportanceError> {
        let meta: ImportanceMeta = serde_json::from_reader(BufReader::new(File::open(path.with_extension("meta.json"))?))?;
        let mut model = Self::new(meta.config.clone(), 0)?;
        nn::load_bundle(&mut model, BufReader::new(File::open(path)?))?;
        model.meta = meta;
        Ok(model)
    }

    /// Importance map at the network resolution.
    fn predict_square(&self, image: &ChartImage) -> Plane {
        let side = self.meta.config.input_size;
        let x = image.resize(side, side).to_tensor();
        let z = self.net.infer_logits(&x);
        Plane::from_vec(side, side, z.data.iter().map(|&v| sigmoid(v)).collect())
    }
}

/// Per-pixel importance in [0,1] at the image's own resolution.
pub fn predict_importance(image: &ChartImage, model: &ImportanceModel) -> Result<Plane, ImportanceError> {
    let (w, h) = image.dims();
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
        return Err(ImportanceError::ImageTooSmall(w, h));
    }
    let mut map = model.predict_square(image).resize(w, h);
    map.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(map)
}

/// Train from scratch. The returned curve holds the mean loss of every epoch.
pub fn train_importance(
    pairs: &[ImportancePair],
    config: ImportanceNetConfig,
    train: &ImportanceTrainConfig,
) -> Result<ImportanceModel, ImportanceError> {
    if pairs.is_empty() {
        return Err(ImportanceError::EmptyCorpus);
    }
    if pairs.len() < MIN_TRAIN_PAIRS {
        return Err(ImportanceError::TooFewPairs(pairs.len()));
    }
    let mut model = ImportanceModel::new(config.clone(), train.seed)?;
    let side = config.input_size;
    let resized: Vec<ImportancePair>;
    let pairs = if pairs.iter().all(|p| p.image.dims() == (side, side) && p.target.dims() == (side, side)) {
        pairs
    } else {
        resized = pairs.iter().map(|p| ImportancePair::resized(&p.image, &p.target, side)).collect();
        &resized
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x1a70);
    let mut opt = Adam::new(train.learning_rate);
    let total_steps = (train.epochs * pairs.len().div_ceil(train.batch.max(1))).max(1);
    let mut curve = Vec::with_capacity(train.epochs);
    for _ in 0..train.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(train.batch.max(1)) {
            if train.cosine_decay {
                let t = opt.steps_taken() as f32 / total_steps as f32;
                opt.lr = train.learning_rate * 0.5 * (1.0 + (std::f32::consts::PI * t).cos());
            }
            let x = Tensor::stack(&chunk.iter().map(|&i| pairs[i].image.to_tensor()).collect::<Vec<_>>());
            let z = model.net.forward_logits(&x);
            let mut gz = Tensor::zeros(z.n(), 1, side, side);
            for (k, &i) in chunk.iter().enumerate() {
                let v = Plane::from_vec(side, side, z.sample(k).iter().map(|&l| sigmoid(l)).collect());
                let (loss, gv) = loss_grad(&pairs[i].target, &v, train.loss, train.ssim_window)?;
                epoch_loss += loss;
                let b = chunk.len() as f64;
                for (j, o) in gz.sample_mut(k).iter_mut().enumerate() {
                    let p = v.data[j] as f64;
                    // Chain through the sigmoid; the BCE part reduces to (p - g)/N.
                    *o = (gv[j] * p * (1.0 - p) / b) as f32;
                }
            }
            model.net.backward_logits(&gz);
            opt.step(&mut model.net);
        }
        curve.push(epoch_loss / pairs.len() as f64);
    }
    model.meta.training = Some(train.clone());
    model.meta.loss_curve = curve;
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub cc: f64,
    pub rmse: f64,
    pub r2: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaliencyError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    /// Correlation and R^2 are undefined; RMSE is still reported.
    #[error("constant map (rmse {rmse})")]
    ConstantMap { rmse: f64 },
}

/// Pearson correlation, RMSE and coefficient of determination of `pred` against `gt`.
pub fn eval_saliency(pred: &Plane, gt: &Plane) -> Result<SaliencyScores, SaliencyError> {
    check_same(pred, gt)?;
    let n = pred.data.len() as f64;
    let mp = pred.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mg = gt.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut spp, mut sgg, mut spg, mut sres) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p as f64, g as f64);
        spp += (p - mp) * (p - mp);
        sgg += (g - mg) * (g - mg);
        spg += (p - mp) * (g - mg);
        sres += (g - p) * (g - p);
    }
    let rmse = (sres / n).sqrt();
    if spp <= 0.0 || sgg <= 0.0 {
        return Err(SaliencyError::ConstantMap { rmse });
    }
    Ok(SaliencyScores { cc: (spg / (spp.sqrt() * sgg.sqrt())).clamp(-1.0, 1.0), rmse, r2: 1.0 - sres / sgg })
}
