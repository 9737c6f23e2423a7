//! Desk-scale models shared by the integration tests. Each checkpoint is
//! trained once with fixed seeds and cached under the cargo target directory;
//! delete `target/tmp/viscode-models-*` to retrain.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use viscode::corpus::CorpusConfig;
use viscode::importance::{train_importance, ImportanceModel, ImportanceNetConfig, ImportanceTrainConfig, LossKind};
use viscode::models::{IMPORTANCE_FILE, STEGO_FILE};
use viscode::raster::Plane;
use viscode::stegonet::{train_stego, StegoConfig, StegoModel, TrainOptions};
use viscode::training::{importance_pairs, qr_secrets, stego_pairs, synthetic_charts, LabeledChart, PAIR_SIDE};

pub const TRAIN_CHARTS: usize = 150;
pub const IMPORTANCE_CHARTS: usize = 100;
pub const QR_SECRETS: usize = 300;
pub const PAIRS_PER_CHART: usize = 4;
pub const STEGO_EPOCHS: usize = 20;
pub const IMPORTANCE_EPOCHS: usize = 10;
pub const IMPORTANCE_SIDE: usize = 128;
/// Held-out charts come from this index onward of the same synthetic stream.
pub const HELD_OUT_START: usize = 10_000;

static TRAIN_LOCK: Mutex<()> = Mutex::new(());

/// Directory laid out like a model directory: `importance.bin` (hybrid loss)
/// and `stego.bin` (importance-weighted), plus ablation variants.
pub fn cache_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("viscode-models-v1");
    std::fs::create_dir_all(&d).unwrap();
    d
}

pub fn corpus_config() -> CorpusConfig {
    CorpusConfig::default()
}

pub fn train_charts(n: usize) -> Vec<LabeledChart> {
    synthetic_charts(0..n, &corpus_config()).unwrap()
}

pub fn held_out(n: usize) -> Vec<LabeledChart> {
    synthetic_charts(HELD_OUT_START..HELD_OUT_START + n, &corpus_config()).unwrap()
}

/// Square held-out charts of side `side`.
pub fn held_out_square(n: usize, side: usize) -> Vec<LabeledChart> {
    let cfg = CorpusConfig { min_side: side, max_side: side, ..corpus_config() };
    synthetic_charts(HELD_OUT_START..HELD_OUT_START + n, &cfg).unwrap()
}

pub fn secrets() -> Vec<Plane> {
    qr_secrets(QR_SECRETS, 7).unwrap()
}

fn done_marker(path: &Path) -> PathBuf {
    path.with_extension("done")
}

fn cached<T>(path: &Path, load: impl Fn(&Path) -> T, train: impl FnOnce() -> T, save: impl FnOnce(&T, &Path)) -> T {
    let _g = TRAIN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    if done_marker(path).exists() {
        return load(path);
    }
    let t = Instant::now();
    let model = train();
    save(&model, path);
    std::fs::write(done_marker(path), format!("{:.0}s\n", t.elapsed().as_secs_f64())).unwrap();
    eprintln!("trained {} in {:.0}s", path.display(), t.elapsed().as_secs_f64());
    model
}

pub fn stego_file(uniform: bool) -> PathBuf {
    cache_dir().join(if uniform { "stego_uniform.bin" } else { STEGO_FILE })
}

/// Desk stego network on 600 crop pairs; `uniform` replaces V by ones.
pub fn stego(uniform: bool) -> StegoModel {
    let path = stego_file(uniform);
    cached(
        &path,
        |p| StegoModel::load(p).unwrap(),
        || {
            let pairs = stego_pairs(&train_charts(TRAIN_CHARTS), &secrets(), PAIRS_PER_CHART, PAIR_SIDE, 3);
            let cfg = StegoConfig { uniform_importance: uniform, ..StegoConfig::desk() };
            train_stego(&pairs, cfg, &TrainOptions::new(STEGO_EPOCHS, 3)).unwrap()
        },
        |m, p| m.save(p).unwrap(),
    )
}

pub fn importance_file(loss: LossKind) -> PathBuf {
    cache_dir().join(match loss {
        LossKind::Hybrid => IMPORTANCE_FILE,
        LossKind::Bce => "importance_bce.bin",
        LossKind::Ssim => "importance_ssim.bin",
    })
}

pub fn importance(loss: LossKind) -> ImportanceModel {
    let path = importance_file(loss);
    cached(
        &path,
        |p| ImportanceModel::load(p).unwrap(),
        || {
            let net = ImportanceNetConfig { input_size: IMPORTANCE_SIDE, ..ImportanceNetConfig::default() };
            let pairs = importance_pairs(&train_charts(IMPORTANCE_CHARTS), IMPORTANCE_SIDE);
            let mut cfg = ImportanceTrainConfig::new(IMPORTANCE_EPOCHS, 1);
            cfg.loss = loss;
            train_importance(&pairs, net, &cfg).unwrap()
        },
        |m, p| m.save(p).unwrap(),
    )
}

/// Make sure the default pair exists and return the directory holding it.
pub fn model_dir() -> PathBuf {
    importance(LossKind::Hybrid);
    stego(false);
    cache_dir()
}
