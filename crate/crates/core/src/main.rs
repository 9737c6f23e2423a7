use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use viscode::corpus::{ChartSpec, ChartType, CorpusConfig, CorpusDir};
use viscode::defense::{run_defense_suite, DefenseConfig, VisCodeModels};
use viscode::eval::{capacity_sweep, eval_saliency_suite, eval_steg, sweep_markdown, ImportanceSource};
use viscode::importance::{predict_importance, train_importance, ImportanceNetConfig, ImportanceTrainConfig, LossKind};
use viscode::models::{self, ModelSet};
use viscode::pipeline::{
    decode_blocks, encode_with_map, retarget_envelope, retarget_spec, OutputFormat, PayloadEnvelope, PayloadKind,
    PipelineError, RetargetRequest, LOSSY_WARNING,
};
use viscode::planner::{check_capacity, PlanError, PlanOptions};
use viscode::qrcodec::DEFAULT_ETA;
use viscode::raster::ChartImage;
use viscode::service::{self, ServiceConfig};
use viscode::stegonet::{train_stego, StegoConfig, TrainOptions};
use viscode::training::{importance_pairs, load_charts, load_qr_secrets, stego_pairs, PAIR_SIDE};

const EXIT_CAPACITY: u8 = 3;
const EXIT_DECODE: u8 = 4;

#[derive(Parser)]
#[command(name = "viscode", version, about = "Hide and recover payloads in visualization images")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic chart and QR corpus.
    Corpus(CorpusArgs),
    /// Train the importance or the stego network.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Embed a payload file into a chart image.
    Encode(EncodeArgs),
    /// Recover the payload from a coded image.
    Decode(DecodeArgs),
    /// Re-render the chart spec carried by a coded image.
    Retarget(RetargetArgs),
    /// Run an evaluation suite and write JSON and Markdown reports.
    Eval(EvalArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON corpus configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    charts: Option<usize>,
    #[arg(long)]
    qr: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_side: Option<usize>,
    #[arg(long)]
    max_side: Option<usize>,
}

#[derive(Subcommand)]
enum TrainCommand {
    Importance(TrainImportanceArgs),
    Stego(TrainStegoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Hybrid,
    Bce,
    Ssim,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
struct TrainImportanceArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path; defaults to importance.bin in the model directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = LossArg::Hybrid)]
    loss: LossArg,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
}

#[derive(Args)]
struct TrainStegoArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pairs_per_chart: usize,
    /// Train with V = 1 everywhere (ablation).
    #[arg(long)]
    uniform: bool,
    #[arg(long)]
    importance_floor: Option<f32>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    image: PathBuf,
    /// File holding the payload body.
    #[arg(long)]
    payload: PathBuf,
    #[arg(long, default_value = "metadata")]
    kind: PayloadKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: usize,
    #[arg(long)]
    models: Option<PathBuf>,
    /// Also write the embedding plan as JSON.
    #[arg(long)]
    emit_plan: Option<PathBuf>,
    /// Permit writing the coded image as JPEG.
    #[arg(long)]
    unsafe_lossy: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    image: PathBuf,
    /// Where to write the payload body; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Args)]
struct RetargetArgs {
    /// Coded image carrying a spec payload.
    #[arg(long, required_unless_present = "spec")]
    image: Option<PathBuf>,
    /// Chart spec JSON, instead of a coded image.
    #[arg(long, conflicts_with = "image")]
    spec: Option<PathBuf>,
    #[arg(long = "type")]
    chart_type: Option<ChartType>,
    #[arg(long)]
    theme: Option<String>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Steg,
    Defense,
    Saliency,
    Capacity,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    /// Corpus directory; the test split is evaluated.
    #[arg(long)]
    corpus: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    models: Option<PathBuf>,
    /// Evaluate at most this many charts.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    text_bytes: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use ground-truth importance instead of the trained predictor.
    #[arg(long)]
    gt_importance: bool,
    /// Payload sizes in bits for the capacity suite.
    #[arg(long, value_delimiter = ',')]
    bits: Vec<usize>,
}

#[derive(Args)]
struct ServeArgs {
    /// JSON service configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    ui: Option<PathBuf>,
    #[arg(long)]
    allow_lossy: bool,
    #[arg(long)]
    max_payload_bytes: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let json_mode = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if json_mode {
                println!("{}", json!({ "ok": false, "error": { "message": format!("{e:#}"), "exit_code": code } }));
            }
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::CapacityExceeded { .. } => EXIT_CAPACITY,
                PipelineError::NoPositionCode | PipelineError::BlockDecodeFailed { .. } | PipelineError::ChecksumMismatch { .. } => {
                    EXIT_DECODE
                }
                _ => 1,
            };
        }
        if let Some(PlanError::CapacityExceeded { .. }) = cause.downcast_ref::<PlanError>() {
            return EXIT_CAPACITY;
        }
    }
    1
}

fn emit(json_mode: bool, value: serde_json::Value, human: impl FnOnce() -> String) {
    if json_mode {
        println!("{}", json!({ "ok": true, "data": value }));
    } else {
        let text = human();
        if !text.is_empty() {
            println!("{text}");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let j = cli.json;
    match cli.command {
        Command::Corpus(a) => corpus(a, j),
        Command::Train(TrainCommand::Importance(a)) => train_imp(a, j),
        Command::Train(TrainCommand::Stego(a)) => train_st(a, j),
        Command::Encode(a) => encode(a, j),
        Command::Decode(a) => decode(a, j),
        Command::Retarget(a) => retarget(a, j),
        Command::Eval(a) => eval(a, j),
        Command::Serve(a) => serve(a),
    }
}

fn corpus(a: CorpusArgs, j: bool) -> Result<()> {
    let mut cfg: CorpusConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => CorpusConfig::default(),
    };
    cfg.charts = a.charts.unwrap_or(cfg.charts);
    cfg.qr_codes = a.qr.unwrap_or(cfg.qr_codes);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.min_side = a.min_side.unwrap_or(cfg.min_side);
    cfg.max_side = a.max_side.unwrap_or(cfg.max_side);
    if cfg.min_side > cfg.max_side {
        bail!("min side {} exceeds max side {}", cfg.min_side, cfg.max_side);
    }
    let dir = CorpusDir::generate(&a.out, &cfg)?;
    let m = &dir.manifest;
    emit(j, serde_json::to_value(m)?, || {
        format!(
            "wrote {}: {} train / {} test charts, {} train / {} test QR codes",
            a.out.display(),
            m.charts.train.len(),
            m.charts.test.len(),
            m.qr.train.len(),
            m.qr.test.len()
        )
    });
    Ok(())
}

fn checkpoint_out(out: Option<PathBuf>, models_flag: Option<&Path>, file: &str) -> Result<PathBuf> {
    let path = out.unwrap_or_else(|| models::resolve_model_dir(models_flag).join(file));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn train_imp(a: TrainImportanceArgs, j: bool) -> Result<()> {
    let dir = CorpusDir::open(&a.corpus)?;
    let mut net = ImportanceNetConfig::default();
    net.input_size = a.input_size.unwrap_or(net.input_size);
    net.depth = a.depth.unwrap_or(net.depth);
    net.base_width = a.width.unwrap_or(net.base_width);
    let mut cfg = ImportanceTrainConfig::new(a.epochs, a.seed);
    cfg.loss = match a.loss {
        LossArg::Hybrid => LossKind::Hybrid,
        LossArg::Bce => LossKind::Bce,
        LossArg::Ssim => LossKind::Ssim,
    };
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    let charts = load_charts(&dir, &dir.manifest.charts.train)?;
    log::info!("training importance on {} charts", charts.len());
    let model = train_importance(&importance_pairs(&charts, net.input_size), net, &cfg)?;
    let out = checkpoint_out(a.out, a.models.as_deref(), models::IMPORTANCE_FILE)?;
    model.save(&out)?;
    let curve = &model.meta.loss_curve;
    emit(j, json!({ "checkpoint": out, "charts": charts.len(), "loss_curve": curve }), || {
        format!("saved {} after {} epochs (final loss {:.5})", out.display(), curve.len(), curve.last().copied().unwrap_or(f64::NAN))
    });
    Ok(())
}

fn train_st(a: TrainStegoArgs, j: bool) -> Result<()> {
    let dir = CorpusDir::open(&a.corpus)?;
    let mut cfg = match a.preset {
        Preset::Desk => StegoConfig::desk(),
        Preset::Full => StegoConfig::default(),
    };
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    cfg.uniform_importance = a.uniform;
    cfg.importance_floor = a.importance_floor.unwrap_or(cfg.importance_floor);
    let charts = load_charts(&dir, &dir.manifest.charts.train)?;
    let secrets = load_qr_secrets(&dir, &dir.manifest.qr.train)?;
    let pairs = stego_pairs(&charts, &secrets, a.pairs_per_chart, PAIR_SIDE, a.seed);
    log::info!("training stego network on {} pairs", pairs.len());
    let mut opts = TrainOptions::new(a.epochs, a.seed);
    opts.patience = a.patience.unwrap_or(opts.patience);
    let model = train_stego(&pairs, cfg, &opts)?;
    let out = checkpoint_out(a.out, a.models.as_deref(), models::STEGO_FILE)?;
    model.save(&out)?;
    let m = &model.meta;
    emit(j, json!({ "checkpoint": out, "pairs": m.pairs, "epochs": m.epochs, "converged": m.converged, "loss_curve": m.loss_curve }), || {
        format!(
            "saved {} after {} epochs on {} pairs (final loss {:.5})",
            out.display(),
            m.loss_curve.len(),
            m.pairs,
            m.loss_curve.last().copied().unwrap_or(f64::NAN)
        )
    });
    Ok(())
}

fn encode(a: EncodeArgs, j: bool) -> Result<()> {
    let format = OutputFormat::from_path(&a.out)?;
    if format == OutputFormat::Jpeg && !a.unsafe_lossy {
        return Err(PipelineError::LossyFormatRefused("jpeg".into()).into());
    }
    let image = ChartImage::load(&a.image).with_context(|| format!("reading {}", a.image.display()))?.quantize();
    let body = std::fs::read(&a.payload).with_context(|| format!("reading {}", a.payload.display()))?;
    let env = PayloadEnvelope::new(a.kind, body);
    let cap = check_capacity(image.dims(), env.serialized_len(), a.eta);
    if !cap.ok {
        eprintln!(
            "capacity: {} bytes need {} blocks; this {}x{} image holds {} blocks, at most {} bytes at eta {}",
            env.serialized_len(),
            cap.blocks_needed,
            image.width,
            image.height,
            cap.blocks_available,
            cap.max_chars,
            a.eta
        );
    }
    let set = ModelSet::load(&models::resolve_model_dir(a.models.as_deref()))?;
    let v = predict_importance(&image, &set.importance)?;
    let coded = encode_with_map(&image, &env, &v, &set.stego, a.eta, &PlanOptions::default()).inspect_err(|e| {
        if let PipelineError::CapacityExceeded { max_chars, .. } = e {
            eprintln!("capacity: payload is {} bytes, at most {max_chars} fit", env.serialized_len());
        }
    })?;
    if format == OutputFormat::Jpeg {
        eprintln!("{LOSSY_WARNING}");
    }
    coded.save(&a.out, a.unsafe_lossy)?;
    if let Some(p) = &a.emit_plan {
        coded.save_plan(p)?;
    }
    let p = viscode::metrics::psnr(&image, &coded.image)?;
    let s = viscode::metrics::ssim(&image, &coded.image)?;
    emit(
        j,
        json!({ "out": a.out, "kind": a.kind.name(), "bytes": env.serialized_len(), "blocks": coded.plan.content_boxes.len(), "psnr": p, "ssim": s, "plan": coded.plan }),
        || format!("wrote {} ({} blocks, PSNR {p:.2} dB, SSIM {s:.4})", a.out.display(), coded.plan.content_boxes.len()),
    );
    Ok(())
}

fn decode(a: DecodeArgs, j: bool) -> Result<()> {
    let image = ChartImage::load(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let stego = models::load_stego(&models::resolve_model_dir(a.models.as_deref()))?;
    let report = decode_blocks(&image, &stego)?;
    let statuses = report.statuses();
    let env = match report.envelope() {
        Ok(e) => e,
        Err(e) => {
            for s in statuses.iter().filter(|s| !s.ok) {
                eprintln!("block {}: {}", s.index, s.error.as_deref().unwrap_or("failed"));
            }
            return Err(e.into());
        }
    };
    if let Some(out) = &a.out {
        std::fs::write(out, &env.body).with_context(|| format!("writing {}", out.display()))?;
    }
    emit(
        j,
        json!({ "kind": env.kind.name(), "bytes": env.body.len(), "body": env.body_text(), "orientation": report.orientation, "blocks": statuses }),
        || match &a.out {
            Some(out) => format!("{} payload, {} bytes, {} blocks -> {}", env.kind, env.body.len(), statuses.len(), out.display()),
            None => env.body_text(),
        },
    );
    Ok(())
}

fn retarget(a: RetargetArgs, j: bool) -> Result<()> {
    let req = RetargetRequest { chart_type: a.chart_type, theme: a.theme.clone(), bandwidth: a.bandwidth };
    let result = match (&a.spec, &a.image) {
        (Some(p), _) => retarget_spec(&ChartSpec::from_json(&std::fs::read_to_string(p)?)?, &req)?,
        (None, Some(img)) => {
            let image = ChartImage::load(img)?;
            let stego = models::load_stego(&models::resolve_model_dir(a.models.as_deref()))?;
            retarget_envelope(&decode_blocks(&image, &stego)?.envelope()?, &req)?
        }
        (None, None) => bail!("pass --image or --spec"),
    };
    result.chart.image.save_png(&a.out)?;
    let allowed: Vec<&str> = result.allowed.iter().map(|t| t.name()).collect();
    emit(j, json!({ "out": a.out, "spec": result.chart.spec, "allowed": allowed }), || {
        format!("wrote {} as {} (allowed: {})", a.out.display(), result.chart.spec.chart_type, allowed.join(", "))
    });
    Ok(())
}

fn eval(a: EvalArgs, j: bool) -> Result<()> {
    let dir = CorpusDir::open(&a.corpus)?;
    let mut ids = dir.manifest.charts.test.clone();
    if let Some(n) = a.limit {
        ids.truncate(n);
    }
    let charts = load_charts(&dir, &ids)?;
    let name = a.corpus.display().to_string();
    let model_dir = models::resolve_model_dir(a.models.as_deref());
    std::fs::create_dir_all(&a.out)?;
    let (stem, value, md) = match a.suite {
        Suite::Steg => {
            let stego = models::load_stego(&model_dir)?;
            let imp = if a.gt_importance { None } else { Some(models::load_importance(&model_dir)?) };
            let source = imp.as_ref().map_or(ImportanceSource::GroundTruth, ImportanceSource::Model);
            let r = eval_steg(&name, &charts, source, &stego, a.text_bytes.unwrap_or(400), a.eta, a.seed)?;
            ("steg", serde_json::to_value(&r)?, r.to_markdown())
        }
        Suite::Defense => {
            let set = ModelSet::load(&model_dir).ok();
            if set.is_none() {
                log::warn!("no checkpoints in {}; running the LSB baseline only", model_dir.display());
            }
            let images: Vec<ChartImage> = charts.iter().map(|c| c.image.quantize()).collect();
            let cfg = DefenseConfig {
                text_bytes: a.text_bytes.unwrap_or(DefenseConfig::default().text_bytes),
                eta: a.eta,
                seed: a.seed,
                ..DefenseConfig::default()
            };
            let models = set.as_ref().map(|s| VisCodeModels { importance: &s.importance, stego: &s.stego });
            let r = run_defense_suite(&name, &images, models, &cfg)?;
            ("defense", serde_json::to_value(&r)?, r.to_markdown())
        }
        Suite::Saliency => {
            let imp = models::load_importance(&model_dir)?;
            let r = eval_saliency_suite(&name, &charts, &imp)?;
            ("saliency", serde_json::to_value(&r)?, r.to_markdown())
        }
        Suite::Capacity => {
            let stego = models::load_stego(&model_dir)?;
            let chart = charts.iter().max_by_key(|c| c.image.width * c.image.height).context("empty test split")?;
            let v = if a.gt_importance { chart.importance.clone() } else { predict_importance(&chart.image, &models::load_importance(&model_dir)?)? };
            let bits = if a.bits.is_empty() { vec![800, 3200, 6400] } else { a.bits.clone() };
            let points = capacity_sweep(&chart.image, &v, &stego, &bits, a.eta, a.seed)?;
            ("capacity", json!({ "chart": chart.id, "dims": chart.image.dims(), "points": points }), sweep_markdown(&points))
        }
    };
    let json_path = a.out.join(format!("{stem}.json"));
    let md_path = a.out.join(format!("{stem}.md"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&value)?)?;
    std::fs::write(&md_path, &md)?;
    emit(j, value, || md);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::from_json_file(p)?,
        None => ServiceConfig { model_dir: models::resolve_model_dir(None), ..ServiceConfig::default() },
    };
    if let Some(m) = a.models {
        cfg.model_dir = m;
    }
    if let Some(h) = a.host {
        cfg.host = h;
    }
    cfg.port = a.port.unwrap_or(cfg.port);
    if let Some(ui) = a.ui {
        cfg.ui_dir = Some(ui);
    }
    cfg.allow_lossy |= a.allow_lossy;
    cfg.max_payload_bytes = a.max_payload_bytes.unwrap_or(cfg.max_payload_bytes);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(cfg))?;
    Ok(())
}
