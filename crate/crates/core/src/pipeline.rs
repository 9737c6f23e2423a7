//! End-to-end embedding and recovery of typed payloads, and chart retargeting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{generate_chart, ChartSpec, ChartType, CorpusError, RenderedChart, THEMES};
use crate::importance::{predict_importance, ImportanceError, ImportanceModel};
use crate::metrics::MetricError;
use crate::planner::{propose_regions_with, EmbeddingPlan, PlanError, PlanOptions};
use crate::qrcodec::{
    build_position_manifest, parse_position_manifest, post_qr, render_qr, split_text, EccLevel, ManifestBox, QrError,
    POSITION_BOX,
};
use crate::raster::{ChartImage, Plane, RasterError};
use crate::stegonet::{StegoError, StegoModel};

pub use crate::corpus::{kde_density, Bandwidth, DensityGrid};

/// Bytes around the body: kind, length, checksum.
pub const ENVELOPE_OVERHEAD: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Metadata,
    Source,
    Spec,
}

impl PayloadKind {
    pub const ALL: [PayloadKind; 3] = [PayloadKind::Metadata, PayloadKind::Source, PayloadKind::Spec];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<PayloadKind> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PayloadKind::Metadata => "metadata",
            PayloadKind::Source => "source",
            PayloadKind::Spec => "spec",
        }
    }
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PayloadKind {
    type Err = EnvelopeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| EnvelopeError::UnknownKindName(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("envelope needs at least {ENVELOPE_OVERHEAD} bytes, got {0}")]
    Truncated(usize),
    #[error("unknown payload kind byte {0}")]
    UnknownKind(u8),
    #[error("unknown payload kind {0:?}")]
    UnknownKindName(String),
    #[error("declared body length {declared} but {actual} bytes present")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("checksum {found:08x} does not match {expected:08x}")]
    Checksum { expected: u32, found: u32 },
    #[error("body too long for a 32-bit length field")]
    TooLong,
}

/// Typed payload. Serialized as kind (1 byte), body length (4 bytes,
/// big-endian), body, CRC-32 of everything before it (4 bytes, big-endian).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadEnvelope {
    pub kind: PayloadKind,
    pub body: Vec<u8>,
}

impl PayloadEnvelope {
    pub fn new(kind: PayloadKind, body: impl Into<Vec<u8>>) -> Self {
        Self { kind, body: body.into() }
    }

    pub fn spec(spec: &ChartSpec) -> Self {
        Self::new(PayloadKind::Spec, spec.to_json())
    }

    pub fn serialized_len(&self) -> usize {
        self.body.len() + ENVELOPE_OVERHEAD
    }

    fn header(&self) -> Result<[u8; 5], EnvelopeError> {
        let len = u32::try_from(self.body.len()).map_err(|_| EnvelopeError::TooLong)?;
        let mut h = [0u8; 5];
        h[0] = self.kind.code();
        h[1..].copy_from_slice(&len.to_be_bytes());
        Ok(h)
    }

    pub fn checksum(&self) -> u32 {
        let mut c = crc32fast::Hasher::new();
        c.update(&self.header().unwrap_or_default());
        c.update(&self.body);
        c.finalize()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, EnvelopeError> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&self.header()?);
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.checksum().to_be_bytes());
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, EnvelopeError> {
        if b.len() < ENVELOPE_OVERHEAD {
            return Err(EnvelopeError::Truncated(b.len()));
        }
        let kind = PayloadKind::from_code(b[0]).ok_or(EnvelopeError::UnknownKind(b[0]))?;
        let declared = u32::from_be_bytes([b[1], b[2], b[3], b[4]]) as usize;
        let actual = b.len() - ENVELOPE_OVERHEAD;
        if declared != actual {
            return Err(EnvelopeError::LengthMismatch { declared, actual });
        }
        let env = Self::new(kind, &b[5..5 + actual]);
        let found = u32::from_be_bytes(b[b.len() - 4..].try_into().expect("four bytes"));
        let expected = env.checksum();
        if found != expected {
            return Err(EnvelopeError::Checksum { expected, found });
        }
        Ok(env)
    }

    pub fn body_text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("payload of {needed} blocks does not fit ({placed} placed); at most {max_chars} bytes fit at this eta")]
    CapacityExceeded { needed: usize, placed: usize, max_chars: usize },
    #[error("no position code found in any orientation")]
    NoPositionCode,
    #[error("block {index} could not be decoded: {reason}")]
    BlockDecodeFailed { index: usize, reason: String },
    #[error("reassembled payload failed verification ({reason}); {recovered} of {total} blocks recovered")]
    ChecksumMismatch { partial: Vec<u8>, recovered: usize, total: usize, reason: EnvelopeError },
    #[error("payload is {0}, not a chart spec")]
    WrongPayloadKind(PayloadKind),
    #[error("cannot retarget {from} to {to}; allowed: {}", names(allowed))]
    IncompatibleRetarget { from: ChartType, to: ChartType, allowed: Vec<ChartType> },
    #[error("unknown theme {0:?}")]
    UnknownTheme(String),
    #[error("refusing to write coded image as lossy {0}; pass the unsafe-lossy option to override")]
    LossyFormatRefused(String),
    #[error("unsupported output format {0:?}")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Plan(PlanError),
    #[error(transparent)]
    Qr(#[from] QrError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Stego(#[from] StegoError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn names(types: &[ChartType]) -> String {
    types.iter().map(|t| t.name()).collect::<Vec<_>>().join(", ")
}

impl From<PlanError> for PipelineError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::CapacityExceeded { needed, placed, max_chars } => {
                PipelineError::CapacityExceeded { needed, placed, max_chars }
            }
            other => PipelineError::Plan(other),
        }
    }
}

/// Output container format chosen from a file extension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Png,
    Jpeg,
}

impl OutputFormat {
    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        match ext.as_str() {
            "png" => Ok(OutputFormat::Png),
            "jpg" | "jpeg" => Ok(OutputFormat::Jpeg),
            _ => Err(PipelineError::UnsupportedFormat(ext)),
        }
    }
}

pub const LOSSY_WARNING: &str = "warning: JPEG compression destroys most of the hidden payload; \
     at quality 90 only about a tenth of the characters survive";

#[derive(Clone, Debug)]
pub struct CodedImage {
    pub image: ChartImage,
    pub plan: EmbeddingPlan,
}

impl CodedImage {
    /// Write the image; lossy formats are refused unless `allow_lossy`.
    pub fn save(&self, path: &Path, allow_lossy: bool) -> Result<(), PipelineError> {
        match OutputFormat::from_path(path)? {
            OutputFormat::Png => self.image.save_png(path)?,
            OutputFormat::Jpeg if allow_lossy => {
                log::warn!("{LOSSY_WARNING}");
                std::fs::write(path, self.image.encode_jpeg(90)?)?;
            }
            OutputFormat::Jpeg => return Err(PipelineError::LossyFormatRefused("jpeg".into())),
        }
        Ok(())
    }

    pub fn save_plan(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.plan.to_json())?;
        Ok(())
    }
}

/// Embed `envelope` into `image` using a precomputed importance map.
pub fn encode_with_map(
    image: &ChartImage,
    envelope: &PayloadEnvelope,
    importance: &Plane,
    stego: &StegoModel,
    eta: usize,
    opts: &PlanOptions,
) -> Result<CodedImage, PipelineError> {
    if importance.dims() != image.dims() {
        return Err(RasterError::ShapeMismatch(importance.dims(), image.dims()).into());
    }
    let bytes = envelope.to_bytes()?;
    let plan = propose_regions_with(importance, bytes.len(), eta, opts)?;
    let blocks = split_text(&bytes, eta)?;
    let manifest = build_position_manifest(&plan.manifest_boxes())?;
    let mut out = image.clone();
    let position = render_qr(manifest.as_bytes(), EccLevel::H, POSITION_BOX)?;
    embed(&mut out, image, &position.plane, 0, 0, stego)?;
    for (block, b) in blocks.iter().zip(&plan.content_boxes) {
        let secret = render_qr(&block.content, plan.tier.ecc_level, plan.region_size)?;
        embed(&mut out, image, &secret.plane, b.region.x, b.region.y, stego)?;
    }
    Ok(CodedImage { image: out, plan })
}

fn embed(out: &mut ChartImage, src: &ChartImage, secret: &Plane, x: usize, y: usize, stego: &StegoModel) -> Result<(), PipelineError> {
    let (w, h) = secret.dims();
    let coded = stego.encode_region(&src.crop(x, y, w, h), secret)?.quantize();
    out.paste(&coded, x, y);
    Ok(())
}

/// Predict importance, plan regions and embed.
pub fn encode_message(
    image: &ChartImage,
    envelope: &PayloadEnvelope,
    importance: &ImportanceModel,
    stego: &StegoModel,
    eta: usize,
) -> Result<CodedImage, PipelineError> {
    let v = predict_importance(image, importance)?;
    encode_with_map(image, envelope, &v, stego, eta, &PlanOptions::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStatus {
    pub index: usize,
    pub ok: bool,
    pub bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything recovered from a coded image, including failed blocks.
#[derive(Clone, Debug)]
pub struct DecodeReport {
    /// Clockwise quarter turns applied to the received image before decoding.
    pub orientation: u32,
    pub boxes: Vec<ManifestBox>,
    pub blocks: Vec<Result<Vec<u8>, String>>,
}

impl DecodeReport {
    pub fn statuses(&self) -> Vec<BlockStatus> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(index, b)| match b {
                Ok(bytes) => BlockStatus { index, ok: true, bytes: bytes.len(), error: None },
                Err(e) => BlockStatus { index, ok: false, bytes: 0, error: Some(e.clone()) },
            })
            .collect()
    }

    /// Concatenation of the blocks that decoded, in index order.
    pub fn partial(&self) -> Vec<u8> {
        self.blocks.iter().filter_map(|b| b.as_ref().ok()).flatten().copied().collect()
    }

    pub fn envelope(&self) -> Result<PayloadEnvelope, PipelineError> {
        if let Some((index, Err(reason))) = self.blocks.iter().enumerate().find(|(_, b)| b.is_err()) {
            return Err(PipelineError::BlockDecodeFailed { index, reason: reason.clone() });
        }
        let joined = self.partial();
        PayloadEnvelope::from_bytes(&joined).map_err(|reason| PipelineError::ChecksumMismatch {
            partial: joined,
            recovered: self.blocks.len(),
            total: self.blocks.len(),
            reason,
        })
    }
}

fn read_position(image: &ChartImage, stego: &StegoModel) -> Option<Vec<ManifestBox>> {
    let (w, h) = image.dims();
    if w < POSITION_BOX || h < POSITION_BOX {
        return None;
    }
    let raster = stego.decode_patch(&image.crop(0, 0, POSITION_BOX, POSITION_BOX));
    let bytes = post_qr(&raster).ok()?;
    let boxes = parse_position_manifest(std::str::from_utf8(&bytes).ok()?).ok()?;
    boxes.iter().all(|b| (b.x + b.size) as usize <= w && (b.y + b.size) as usize <= h).then_some(boxes)
}

/// Locate the position code (trying all four orientations) and decode every
/// block it lists.
pub fn decode_blocks(image: &ChartImage, stego: &StegoModel) -> Result<DecodeReport, PipelineError> {
    for q in 0..4 {
        let turned = image.rotate(q);
        let Some(mut boxes) = read_position(&turned, stego) else { continue };
        boxes.sort_by_key(|b| b.block_index);
        let blocks = boxes
            .iter()
            .map(|b| {
                let s = b.size as usize;
                let raster = stego.decode_patch(&turned.crop(b.x as usize, b.y as usize, s, s));
                post_qr(&raster).map_err(|e| e.to_string())
            })
            .collect();
        return Ok(DecodeReport { orientation: q, boxes, blocks });
    }
    Err(PipelineError::NoPositionCode)
}

pub fn decode_message(image: &ChartImage, stego: &StegoModel) -> Result<PayloadEnvelope, PipelineError> {
    decode_blocks(image, stego)?.envelope()
}

/// Requested changes to a decoded chart.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetargetRequest {
    pub chart_type: Option<ChartType>,
    pub theme: Option<String>,
    /// KDE bandwidth for density charts, as a fraction of the data range.
    pub bandwidth: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Retargeted {
    pub chart: RenderedChart,
    /// Types the decoded chart may be retargeted to.
    pub allowed: Vec<ChartType>,
}

/// Apply `req` to `spec` and render the result.
pub fn retarget_spec(spec: &ChartSpec, req: &RetargetRequest) -> Result<Retargeted, PipelineError> {
    let allowed = spec.chart_type.compatible_targets().to_vec();
    let mut out = spec.clone();
    if let Some(to) = req.chart_type {
        if !allowed.contains(&to) {
            return Err(PipelineError::IncompatibleRetarget { from: spec.chart_type, to, allowed });
        }
        out.chart_type = to;
    }
    if let Some(theme) = &req.theme {
        if !THEMES.contains(&theme.as_str()) {
            return Err(PipelineError::UnknownTheme(theme.clone()));
        }
        out.theme.name = theme.clone();
    }
    if req.bandwidth.is_some() {
        out.encoding.bandwidth = req.bandwidth;
    }
    Ok(Retargeted { chart: generate_chart(&out, 0)?, allowed })
}

/// Decode a spec payload from `coded` and re-render it.
pub fn retarget_chart(coded: &ChartImage, stego: &StegoModel, req: &RetargetRequest) -> Result<Retargeted, PipelineError> {
    let env = decode_message(coded, stego)?;
    retarget_envelope(&env, req)
}

pub fn retarget_envelope(env: &PayloadEnvelope, req: &RetargetRequest) -> Result<Retargeted, PipelineError> {
    if env.kind != PayloadKind::Spec {
        return Err(PipelineError::WrongPayloadKind(env.kind));
    }
    let spec = ChartSpec::from_json(&env.body_text())?;
    retarget_spec(&spec, req)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::random_spec;
    use crate::stegonet::StegoConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn envelope_layout() {
        let env = PayloadEnvelope::new(PayloadKind::Source, b"fn main() {}".to_vec());
        let b = env.to_bytes().unwrap();
        assert_eq!(b.len(), 12 + ENVELOPE_OVERHEAD);
        assert_eq!(b[0], 1);
        assert_eq!(&b[1..5], &12u32.to_be_bytes());
        assert_eq!(&b[5..17], b"fn main() {}");
        assert_eq!(u32::from_be_bytes(b[17..].try_into().unwrap()), crc32fast::hash(&b[..17]));
        assert_eq!(PayloadEnvelope::from_bytes(&b).unwrap(), env);
    }

    #[test]
    fn envelope_rejects_damage() {
        let b = PayloadEnvelope::new(PayloadKind::Metadata, b"author=ada".to_vec()).to_bytes().unwrap();
        let mut flipped = b.clone();
        flipped[7] ^= 1;
        assert!(matches!(PayloadEnvelope::from_bytes(&flipped), Err(EnvelopeError::Checksum { .. })));
        assert_eq!(PayloadEnvelope::from_bytes(&b[..4]), Err(EnvelopeError::Truncated(4)));
        assert!(matches!(PayloadEnvelope::from_bytes(&b[..b.len() - 1]), Err(EnvelopeError::LengthMismatch { .. })));
        let mut kind = b.clone();
        kind[0] = 9;
        assert_eq!(PayloadEnvelope::from_bytes(&kind), Err(EnvelopeError::UnknownKind(9)));
        assert_eq!("SPEC".parse::<PayloadKind>().unwrap(), PayloadKind::Spec);
        assert!("video".parse::<PayloadKind>().is_err());
    }

    proptest! {
        #[test]
        fn envelope_round_trips(kind in 0u8..3, body in proptest::collection::vec(any::<u8>(), 0..600)) {
            let env = PayloadEnvelope::new(PayloadKind::from_code(kind).unwrap(), body);
            prop_assert_eq!(PayloadEnvelope::from_bytes(&env.to_bytes().unwrap()).unwrap(), env);
        }
    }

    fn bar_spec() -> ChartSpec {
        random_spec(ChartType::Bar, 400, 300, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn retarget_keeps_data_and_checks_compatibility() {
        let spec = bar_spec();
        let r = retarget_spec(&spec, &RetargetRequest { chart_type: Some(ChartType::Line), ..Default::default() }).unwrap();
        assert_eq!(r.chart.spec.chart_type, ChartType::Line);
        assert_eq!(r.chart.spec.rows, spec.rows);
        assert!(r.allowed.contains(&ChartType::Pie));
        match retarget_spec(&spec, &RetargetRequest { chart_type: Some(ChartType::Network), ..Default::default() }) {
            Err(PipelineError::IncompatibleRetarget { allowed, .. }) => assert_eq!(allowed.len(), 6),
            other => panic!("{:?}", other.map(|r| r.allowed)),
        }
        assert!(matches!(
            retarget_spec(&spec, &RetargetRequest { theme: Some("neon".into()), ..Default::default() }),
            Err(PipelineError::UnknownTheme(_))
        ));
    }

    #[test]
    fn retarget_refuses_non_spec_payloads() {
        let env = PayloadEnvelope::new(PayloadKind::Metadata, b"title=x".to_vec());
        assert!(matches!(retarget_envelope(&env, &RetargetRequest::default()), Err(PipelineError::WrongPayloadKind(PayloadKind::Metadata))));
        let env = PayloadEnvelope::spec(&bar_spec());
        let r = retarget_envelope(&env, &RetargetRequest { theme: Some("dark".into()), ..Default::default() }).unwrap();
        assert_eq!(r.chart.spec.theme.name, "dark");
    }

    #[test]
    fn untrained_model_touches_only_plan_boxes() {
        let stego = StegoModel::new(StegoConfig::desk(), 1);
        let spec = random_spec(ChartType::Scatter, 600, 420, &mut ChaCha8Rng::seed_from_u64(8));
        let img = generate_chart(&spec, 0).unwrap().image;
        let v = Plane::new(600, 420, 0.5);
        let env = PayloadEnvelope::new(PayloadKind::Metadata, vec![b'a'; 1500]);
        let coded = encode_with_map(&img, &env, &v, &stego, 800, &PlanOptions::default()).unwrap();
        assert_eq!(coded.plan.content_boxes.len(), 2);
        let (a, b) = (img.to_rgb8(), coded.image.to_rgb8());
        for (x, y, p) in b.enumerate_pixels() {
            let inside = coded.plan.all_boxes().any(|r| {
                (r.x..r.x + r.size).contains(&(x as usize)) && (r.y..r.y + r.size).contains(&(y as usize))
            });
            if !inside {
                assert_eq!(p, a.get_pixel(x, y), "({x},{y})");
            }
        }
    }

    #[test]
    fn blank_image_has_no_position_code() {
        let stego = StegoModel::new(StegoConfig::desk(), 1);
        let blank = ChartImage::new(200, 200, [1.0; 3]);
        assert!(matches!(decode_message(&blank, &stego), Err(PipelineError::NoPositionCode)));
    }

    #[test]
    fn oversized_payload_is_refused() {
        let stego = StegoModel::new(StegoConfig::desk(), 1);
        let img = ChartImage::new(670, 420, [1.0; 3]);
        let env = PayloadEnvelope::new(PayloadKind::Source, vec![b'x'; 9000]);
        let r = encode_with_map(&img, &env, &Plane::new(670, 420, 0.0), &stego, 800, &PlanOptions::default());
        assert!(matches!(r, Err(PipelineError::CapacityExceeded { .. })), "{r:?}");
    }

    #[test]
    fn lossy_output_needs_opt_in() {
        let coded = CodedImage {
            image: ChartImage::new(8, 8, [0.5; 3]),
            plan: crate::planner::propose_regions(&Plane::new(300, 300, 0.0), 10, 800).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(coded.save(&dir.path().join("c.jpg"), false), Err(PipelineError::LossyFormatRefused(_))));
        coded.save(&dir.path().join("c.jpg"), true).unwrap();
        coded.save(&dir.path().join("c.png"), false).unwrap();
        assert!(matches!(coded.save(&dir.path().join("c.gif"), false), Err(PipelineError::UnsupportedFormat(_))));
    }
}
