//! Payload text to QR rasters and back: blocking, tier selection, rendering,
//! binarized symbol decoding and the position manifest.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::OnceLock;

use qrcode::bits::Bits;
use qrcode::{Color, EcLevel, QrCode, Version};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{to_u8, Plane};

/// Longest block a single QR symbol is asked to carry.
pub const MAX_BLOCK_LEN: usize = 2900;
/// Default characters per block.
pub const DEFAULT_ETA: usize = 800;
/// Quiet-zone width in modules.
pub const QUIET_ZONE: usize = 4;
/// Side of the reserved top-left position box.
pub const POSITION_BOX: usize = 100;
/// Content boxes a manifest may describe.
pub const MANIFEST_MAX_BOXES: usize = 12;
/// Byte budget of a serialized manifest. Twelve boxes with four-digit
/// coordinates serialize to at most 246 bytes; this is the ECC-H byte capacity
/// of version 16, whose module grid plus quiet zone (89) fits the position box.
pub const MANIFEST_MAX_BYTES: usize = 250;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QrError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("block of {0} bytes exceeds the {MAX_BLOCK_LEN}-byte limit")]
    BlockTooLong(usize),
    #[error("{len} bytes do not fit any QR version at ECC {ecc} within {size}px")]
    CapacityExceeded { len: usize, ecc: EccLevel, size: usize },
    #[error("QR decode failed: {0}")]
    DecodeFailed(String),
    #[error("manifest has {0} boxes, at most {MANIFEST_MAX_BOXES} allowed")]
    ManifestOverflow(usize),
    #[error("manifest serializes to {0} bytes, at most {MANIFEST_MAX_BYTES} allowed")]
    ManifestTooLong(usize),
    #[error("malformed position manifest: {0}")]
    ManifestParseError(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EccLevel {
    L,
    M,
    Q,
    H,
}

impl EccLevel {
    pub const ALL: [EccLevel; 4] = [EccLevel::L, EccLevel::M, EccLevel::Q, EccLevel::H];

    fn to_qr(self) -> EcLevel {
        match self {
            EccLevel::L => EcLevel::L,
            EccLevel::M => EcLevel::M,
            EccLevel::Q => EcLevel::Q,
            EccLevel::H => EcLevel::H,
        }
    }

    pub fn letter(self) -> char {
        match self {
            EccLevel::L => 'L',
            EccLevel::M => 'M',
            EccLevel::Q => 'Q',
            EccLevel::H => 'H',
        }
    }
}

impl fmt::Display for EccLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for EccLevel {
    type Err = QrError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L" => Ok(EccLevel::L),
            "M" => Ok(EccLevel::M),
            "Q" => Ok(EccLevel::Q),
            "H" => Ok(EccLevel::H),
            other => Err(QrError::ManifestParseError(format!("unknown ECC level `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrTier {
    pub max_chars: usize,
    pub ecc_level: EccLevel,
    /// Nominal square side in pixels.
    pub resolution: usize,
}

pub const TIERS: [QrTier; 4] = [
    QrTier { max_chars: 350, ecc_level: EccLevel::H, resolution: 100 },
    QrTier { max_chars: 1000, ecc_level: EccLevel::Q, resolution: 200 },
    QrTier { max_chars: 2000, ecc_level: EccLevel::M, resolution: 200 },
    QrTier { max_chars: 2900, ecc_level: EccLevel::L, resolution: 300 },
];

pub fn map_config(block_len: usize) -> Result<QrTier, QrError> {
    if block_len == 0 {
        return Err(QrError::EmptyPayload);
    }
    TIERS.iter().copied().find(|t| block_len <= t.max_chars).ok_or(QrError::BlockTooLong(block_len))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextBlock {
    pub index: usize,
    pub content: Vec<u8>,
    pub tier: QrTier,
}

/// Number of blocks and nominal block length for a text of `len` bytes.
pub fn block_layout(len: usize, eta: usize) -> (usize, usize) {
    let num = len.div_ceil(eta.max(1));
    (num, len.div_ceil(num.max(1)))
}

/// Split into `ceil(len/eta)` blocks of `ceil(len/num)` bytes, the last block
/// holding the remainder. All blocks share the tier of the nominal length so a
/// single region size serves every block.
pub fn split_text(text: &[u8], eta: usize) -> Result<Vec<TextBlock>, QrError> {
    if text.is_empty() {
        return Err(QrError::EmptyPayload);
    }
    let (_, len_b) = block_layout(text.len(), eta);
    let tier = map_config(len_b)?;
    Ok(text
        .chunks(len_b)
        .enumerate()
        .map(|(index, c)| TextBlock { index, content: c.to_vec(), tier })
        .collect())
}

pub fn join_blocks(blocks: &[TextBlock]) -> Vec<u8> {
    let mut sorted: Vec<&TextBlock> = blocks.iter().collect();
    sorted.sort_by_key(|b| b.index);
    sorted.iter().flat_map(|b| b.content.iter().copied()).collect()
}

pub fn modules_for_version(version: usize) -> usize {
    17 + 4 * version
}

fn byte_mode_overhead(version: usize) -> usize {
    4 + if version < 10 { 8 } else { 16 }
}

/// Byte-mode capacity of each (ECC, version), derived from the data-bit budget.
fn capacity_table() -> &'static [[usize; 40]; 4] {
    static TABLE: OnceLock<[[usize; 40]; 4]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0usize; 40]; 4];
        for (e, ecc) in EccLevel::ALL.iter().enumerate() {
            for v in 1..=40 {
                let bits = Bits::new(Version::Normal(v as i16)).max_len(ecc.to_qr()).expect("normal version");
                t[e][v - 1] = (bits - byte_mode_overhead(v)) / 8;
            }
        }
        t
    })
}

pub fn byte_capacity(version: usize, ecc: EccLevel) -> usize {
    capacity_table()[ecc as usize][version - 1]
}

/// Smallest version holding `len` bytes at `ecc`.
pub fn min_version(len: usize, ecc: EccLevel) -> Option<usize> {
    (1..=40).find(|&v| byte_capacity(v, ecc) >= len)
}

/// Side of the square a block occupies: the tier resolution, grown when the
/// symbol plus quiet zone would need more than that at one pixel per module.
pub fn region_size(len: usize, tier: &QrTier) -> Result<usize, QrError> {
    let v = min_version(len, tier.ecc_level).ok_or(QrError::CapacityExceeded {
        len,
        ecc: tier.ecc_level,
        size: tier.resolution,
    })?;
    Ok(tier.resolution.max(modules_for_version(v) + 2 * QUIET_ZONE))
}

/// Rendered QR symbol. Dark modules are 0.0, light 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct QrRaster {
    pub plane: Plane,
    pub version: usize,
    pub ecc: EccLevel,
}

/// Pixels per module when a symbol of `version` plus its quiet zone fills a
/// `size` square. Modules may span a fractional number of pixels.
fn module_scale(size: usize, version: usize) -> Option<f64> {
    let s = size as f64 / (modules_for_version(version) + 2 * QUIET_ZONE) as f64;
    (s >= 1.0).then_some(s)
}

/// Pixels whose centres fall inside module `m` along one axis.
fn module_pixels(scale: f64, m: usize) -> Range<usize> {
    let edge = |k: usize| ((k + QUIET_ZONE) as f64 * scale - 0.5).ceil() as usize;
    edge(m)..edge(m + 1)
}

/// Pixels away from the module's borders, used for sampling.
fn module_core(scale: f64, m: usize) -> Range<usize> {
    let a = (m + QUIET_ZONE) as f64 * scale;
    let (lo, hi) = ((a + 0.2 * scale - 0.5).ceil(), (a + 0.8 * scale - 0.5).floor());
    if lo > hi {
        let c = (a + 0.5 * scale) as usize;
        c..c + 1
    } else {
        lo as usize..hi as usize + 1
    }
}

/// Encode bytes in byte mode at the smallest version and render into a `size`
/// square without growing it.
pub fn render_qr(data: &[u8], ecc: EccLevel, size: usize) -> Result<QrRaster, QrError> {
    let exceeded = || QrError::CapacityExceeded { len: data.len(), ecc, size };
    let version = min_version(data.len(), ecc).ok_or_else(exceeded)?;
    let scale = module_scale(size, version).ok_or_else(exceeded)?;
    let mut bits = Bits::new(Version::Normal(version as i16));
    bits.push_byte_data(data).map_err(|_| exceeded())?;
    bits.push_terminator(ecc.to_qr()).map_err(|_| exceeded())?;
    let code = QrCode::with_bits(bits, ecc.to_qr()).map_err(|_| exceeded())?;
    let n = code.width();
    let colors = code.to_colors();
    let mut plane = Plane::new(size, size, 1.0);
    for my in 0..n {
        for mx in 0..n {
            if colors[my * n + mx] == Color::Dark {
                for y in module_pixels(scale, my) {
                    for x in module_pixels(scale, mx) {
                        plane.set(x, y, 0.0);
                    }
                }
            }
        }
    }
    Ok(QrRaster { plane, version, ecc })
}

/// Render a block at its tier, growing the square when needed.
pub fn prep_qr(block: &TextBlock) -> Result<QrRaster, QrError> {
    prep_qr_with(block, true)
}

pub fn prep_qr_with(block: &TextBlock, grow: bool) -> Result<QrRaster, QrError> {
    let size = if grow { region_size(block.content.len(), &block.tier)? } else { block.tier.resolution };
    render_qr(&block.content, block.tier.ecc_level, size)
}

/// Otsu threshold over an 8-bit histogram: values `<= t` are dark.
pub fn otsu_threshold(values: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_t) = (-1.0f64, 0u8);
    for t in 0..256 {
        w0 += hist[t] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += t as f64 * hist[t] as f64;
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    best_t
}

fn finder_dark(dx: usize, dy: usize) -> bool {
    let r = (dx as i32 - 3).abs().max((dy as i32 - 3).abs());
    r != 2
}

/// Sample modules under the rendering convention and score the finder patterns.
fn sample_grid(gray: &[u8], size: usize, t: u8, version: usize) -> Option<(Vec<bool>, f64)> {
    let scale = module_scale(size, version)?;
    let n = modules_for_version(version);
    let cores: Vec<Range<usize>> = (0..n).map(|m| module_core(scale, m)).collect();
    let mut bits = vec![false; n * n];
    for my in 0..n {
        for mx in 0..n {
            let (ys, xs) = (&cores[my], &cores[mx]);
            let mut acc = 0u32;
            for y in ys.clone() {
                acc += gray[y * size + xs.start..y * size + xs.end].iter().map(|&v| v as u32).sum::<u32>();
            }
            bits[my * n + mx] = acc <= t as u32 * (ys.len() * xs.len()) as u32;
        }
    }
    let mut hits = 0;
    for (cx, cy) in [(0, 0), (n - 7, 0), (0, n - 7)] {
        for dy in 0..7 {
            for dx in 0..7 {
                if bits[(cy + dy) * n + cx + dx] == finder_dark(dx, dy) {
                    hits += 1;
                }
            }
        }
    }
    Some((bits, hits as f64 / 147.0))
}

fn decode_bits(bits: &[bool], n: usize) -> Result<Vec<u8>, rqrr::DeQRError> {
    let grid = rqrr::Grid::new(rqrr::SimpleGrid::from_func(n, |x, y| bits[y * n + x]));
    let mut out = Vec::new();
    grid.decode_to(&mut out)?;
    Ok(out)
}

/// Format-information module positions (x, y) for bit `i`, first copy beside the
/// top-left finder and second copy split between the other two finders.
fn format_positions(n: usize, i: usize) -> ((usize, usize), (usize, usize)) {
    const XS: [usize; 15] = [8, 8, 8, 8, 8, 8, 8, 8, 7, 5, 4, 3, 2, 1, 0];
    const YS: [usize; 15] = [0, 1, 2, 3, 4, 5, 7, 8, 8, 8, 8, 8, 8, 8, 8];
    let second = if i >= 8 { (8, n - 15 + i) } else { (n - 1 - i, 8) };
    ((XS[i], YS[i]), second)
}

/// Decode a module grid. A damaged first format copy can be miscorrected into a
/// valid but wrong format word, so on failure the second copy is tried as well.
fn decode_grid(bits: &[bool], n: usize) -> Result<Vec<u8>, rqrr::DeQRError> {
    decode_bits(bits, n).or_else(|e| {
        let mut alt = bits.to_vec();
        for i in 0..15 {
            let ((x1, y1), (x2, y2)) = format_positions(n, i);
            alt[y1 * n + x1] = bits[y2 * n + x2];
        }
        if alt == bits {
            return Err(e);
        }
        decode_bits(&alt, n)
    })
}

/// Recover the payload from a (possibly noisy) grayscale symbol patch.
///
/// Symbols laid out by [`render_qr`] are sampled directly on their module grid
/// by area averaging; anything else goes through generic symbol detection.
pub fn post_qr(raster: &Plane) -> Result<Vec<u8>, QrError> {
    let gray: Vec<u8> = raster.data.iter().map(|&v| to_u8(v)).collect();
    let (lo, hi) = gray.iter().fold((u8::MAX, 0u8), |(l, h), &v| (l.min(v), h.max(v)));
    if hi.saturating_sub(lo) < 8 {
        return Err(QrError::DecodeFailed("blank patch".into()));
    }
    let t = otsu_threshold(&gray);
    if raster.width == raster.height {
        let size = raster.width;
        let mut candidates: Vec<(f64, usize, Vec<bool>)> = (1..=40)
            .filter_map(|v| sample_grid(&gray, size, t, v).map(|(b, s)| (s, v, b)))
            .filter(|(s, _, _)| *s >= 0.6)
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, v, bits) in &candidates {
            if let Ok(out) = decode_grid(bits, modules_for_version(*v)) {
                return Ok(out);
            }
        }
    }
    let mut img = rqrr::PreparedImage::prepare_from_bitmap(raster.width, raster.height, |x, y| {
        gray[y * raster.width + x] <= t
    });
    let mut last = String::from("no symbol found");
    for grid in img.detect_grids() {
        let mut out = Vec::new();
        match grid.decode_to(&mut out) {
            Ok(_) => return Ok(out),
            Err(e) => last = e.to_string(),
        }
    }
    Err(QrError::DecodeFailed(last))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestBox {
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub ecc: EccLevel,
    pub block_index: u32,
}

impl ManifestBox {
    fn overlaps(&self, o: &ManifestBox) -> bool {
        let (a0, a1) = (self.x as u64, (self.x + self.size) as u64);
        let (b0, b1) = (o.x as u64, (o.x + o.size) as u64);
        let (c0, c1) = (self.y as u64, (self.y + self.size) as u64);
        let (d0, d1) = (o.y as u64, (o.y + o.size) as u64);
        a0 < b1 && b0 < a1 && c0 < d1 && d0 < c1
    }
}

fn validate_boxes(boxes: &[ManifestBox]) -> Result<(), QrError> {
    if boxes.len() > MANIFEST_MAX_BOXES {
        return Err(QrError::ManifestOverflow(boxes.len()));
    }
    for (i, a) in boxes.iter().enumerate() {
        if boxes[i + 1..].iter().any(|b| a.overlaps(b)) {
            return Err(QrError::ManifestParseError(format!("box {i} overlaps another box")));
        }
    }
    let mut idx: Vec<u32> = boxes.iter().map(|b| b.block_index).collect();
    idx.sort_unstable();
    if idx.iter().enumerate().any(|(i, &v)| v as usize != i) {
        return Err(QrError::ManifestParseError("block indices are not 0..n".into()));
    }
    Ok(())
}

/// Serialize as `VC1|count|x,y,s,e,i;x,y,s,e,i...`.
pub fn build_position_manifest(boxes: &[ManifestBox]) -> Result<String, QrError> {
    validate_boxes(boxes)?;
    let body: Vec<String> =
        boxes.iter().map(|b| format!("{},{},{},{},{}", b.x, b.y, b.size, b.ecc, b.block_index)).collect();
    let s = format!("VC1|{}|{}", boxes.len(), body.join(";"));
    if s.len() > MANIFEST_MAX_BYTES {
        return Err(QrError::ManifestTooLong(s.len()));
    }
    Ok(s)
}

pub fn parse_position_manifest(s: &str) -> Result<Vec<ManifestBox>, QrError> {
    let bad = |m: &str| QrError::ManifestParseError(m.to_string());
    let mut parts = s.splitn(3, '|');
    if parts.next() != Some("VC1") {
        return Err(bad("missing VC1 tag"));
    }
    let count: usize = parts.next().and_then(|c| c.parse().ok()).ok_or_else(|| bad("bad box count"))?;
    let body = parts.next().ok_or_else(|| bad("missing box list"))?;
    if count > MANIFEST_MAX_BOXES {
        return Err(QrError::ManifestOverflow(count));
    }
    let entries: Vec<&str> = if body.is_empty() { Vec::new() } else { body.split(';').collect() };
    if entries.len() != count {
        return Err(bad("box count does not match list"));
    }
    let mut boxes = Vec::with_capacity(count);
    for e in entries {
        let f: Vec<&str> = e.split(',').collect();
        if f.len() != 5 {
            return Err(bad("box needs five fields"));
        }
        let num = |s: &str| s.parse::<u32>().map_err(|_| bad("bad number"));
        boxes.push(ManifestBox { x: num(f[0])?, y: num(f[1])?, size: num(f[2])?, ecc: f[3].parse()?, block_index: num(f[4])? });
    }
    validate_boxes(&boxes)?;
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Byte-mode capacities at ECC H for versions 1..=20 as tabulated in the
    /// QR standard.
    const ISO_BYTE_CAPACITY_H: [usize; 20] =
        [7, 14, 24, 34, 44, 58, 64, 84, 98, 119, 137, 155, 177, 194, 220, 250, 280, 310, 338, 382];
    /// Version 40 byte capacities, L M Q H.
    const ISO_V40: [usize; 4] = [2953, 2331, 1663, 1273];

    #[test]
    fn capacity_table_matches_standard() {
        for (i, &c) in ISO_BYTE_CAPACITY_H.iter().enumerate() {
            assert_eq!(byte_capacity(i + 1, EccLevel::H), c, "version {}", i + 1);
        }
        for (e, &c) in EccLevel::ALL.iter().zip(&ISO_V40) {
            assert_eq!(byte_capacity(40, *e), c);
        }
    }

    #[test]
    fn split_examples() {
        let lens = |n: usize, eta: usize| -> Vec<usize> {
            split_text(&vec![b'a'; n], eta).unwrap().iter().map(|b| b.content.len()).collect()
        };
        assert_eq!(lens(2000, 800), vec![667, 667, 666]);
        assert_eq!(lens(800, 800), vec![800]);
        assert_eq!(lens(801, 800), vec![401, 400]);
        assert_eq!(split_text(b"", 800), Err(QrError::EmptyPayload));
    }

    #[test]
    fn tiers_follow_table() {
        assert_eq!(map_config(300).unwrap(), QrTier { max_chars: 350, ecc_level: EccLevel::H, resolution: 100 });
        assert_eq!(map_config(1500).unwrap().ecc_level, EccLevel::M);
        assert_eq!(map_config(1500).unwrap().resolution, 200);
        let t = map_config(2500).unwrap();
        assert_eq!((t.ecc_level, t.resolution), (EccLevel::L, 300));
        assert_eq!(map_config(350).unwrap().ecc_level, EccLevel::H);
        assert_eq!(map_config(351).unwrap().ecc_level, EccLevel::Q);
        assert_eq!(map_config(2001).unwrap().ecc_level, EccLevel::L);
        assert_eq!(map_config(2901), Err(QrError::BlockTooLong(2901)));
    }

    #[test]
    fn tier_resolution_is_monotone() {
        let mut prev = 0;
        for len in 1..=MAX_BLOCK_LEN {
            let r = map_config(len).unwrap().resolution;
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn hello_round_trips() {
        let blocks = split_text(b"hello", DEFAULT_ETA).unwrap();
        let r = prep_qr(&blocks[0]).unwrap();
        assert_eq!(r.plane.dims(), (100, 100));
        assert_eq!(post_qr(&r.plane).unwrap(), b"hello");
    }

    #[test]
    fn largest_block_round_trips_at_l_300() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<u8> = (0..2900).map(|_| rng.random()).collect();
        let blocks = split_text(&data, 2900).unwrap();
        assert_eq!(blocks[0].tier.resolution, 300);
        let r = prep_qr(&blocks[0]).unwrap();
        assert_eq!(r.plane.width, 300);
        assert_eq!(post_qr(&r.plane).unwrap(), data);
    }

    #[test]
    fn ecc_h_350_bytes_grows_the_region() {
        // 350 bytes need version 20 at ECC H: 97 modules plus the quiet zone.
        let oracle_version = ISO_BYTE_CAPACITY_H.iter().position(|&c| c >= 350).unwrap() + 1;
        let side = 17 + 4 * oracle_version + 8;
        assert!(side > 100);
        let block = TextBlock { index: 0, content: vec![b'x'; 350], tier: map_config(350).unwrap() };
        let r = prep_qr(&block).unwrap();
        assert_eq!(r.plane.width, side);
        assert_eq!(post_qr(&r.plane).unwrap(), block.content);
        assert!(matches!(prep_qr_with(&block, false), Err(QrError::CapacityExceeded { .. })));
    }

    #[test]
    fn format_copies_agree_on_clean_symbols() {
        for len in [5usize, 100, 300] {
            let r = render_qr(&vec![7u8; len], EccLevel::H, 200).unwrap();
            let n = modules_for_version(r.version);
            let scale = module_scale(200, r.version).unwrap();
            let dark = |(x, y): (usize, usize)| r.plane.get(module_core(scale, x).start, module_core(scale, y).start) < 0.5;
            for i in 0..15 {
                let (a, b) = format_positions(n, i);
                assert_eq!(dark(a), dark(b), "bit {i}");
            }
        }
    }

    #[test]
    fn blank_patch_fails() {
        assert!(matches!(post_qr(&Plane::new(100, 100, 1.0)), Err(QrError::DecodeFailed(_))));
        assert!(matches!(post_qr(&Plane::new(100, 100, 0.3)), Err(QrError::DecodeFailed(_))));
    }

    #[test]
    fn otsu_separates_two_levels() {
        let mut v = vec![40u8; 100];
        v.extend(vec![200u8; 300]);
        let t = otsu_threshold(&v);
        assert!((40..200).contains(&t));
    }

    #[test]
    fn noisy_gray_levels_still_decode() {
        let block = split_text(b"noisy but readable", DEFAULT_ETA).unwrap().remove(0);
        let mut r = prep_qr(&block).unwrap().plane;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for v in r.data.iter_mut() {
            *v = (0.3 + 0.4 * *v + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0);
        }
        assert_eq!(post_qr(&r).unwrap(), block.content);
    }

    #[test]
    fn manifest_examples() {
        assert_eq!(build_position_manifest(&[]).unwrap(), "VC1|0|");
        assert_eq!(parse_position_manifest("VC1|0|").unwrap(), vec![]);
        let one = vec![ManifestBox { x: 100, y: 200, size: 200, ecc: EccLevel::M, block_index: 0 }];
        let s = build_position_manifest(&one).unwrap();
        assert_eq!(s, "VC1|1|100,200,200,M,0");
        assert_eq!(parse_position_manifest(&s).unwrap(), one);
        let many: Vec<ManifestBox> = (0..13)
            .map(|i| ManifestBox { x: 100 * i, y: 0, size: 100, ecc: EccLevel::H, block_index: i })
            .collect();
        assert_eq!(build_position_manifest(&many), Err(QrError::ManifestOverflow(13)));
        assert!(parse_position_manifest("VC2|0|").is_err());
        assert!(parse_position_manifest("VC1|2|1,2,3,H,0").is_err());
        assert!(parse_position_manifest("VC1|1|1,2,3,Z,0").is_err());
    }

    #[test]
    fn twelve_wide_boxes_fit_the_byte_budget_and_the_position_box() {
        let boxes: Vec<ManifestBox> = (0..12)
            .map(|i| ManifestBox { x: 2999, y: 1000 + 300 * i, size: 300, ecc: EccLevel::L, block_index: 11 - i })
            .collect();
        let s = build_position_manifest(&boxes).unwrap();
        assert!(s.len() <= MANIFEST_MAX_BYTES);
        let r = render_qr(s.as_bytes(), EccLevel::H, POSITION_BOX).unwrap();
        assert_eq!(post_qr(&r.plane).unwrap(), s.as_bytes());
    }

    /// Invert the modules selected by `pick` (module coordinates) in place.
    fn flip_modules(r: &QrRaster, mut pick: impl FnMut(usize, usize) -> bool) -> Plane {
        let n = modules_for_version(r.version);
        let scale = module_scale(r.plane.width, r.version).unwrap();
        let mut p = r.plane.clone();
        for my in 0..n {
            for mx in 0..n {
                if pick(mx, my) {
                    for py in module_pixels(scale, my) {
                        for px in module_pixels(scale, mx) {
                            p.set(px, py, 1.0 - p.get(px, py));
                        }
                    }
                }
            }
        }
        p
    }

    #[test]
    fn ecc_h_survives_five_percent_burst_damage() {
        for len in [5usize, 30, 100, 300] {
            let block = split_text(&vec![b'q'; len], DEFAULT_ETA).unwrap().remove(0);
            let r = prep_qr(&block).unwrap();
            let n = modules_for_version(r.version);
            let side = ((n * n) as f64 * 0.05).sqrt().round() as usize;
            for seed in 0..25u64 {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let (x0, y0) = (rng.random_range(0..=n - side), rng.random_range(0..=n - side));
                let p = flip_modules(&r, |x, y| (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y));
                assert_eq!(post_qr(&p).unwrap(), block.content, "len {len} seed {seed} at ({x0},{y0})");
            }
        }
    }

    #[test]
    fn ecc_h_survives_scattered_flips_within_budget() {
        for len in [30usize, 300] {
            let block = split_text(&vec![b'q'; len], DEFAULT_ETA).unwrap().remove(0);
            let r = prep_qr(&block).unwrap();
            for seed in 0..25u64 {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let p = flip_modules(&r, |_, _| rng.random::<f64>() < 0.01);
                assert_eq!(post_qr(&p).unwrap(), block.content, "len {len} seed {seed}");
            }
        }
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<ManifestBox>> {
        (0usize..=12, any::<u64>()).prop_map(|(n, seed)| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<u32> = (0..n as u32).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            (0..n)
                .map(|i| ManifestBox {
                    x: 300 * i as u32,
                    y: rng.random_range(0..3000),
                    size: [100, 200, 300][rng.random_range(0..3)],
                    ecc: EccLevel::ALL[rng.random_range(0..4)],
                    block_index: idx[i],
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn manifest_build_parse_is_identity(boxes in arb_boxes()) {
            let s = build_position_manifest(&boxes).unwrap();
            let parsed = parse_position_manifest(&s).unwrap();
            prop_assert_eq!(&parsed, &boxes);
            prop_assert_eq!(build_position_manifest(&parsed).unwrap(), s);
        }

        #[test]
        fn split_then_join_restores_text(len in 1usize..6000, eta in 1usize..3000, seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let text: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            match split_text(&text, eta) {
                Ok(blocks) => {
                    let (num, len_b) = block_layout(len, eta);
                    prop_assert_eq!(blocks.len(), num);
                    prop_assert!(blocks[..num - 1].iter().all(|b| b.content.len() == len_b));
                    prop_assert!(blocks.iter().enumerate().all(|(i, b)| b.index == i));
                    prop_assert_eq!(join_blocks(&blocks), text);
                }
                Err(QrError::BlockTooLong(l)) => prop_assert!(l > MAX_BLOCK_LEN),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
