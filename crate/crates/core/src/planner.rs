//! Region proposal: where each QR block goes in the carrier.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qrcodec::{
    block_layout, map_config, region_size, ManifestBox, QrError, QrTier, MANIFEST_MAX_BOXES,
    MAX_BLOCK_LEN, POSITION_BOX,
};
use crate::raster::Plane;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("kernel {kernel} does not fit a {width}x{height} map")]
    KernelTooLarge { kernel: usize, width: usize, height: usize },
    #[error("stride must be at least 1")]
    BadStride,
    #[error("need {needed} regions, only {placed} fit; at most {max_chars} characters can be embedded at this eta")]
    CapacityExceeded { needed: usize, placed: usize, max_chars: usize },
    #[error(transparent)]
    Qr(#[from] QrError),
    #[error("invalid plan: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub mean_importance: f64,
}

impl RegionBox {
    pub fn new(x: usize, y: usize, size: usize) -> Self {
        Self { x, y, size, mean_importance: 0.0 }
    }

    /// Positive-area overlap; touching edges do not count.
    pub fn intersects(&self, o: &RegionBox) -> bool {
        self.x < o.x + o.size && o.x < self.x + self.size && self.y < o.y + o.size && o.y < self.y + self.size
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x + self.size <= width && self.y + self.size <= height
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentBox {
    pub block_index: usize,
    #[serde(flatten)]
    pub region: RegionBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPlan {
    pub position_box: RegionBox,
    pub content_boxes: Vec<ContentBox>,
    pub eta: usize,
    pub image_dims: (usize, usize),
    pub text_len: usize,
    pub block_len: usize,
    pub tier: QrTier,
    /// Side of every content box. Larger than `tier.resolution` when the
    /// tier's nominal square cannot hold the symbol at one pixel per module.
    pub region_size: usize,
    pub stride: usize,
}

impl EmbeddingPlan {
    pub fn grown(&self) -> bool {
        self.region_size > self.tier.resolution
    }

    pub fn all_boxes(&self) -> impl Iterator<Item = &RegionBox> {
        std::iter::once(&self.position_box).chain(self.content_boxes.iter().map(|c| &c.region))
    }

    /// Boxes inside the image and pairwise disjoint, block indices `0..n`.
    pub fn validate(&self) -> Result<(), PlanError> {
        let (w, h) = self.image_dims;
        let boxes: Vec<&RegionBox> = self.all_boxes().collect();
        for (i, a) in boxes.iter().enumerate() {
            if !a.inside(w, h) {
                return Err(PlanError::Invalid(format!("box {i} leaves the {w}x{h} image")));
            }
            if boxes[i + 1..].iter().any(|b| a.intersects(b)) {
                return Err(PlanError::Invalid(format!("box {i} overlaps another box")));
            }
        }
        if self.content_boxes.iter().enumerate().any(|(i, c)| c.block_index != i) {
            return Err(PlanError::Invalid("block indices are not 0..n".into()));
        }
        Ok(())
    }

    pub fn manifest_boxes(&self) -> Vec<ManifestBox> {
        self.content_boxes
            .iter()
            .map(|c| ManifestBox {
                x: c.region.x as u32,
                y: c.region.y as u32,
                size: c.region.size as u32,
                ecc: self.tier.ecc_level,
                block_index: c.block_index as u32,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

pub fn default_stride(kernel: usize) -> usize {
    (kernel / 4).max(1)
}

fn grid(extent: usize, kernel: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..=extent - kernel).step_by(stride)
}

/// Mean importance of every `kernel`-square window on a `stride` grid, sorted
/// ascending with ties in row-major order.
pub fn pool_region_values(v: &Plane, kernel: usize, stride: usize) -> Result<Vec<RegionBox>, PlanError> {
    let (w, h) = v.dims();
    if kernel == 0 || kernel > w.min(h) {
        return Err(PlanError::KernelTooLarge { kernel, width: w, height: h });
    }
    if stride == 0 {
        return Err(PlanError::BadStride);
    }
    // Summed-area table with a zero border.
    let sw = w + 1;
    let mut sat = vec![0.0f64; sw * (h + 1)];
    for y in 0..h {
        let mut row = 0.0f64;
        for x in 0..w {
            row += v.data[y * w + x] as f64;
            sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row;
        }
    }
    let area = (kernel * kernel) as f64;
    let mut out = Vec::new();
    for y in grid(h, kernel, stride) {
        for x in grid(w, kernel, stride) {
            let (x1, y1) = (x + kernel, y + kernel);
            let s = sat[y1 * sw + x1] - sat[y * sw + x1] - sat[y1 * sw + x] + sat[y * sw + x];
            out.push(RegionBox { x, y, size: kernel, mean_importance: s / area });
        }
    }
    out.sort_by(|a, b| a.mean_importance.total_cmp(&b.mean_importance).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    Ok(out)
}

/// Scan `candidates` in order and keep each one disjoint from `reserved` and
/// from everything kept so far, stopping after `count`.
pub fn greedy_select(candidates: &[RegionBox], reserved: &[RegionBox], count: usize) -> Vec<RegionBox> {
    let mut taken: Vec<RegionBox> = reserved.to_vec();
    let mut picked = Vec::with_capacity(count);
    for c in candidates {
        if picked.len() == count {
            break;
        }
        if taken.iter().all(|t| !t.intersects(c)) {
            taken.push(*c);
            picked.push(*c);
        }
    }
    picked
}

/// Layout of a text of `text_len` bytes split at `eta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub blocks: usize,
    pub block_len: usize,
    pub tier: QrTier,
    pub region_size: usize,
}

pub fn block_geometry(text_len: usize, eta: usize) -> Result<BlockGeometry, PlanError> {
    if text_len == 0 {
        return Err(QrError::EmptyPayload.into());
    }
    let (blocks, block_len) = block_layout(text_len, eta);
    let tier = map_config(block_len)?;
    Ok(BlockGeometry { blocks, block_len, tier, region_size: region_size(block_len, &tier)? })
}

fn position_box() -> RegionBox {
    RegionBox::new(0, 0, POSITION_BOX)
}

/// Boxes of side `size` a row-major greedy scan fits beside the position box.
fn packing_count(dims: (usize, usize), size: usize, limit: usize) -> usize {
    let (w, h) = dims;
    if size > w.min(h) || POSITION_BOX > w.min(h) {
        return 0;
    }
    let stride = default_stride(size);
    let cells: Vec<RegionBox> =
        grid(h, size, stride).flat_map(|y| grid(w, size, stride).map(move |x| RegionBox::new(x, y, size))).collect();
    greedy_select(&cells, &[position_box()], limit).len()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub ok: bool,
    /// Longest text that fits at this eta.
    pub max_chars: usize,
    pub blocks_needed: usize,
    pub blocks_available: usize,
}

/// Longest text that splits into `n` blocks at `eta` without exceeding the
/// longest block, if any.
fn longest_text_with_blocks(n: usize, eta: usize) -> Option<usize> {
    let len = n * eta.min(MAX_BLOCK_LEN);
    (len > (n - 1) * eta && block_layout(len, eta).0 == n).then_some(len)
}

pub fn max_chars(dims: (usize, usize), eta: usize) -> usize {
    (1..=MANIFEST_MAX_BOXES)
        .filter_map(|n| {
            let len = longest_text_with_blocks(n, eta)?;
            let g = block_geometry(len, eta).ok()?;
            (packing_count(dims, g.region_size, n) >= n).then_some(len)
        })
        .max()
        .unwrap_or(0)
}

/// Whether a text of `text_len` bytes at `eta` can be laid out on an image of
/// `dims`, independent of its importance map.
pub fn check_capacity(dims: (usize, usize), text_len: usize, eta: usize) -> CapacityReport {
    let max_chars = max_chars(dims, eta);
    match block_geometry(text_len, eta) {
        Ok(g) => {
            let available = packing_count(dims, g.region_size, MANIFEST_MAX_BOXES.max(g.blocks) + 1);
            CapacityReport {
                ok: g.blocks <= MANIFEST_MAX_BOXES && available >= g.blocks,
                max_chars,
                blocks_needed: g.blocks,
                blocks_available: available.min(MANIFEST_MAX_BOXES),
            }
        }
        Err(_) => CapacityReport {
            ok: false,
            max_chars,
            blocks_needed: block_layout(text_len, eta).0,
            blocks_available: 0,
        },
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Candidate grid step; `None` uses a quarter of the box side.
    pub stride: Option<usize>,
}

pub fn propose_regions(v: &Plane, text_len: usize, eta: usize) -> Result<EmbeddingPlan, PlanError> {
    propose_regions_with(v, text_len, eta, &PlanOptions::default())
}

pub fn propose_regions_with(
    v: &Plane,
    text_len: usize,
    eta: usize,
    opts: &PlanOptions,
) -> Result<EmbeddingPlan, PlanError> {
    let g = block_geometry(text_len, eta)?;
    let dims = v.dims();
    let exceeded = |placed| PlanError::CapacityExceeded { needed: g.blocks, placed, max_chars: max_chars(dims, eta) };
    if g.blocks > MANIFEST_MAX_BOXES || POSITION_BOX > dims.0.min(dims.1) || g.region_size > dims.0.min(dims.1) {
        return Err(exceeded(0));
    }
    let stride = opts.stride.unwrap_or_else(|| default_stride(g.region_size));
    let candidates = pool_region_values(v, g.region_size, stride)?;
    let mut pos = position_box();
    pos.mean_importance = v.crop(0, 0, POSITION_BOX, POSITION_BOX).mean();
    let picked = greedy_select(&candidates, &[pos], g.blocks);
    if picked.len() < g.blocks {
        return Err(exceeded(picked.len()));
    }
    let plan = EmbeddingPlan {
        position_box: pos,
        content_boxes: picked.into_iter().enumerate().map(|(block_index, region)| ContentBox { block_index, region }).collect(),
        eta,
        image_dims: dims,
        text_len,
        block_len: g.block_len,
        tier: g.tier,
        region_size: g.region_size,
        stride,
    };
    plan.validate()?;
    Ok(plan)
}
