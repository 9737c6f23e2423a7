//! Image-quality metrics shared by training and evaluation.

use thiserror::Error;

use crate::raster::{ChartImage, Plane};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("patch {0}x{1} is smaller than the {2}x{2} window")]
    PatchTooSmall(usize, usize, usize),
}

fn same(a: (usize, usize), b: (usize, usize)) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::ShapeMismatch(a, b));
    }
    Ok(())
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
}

/// Peak signal-to-noise ratio with peak value 1.
pub fn psnr(a: &ChartImage, b: &ChartImage) -> Result<f64, MetricError> {
    same(a.dims(), b.dims())?;
    Ok(psnr_from_mse(mse(&a.data, &b.data)))
}

pub fn psnr_plane(a: &Plane, b: &Plane) -> Result<f64, MetricError> {
    same(a.dims(), b.dims())?;
    Ok(psnr_from_mse(mse(&a.data, &b.data)))
}

/// Summed-area table with a zero row and column in front.
struct Integral {
    w: usize,
    s: Vec<f64>,
}

impl Integral {
    fn new(w: usize, h: usize, f: impl Fn(usize) -> f64) -> Self {
        let mut s = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(y * w + x);
                s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, s }
    }

    /// Sum over `[x0, x1) x [y0, y1)`.
    fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let w = self.w + 1;
        self.s[y1 * w + x1] - self.s[y0 * w + x1] - self.s[y1 * w + x0] + self.s[y0 * w + x0]
    }
}

struct WindowStats {
    /// Per valid window (row-major over top-left corners).
    ssim: Vec<f64>,
    coeff: Option<[Vec<f64>; 3]>,
    ww: usize,
    wh: usize,
}

fn window_stats(x: &Plane, y: &Plane, k: usize, with_grad: bool) -> Result<WindowStats, MetricError> {
    same(x.dims(), y.dims())?;
    let (w, h) = x.dims();
    if w < k || h < k || k == 0 {
        return Err(MetricError::PatchTooSmall(w, h, k));
    }
    let (xd, yd) = (&x.data, &y.data);
    let sx = Integral::new(w, h, |i| xd[i] as f64);
    let sy = Integral::new(w, h, |i| yd[i] as f64);
    let sxx = Integral::new(w, h, |i| (xd[i] as f64).powi(2));
    let syy = Integral::new(w, h, |i| (yd[i] as f64).powi(2));
    let sxy = Integral::new(w, h, |i| xd[i] as f64 * yd[i] as f64);
    let (ww, wh) = (w - k + 1, h - k + 1);
    let n = (k * k) as f64;
    let mut ssim = Vec::with_capacity(ww * wh);
    let mut coeff = with_grad.then(|| [vec![0.0; ww * wh], vec![0.0; ww * wh], vec![0.0; ww * wh]]);
    for wy in 0..wh {
        for wx in 0..ww {
            let (x1, y1) = (wx + k, wy + k);
            let mx = sx.sum(wx, wy, x1, y1) / n;
            let my = sy.sum(wx, wy, x1, y1) / n;
            let vx = sxx.sum(wx, wy, x1, y1) / n - mx * mx;
            let vy = syy.sum(wx, wy, x1, y1) / n - my * my;
            let cxy = sxy.sum(wx, wy, x1, y1) / n - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            ssim.push(s);
            if let Some([a, b, c]) = coeff.as_mut() {
                // dS/dy_p = (a + b x_p + c y_p) / n for every p in the window.
                let i = wy * ww + wx;
                let bb = b1 * b2;
                a[i] = 2.0 * mx * a2 / bb - 2.0 * a1 * mx / bb - 2.0 * s * my / b1 + 2.0 * s * my / b2;
                b[i] = 2.0 * a1 / bb;
                c[i] = -2.0 * s / b2;
            }
        }
    }
    Ok(WindowStats { ssim, coeff, ww, wh })
}

/// Mean SSIM over all `k x k` windows at stride 1 (uniform weights,
/// population statistics).
pub fn ssim_plane_window(x: &Plane, y: &Plane, k: usize) -> Result<f64, MetricError> {
    let st = window_stats(x, y, k, false)?;
    Ok(st.ssim.iter().sum::<f64>() / st.ssim.len() as f64)
}

pub fn ssim_plane(x: &Plane, y: &Plane) -> Result<f64, MetricError> {
    ssim_plane_window(x, y, SSIM_WINDOW)
}

/// Mean SSIM and its gradient with respect to every pixel of `y`.
pub fn ssim_plane_grad(x: &Plane, y: &Plane, k: usize) -> Result<(f64, Vec<f64>), MetricError> {
    let st = window_stats(x, y, k, true)?;
    let (w, h) = x.dims();
    let m = st.ssim.len() as f64;
    let n = (k * k) as f64;
    let [a, b, c] = st.coeff.expect("coefficients requested");
    let (ww, wh) = (st.ww, st.wh);
    let ia = Integral::new(ww, wh, |i| a[i]);
    let ib = Integral::new(ww, wh, |i| b[i]);
    let ic = Integral::new(ww, wh, |i| c[i]);
    let mut grad = vec![0.0; w * h];
    for py in 0..h {
        // Windows whose top-left corner lies in [p-k+1, p] contain p.
        let (y0, y1) = (py.saturating_sub(k - 1), (py + 1).min(wh));
        for px in 0..w {
            let (x0, x1) = (px.saturating_sub(k - 1), (px + 1).min(ww));
            let i = py * w + px;
            grad[i] = (ia.sum(x0, y0, x1, y1) + ib.sum(x0, y0, x1, y1) * x.data[i] as f64
                + ic.sum(x0, y0, x1, y1) * y.data[i] as f64)
                / (m * n);
        }
    }
    Ok((st.ssim.iter().sum::<f64>() / m, grad))
}

/// Channel-mean SSIM of two RGB images.
pub fn ssim(a: &ChartImage, b: &ChartImage) -> Result<f64, MetricError> {
    same(a.dims(), b.dims())?;
    let mut acc = 0.0;
    for c in 0..3 {
        acc += ssim_plane(&a.channel(c), &b.channel(c))?;
    }
    Ok(acc / 3.0)
}

/// Text recovery accuracy: share of positions whose byte was recovered.
pub fn tra(expected: &[u8], recovered: &[u8]) -> f64 {
    if expected.is_empty() {
        return if recovered.is_empty() { 1.0 } else { 0.0 };
    }
    let hits = expected.iter().zip(recovered).filter(|(a, b)| a == b).count();
    hits as f64 / expected.len() as f64
}
