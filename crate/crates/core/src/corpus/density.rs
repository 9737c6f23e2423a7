//! Gaussian kernel density estimation on a regular grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("no points to estimate a density from")]
    EmptyPointSet,
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
    #[error("grid must be at least 1x1 with a non-empty extent")]
    BadGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Silverman's rule per axis: `sigma * n^(-1/6)` in two dimensions.
    Auto,
    Fixed(f64),
}

/// Density samples at cell centres. Row 0 is the bottom row (`y = extent[2]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub width: usize,
    pub height: usize,
    /// `[x_min, x_max, y_min, y_max]`.
    pub extent: [f64; 4],
    /// Bandwidth used along x and y.
    pub bandwidth: (f64, f64),
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_area(&self) -> f64 {
        (self.extent[1] - self.extent[0]) / self.width as f64 * (self.extent[3] - self.extent[2]) / self.height as f64
    }

    /// Integral of the estimate over the grid (Riemann sum).
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area()
    }

    pub fn cell_center(&self, gx: usize, gy: usize) -> (f64, f64) {
        let x = self.extent[0] + (gx as f64 + 0.5) * (self.extent[1] - self.extent[0]) / self.width as f64;
        let y = self.extent[2] + (gy as f64 + 0.5) * (self.extent[3] - self.extent[2]) / self.height as f64;
        (x, y)
    }
}

fn std_dev(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Silverman bandwidths for 2-D points. A degenerate axis falls back to 5% of
/// the other axis' spread, or 1.0 when every point coincides.
pub fn silverman(points: &[(f64, f64)]) -> (f64, f64) {
    let factor = (points.len() as f64).powf(-1.0 / 6.0);
    let (sx, sy) = (std_dev(points.iter().map(|p| p.0)), std_dev(points.iter().map(|p| p.1)));
    let fallback = if sx.max(sy) > 0.0 { 0.05 * sx.max(sy) } else { 1.0 };
    let pick = |s: f64| if s > 0.0 { s * factor } else { fallback };
    (pick(sx), pick(sy))
}

/// Product-Gaussian KDE evaluated at the centres of a `grid.0 x grid.1` lattice
/// spanning `extent`.
pub fn kde_density(
    points: &[(f64, f64)],
    bandwidth: Bandwidth,
    grid: (usize, usize),
    extent: [f64; 4],
) -> Result<DensityGrid, DensityError> {
    if points.is_empty() {
        return Err(DensityError::EmptyPointSet);
    }
    let (w, h) = grid;
    if w == 0 || h == 0 || !(extent[1] > extent[0]) || !(extent[3] > extent[2]) {
        return Err(DensityError::BadGrid);
    }
    let (hx, hy) = match bandwidth {
        Bandwidth::Auto => silverman(points),
        Bandwidth::Fixed(b) if b > 0.0 && b.is_finite() => (b, b),
        Bandwidth::Fixed(b) => return Err(DensityError::BadBandwidth(b)),
    };
    let mut out = DensityGrid { width: w, height: h, extent, bandwidth: (hx, hy), values: vec![0.0; w * h] };
    let xs: Vec<f64> = (0..w).map(|i| out.cell_center(i, 0).0).collect();
    let ys: Vec<f64> = (0..h).map(|j| out.cell_center(0, j).1).collect();
    let norm = 1.0 / (std::f64::consts::TAU * hx * hy * points.len() as f64);
    let mut kx = vec![0.0; w];
    for &(px, py) in points {
        for (k, &x) in kx.iter_mut().zip(&xs) {
            let u = (x - px) / hx;
            *k = (-0.5 * u * u).exp();
        }
        for (j, &y) in ys.iter().enumerate() {
            let v = (y - py) / hy;
            let ky = (-0.5 * v * v).exp() * norm;
            if ky == 0.0 {
                continue;
            }
            for (o, &k) in out.values[j * w..(j + 1) * w].iter_mut().zip(&kx) {
                *o += ky * k;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_peaks_at_nearest_cell() {
        let g = kde_density(&[(0.33, 0.71)], Bandwidth::Fixed(0.05), (20, 10), [0.0, 1.0, 0.0, 1.0]).unwrap();
        let best = (0..g.values.len()).max_by(|&a, &b| g.values[a].total_cmp(&g.values[b])).unwrap();
        assert_eq!((best % 20, best / 20), (6, 7));
        assert_eq!(g.values.iter().filter(|&&v| v == g.values[best]).count(), 1);
    }

    #[test]
    fn symmetric_points_give_a_mirrored_grid() {
        let g = kde_density(&[(-1.0, 0.3), (1.0, 0.3)], Bandwidth::Fixed(0.4), (30, 12), [-2.0, 2.0, -1.0, 1.5]).unwrap();
        for y in 0..12 {
            for x in 0..30 {
                let (a, b) = (g.values[y * 30 + x], g.values[y * 30 + 29 - x]);
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matches_direct_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<(f64, f64)> = (0..100).map(|_| (rng.random(), rng.random())).collect();
        let ext = [-0.5, 1.5, -0.5, 1.5];
        let g = kde_density(&pts, Bandwidth::Fixed(0.1), (40, 30), ext).unwrap();
        let h = 0.1f64;
        for gy in 0..30 {
            for gx in 0..40 {
                let x = ext[0] + (gx as f64 + 0.5) * 2.0 / 40.0;
                let y = ext[2] + (gy as f64 + 0.5) * 2.0 / 30.0;
                let mut d = 0.0;
                for &(px, py) in &pts {
                    d += (-((x - px).powi(2) + (y - py).powi(2)) / (2.0 * h * h)).exp();
                }
                d /= 100.0 * 2.0 * std::f64::consts::PI * h * h;
                assert!((g.values[gy * 40 + gx] - d).abs() <= 1e-9, "cell ({gx},{gy})");
            }
        }
        assert!((g.mass() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn errors() {
        assert_eq!(kde_density(&[], Bandwidth::Auto, (4, 4), [0.0, 1.0, 0.0, 1.0]), Err(DensityError::EmptyPointSet));
        assert!(kde_density(&[(0.0, 0.0)], Bandwidth::Fixed(0.0), (4, 4), [0.0, 1.0, 0.0, 1.0]).is_err());
        assert!(kde_density(&[(0.0, 0.0)], Bandwidth::Auto, (0, 4), [0.0, 1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn silverman_matches_rule() {
        let pts = [(0.0, 0.0), (2.0, 4.0), (4.0, 8.0)];
        let (hx, hy) = silverman(&pts);
        let f = 3f64.powf(-1.0 / 6.0);
        assert!((hx - 2.0 * f).abs() < 1e-12 && (hy - 4.0 * f).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn mass_is_one_when_the_extent_covers_the_kernels(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
            let g = kde_density(&pts, Bandwidth::Fixed(0.08), (120, 120), [-0.6, 1.6, -0.6, 1.6]).unwrap();
            prop_assert!((g.mass() - 1.0).abs() < 1e-3, "mass {}", g.mass());
        }
    }
}
