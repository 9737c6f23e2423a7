use rand::Rng;

use super::gemm::sgemm_ld;
use super::{join, Layer, Param, ParamVisitor, ParamVisitorMut, Tensor};

/// Upper bound on the im2col scratch buffer, in floats. Large images are
/// processed in bands of output rows so memory stays bounded.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Self { channels, h, w, k, stride, pad, oh, ow }
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn band(&self) -> usize {
        (COLS_BUDGET / (self.rows() * self.ow).max(1)).clamp(1, self.oh)
    }

    /// Fill `cols` (`rows() x (r1-r0)*ow`) from output rows `r0..r1`.
    fn im2col(&self, x: &[f32], r0: usize, r1: usize, cols: &mut [f32]) {
        let width = (r1 - r0) * self.ow;
        for c in 0..self.channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for oy in r0..r1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let base = (oy - r0) * self.ow;
                        if iy < 0 || iy >= self.h as isize {
                            dst[base..base + self.ow].iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[base + ox] = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `cols` for output rows `r0..r1` back onto the input grid.
    fn col2im(&self, cols: &[f32], r0: usize, r1: usize, x: &mut [f32]) {
        let width = (r1 - r0) * self.ow;
        for c in 0..self.channels {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * width..(row + 1) * width];
                    for oy in r0..r1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (oy - r0) * self.ow;
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::he_uniform(out_channels * fan_in, fan_in, rng),
            bias: Param::new(vec![0.0; out_channels]),
            cache: None,
        }
    }

    /// "Same" convolution for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2, rng)
    }

    fn geometry(&self, x: &Tensor) -> Geometry {
        assert_eq!(x.c(), self.in_channels, "conv input channels");
        Geometry::new(self.in_channels, x.h(), x.w(), self.kernel, self.stride, self.pad)
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let g = self.geometry(x);
        let mut y = Tensor::zeros(x.n(), self.out_channels, g.oh, g.ow);
        let plane = g.oh * g.ow;
        let band = g.band();
        let mut cols = vec![0.0f32; g.rows() * band * g.ow];
        for b in 0..x.n() {
            let xs = x.sample(b);
            let ys = y.sample_mut(b);
            let mut r0 = 0;
            while r0 < g.oh {
                let r1 = (r0 + band).min(g.oh);
                let width = (r1 - r0) * g.ow;
                g.im2col(xs, r0, r1, &mut cols);
                sgemm_ld(
                    self.out_channels,
                    g.rows(),
                    width,
                    &self.weight.value,
                    g.rows(),
                    false,
                    &cols,
                    width,
                    false,
                    0.0,
                    &mut ys[r0 * g.ow..],
                    plane,
                );
                r0 = r1;
            }
            for (o, &bias) in self.bias.value.iter().enumerate() {
                ys[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bias);
            }
        }
        y
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.clone());
        self.run(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("Conv2d::backward without forward");
        let g = self.geometry(&x);
        assert_eq!(grad.shape, [x.n(), self.out_channels, g.oh, g.ow]);
        let plane = g.oh * g.ow;
        let band = g.band();
        let mut cols = vec![0.0f32; g.rows() * band * g.ow];
        let mut dcols = vec![0.0f32; g.rows() * band * g.ow];
        let mut dx = Tensor::zeros(x.n(), x.c(), x.h(), x.w());
        for b in 0..x.n() {
            let gs = grad.sample(b);
            for (o, db) in self.bias.grad.iter_mut().enumerate() {
                *db += gs[o * plane..(o + 1) * plane].iter().sum::<f32>();
            }
            let mut r0 = 0;
            while r0 < g.oh {
                let r1 = (r0 + band).min(g.oh);
                let width = (r1 - r0) * g.ow;
                g.im2col(x.sample(b), r0, r1, &mut cols);
                // dW += dY[:, band] * cols^T
                sgemm_ld(
                    self.out_channels,
                    width,
                    g.rows(),
                    &gs[r0 * g.ow..],
                    plane,
                    false,
                    &cols,
                    width,
                    true,
                    1.0,
                    &mut self.weight.grad,
                    g.rows(),
                );
                // dcols = W^T * dY[:, band]
                sgemm_ld(
                    g.rows(),
                    self.out_channels,
                    width,
                    &self.weight.value,
                    g.rows(),
                    true,
                    &gs[r0 * g.ow..],
                    plane,
                    false,
                    0.0,
                    &mut dcols,
                    width,
                );
                g.col2im(&dcols, r0, r1, dx.sample_mut(b));
                r0 = r1;
            }
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed ("fractionally strided") convolution; the adjoint of [`Conv2d`]
/// with the same kernel/stride/padding.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Stored as `[in_channels, out_channels * k * k]`.
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel / (stride * stride).max(1);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::he_uniform(in_channels * out_channels * kernel * kernel, fan_in.max(1), rng),
            bias: Param::new(vec![0.0; out_channels]),
            cache: None,
        }
    }

    fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h - 1) * self.stride + self.kernel - 2 * self.pad;
        let ow = (w - 1) * self.stride + self.kernel - 2 * self.pad;
        (oh, ow)
    }

    /// Geometry of the adjoint convolution mapping the output grid onto the input grid.
    fn geometry(&self, x: &Tensor) -> Geometry {
        assert_eq!(x.c(), self.in_channels, "transposed conv input channels");
        let (oh, ow) = self.output_dims(x.h(), x.w());
        let g = Geometry::new(self.out_channels, oh, ow, self.kernel, self.stride, self.pad);
        assert_eq!((g.oh, g.ow), (x.h(), x.w()));
        g
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let g = self.geometry(x);
        let plane_in = x.h() * x.w();
        let mut y = Tensor::zeros(x.n(), self.out_channels, g.h, g.w);
        let band = g.band();
        let mut cols = vec![0.0f32; g.rows() * band * g.ow];
        for b in 0..x.n() {
            let xs = x.sample(b);
            let ys = y.sample_mut(b);
            let mut r0 = 0;
            while r0 < g.oh {
                let r1 = (r0 + band).min(g.oh);
                let width = (r1 - r0) * g.ow;
                // cols = W^T * x[:, band]
                sgemm_ld(
                    g.rows(),
                    self.in_channels,
                    width,
                    &self.weight.value,
                    g.rows(),
                    true,
                    &xs[r0 * g.ow..],
                    plane_in,
                    false,
                    0.0,
                    &mut cols,
                    width,
                );
                g.col2im(&cols, r0, r1, ys);
                r0 = r1;
            }
            let plane = g.h * g.w;
            for (o, &bias) in self.bias.value.iter().enumerate() {
                ys[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bias);
            }
        }
        y
    }
}

impl Layer for ConvTranspose2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.clone());
        self.run(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("ConvTranspose2d::backward without forward");
        let g = self.geometry(&x);
        assert_eq!(grad.shape, [x.n(), self.out_channels, g.h, g.w]);
        let plane_in = x.h() * x.w();
        let plane_out = g.h * g.w;
        let band = g.band();
        let mut dcols = vec![0.0f32; g.rows() * band * g.ow];
        let mut dx = Tensor::zeros(x.n(), x.c(), x.h(), x.w());
        for b in 0..x.n() {
            let gs = grad.sample(b);
            for (o, db) in self.bias.grad.iter_mut().enumerate() {
                *db += gs[o * plane_out..(o + 1) * plane_out].iter().sum::<f32>();
            }
            let xs = x.sample(b);
            let dxs = dx.sample_mut(b);
            let mut r0 = 0;
            while r0 < g.oh {
                let r1 = (r0 + band).min(g.oh);
                let width = (r1 - r0) * g.ow;
                g.im2col(gs, r0, r1, &mut dcols);
                // dx[:, band] = W * dcols
                sgemm_ld(
                    self.in_channels,
                    g.rows(),
                    width,
                    &self.weight.value,
                    g.rows(),
                    false,
                    &dcols,
                    width,
                    false,
                    0.0,
                    &mut dxs[r0 * g.ow..],
                    plane_in,
                );
                // dW += x[:, band] * dcols^T
                sgemm_ld(
                    self.in_channels,
                    width,
                    g.rows(),
                    &xs[r0 * g.ow..],
                    plane_in,
                    false,
                    &dcols,
                    width,
                    true,
                    1.0,
                    &mut self.weight.grad,
                    g.rows(),
                );
                r0 = r1;
            }
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_layer, random_tensor};
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(c: &Conv2d, x: &Tensor) -> Tensor {
        let g = c.geometry(x);
        let mut y = Tensor::zeros(x.n(), c.out_channels, g.oh, g.ow);
        for b in 0..x.n() {
            for o in 0..c.out_channels {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = c.bias.value[o] as f64;
                        for i in 0..c.in_channels {
                            for ky in 0..c.kernel {
                                for kx in 0..c.kernel {
                                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                                        continue;
                                    }
                                    let wv = c.weight.value[((o * c.in_channels + i) * c.kernel + ky) * c.kernel + kx];
                                    let xv = x.sample(b)[(i * x.h() + iy as usize) * x.w() + ix as usize];
                                    s += wv as f64 * xv as f64;
                                }
                            }
                        }
                        y.sample_mut(b)[(o * g.oh + oy) * g.ow + ox] = s as f32;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = rng();
        for (k, s, p) in [(3, 1, 1), (4, 2, 1), (1, 1, 0), (3, 2, 0)] {
            let conv = Conv2d::new(3, 4, k, s, p, &mut r);
            let x = random_tensor([2, 3, 9, 8], 5);
            let got = conv.infer(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(got.shape, want.shape);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-4, "k={k} s={s} p={p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng();
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, &mut r);
        let x = random_tensor([2, 2, 5, 4], 3);
        assert!(check_layer(&mut conv, &x, 1) < 2e-2);
        let mut strided = Conv2d::new(2, 2, 4, 2, 1, &mut r);
        let x = random_tensor([1, 2, 6, 6], 4);
        assert!(check_layer(&mut strided, &x, 2) < 2e-2);
    }

    #[test]
    fn transposed_conv_doubles_resolution_and_is_adjoint() {
        let mut r = rng();
        let up = ConvTranspose2d::new(3, 2, 4, 2, 1, &mut r);
        let x = random_tensor([1, 3, 5, 6], 8);
        let y = up.infer(&x);
        assert_eq!(y.shape, [1, 2, 10, 12]);

        // <T x, z> == <x, conv(z)> with shared weights and zero bias.
        let mut conv = Conv2d::new(2, 3, 4, 2, 1, &mut r);
        let mut up = up.clone();
        up.bias.value.iter_mut().for_each(|b| *b = 0.0);
        conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
        // Conv weight [out=3, in=2*k*k] equals transposed weight [in=3, out=2*k*k].
        conv.weight.value = up.weight.value.clone();
        let z = random_tensor([1, 2, 10, 12], 9);
        let lhs: f64 = up.infer(&x).data.iter().zip(&z.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = conv.infer(&z).data.iter().zip(&x.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut r = rng();
        let mut up = ConvTranspose2d::new(2, 2, 4, 2, 1, &mut r);
        let x = random_tensor([2, 2, 3, 3], 6);
        assert!(check_layer(&mut up, &x, 3) < 2e-2);
    }

    #[test]
    fn banding_does_not_change_results() {
        let mut r = rng();
        let conv = Conv2d::same(64, 8, 3, &mut r);
        // 64*9 rows * 128 cols * 64 rows of output exceeds nothing; force a
        // tall input so several bands are used.
        let x = random_tensor([1, 64, 300, 130], 12);
        let g = conv.geometry(&x);
        assert!(g.band() < g.oh);
        let y = conv.infer(&x);
        let row = 299;
        let mut s = conv.bias.value[0] as f64;
        for i in 0..64 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = row as isize + ky as isize - 1;
                    let ix = 5 + kx as isize - 1;
                    if iy < 0 || iy >= 300 {
                        continue;
                    }
                    s += conv.weight.value[(i * 3 + ky) * 3 + kx] as f64
                        * x.data[(i * 300 + iy as usize) * 130 + ix as usize] as f64;
                }
            }
        }
        assert!((y.data[row * 130 + 5] as f64 - s).abs() < 1e-3);
    }
}
