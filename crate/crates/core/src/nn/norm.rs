use super::{join, Layer, Param, ParamVisitor, ParamVisitorMut, Tensor};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: [usize; 4],
}

/// Per-channel batch normalisation with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: Param::buffer(vec![0.0; channels]),
            running_var: Param::buffer(vec![1.0; channels]),
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl Layer for BatchNorm2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.channels());
        let plane = x.h() * x.w();
        let mut y = x.clone();
        for b in 0..x.n() {
            let s = y.sample_mut(b);
            for c in 0..self.channels() {
                let scale = self.gamma.value[c] / (self.running_var.value[c] + EPS).sqrt();
                let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
                s[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.channels());
        let plane = x.h() * x.w();
        let m = (x.n() * plane) as f64;
        let mut y = x.clone();
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; self.channels()];
        for c in 0..self.channels() {
            let mut sum = 0.0f64;
            for b in 0..x.n() {
                sum += x.sample(b)[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for b in 0..x.n() {
                sq += x.sample(b)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / m;
            let istd = 1.0 / (var as f32 + EPS).sqrt();
            inv_std[c] = istd;
            let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
            self.running_mean.value[c] = (1.0 - MOMENTUM) * self.running_mean.value[c] + MOMENTUM * mean as f32;
            self.running_var.value[c] = (1.0 - MOMENTUM) * self.running_var.value[c] + MOMENTUM * unbiased as f32;
            let (g, bt) = (self.gamma.value[c], self.beta.value[c]);
            let sl = x.sample_len();
            for b in 0..x.n() {
                let off = b * sl + c * plane;
                for i in 0..plane {
                    let xh = (x.data[off + i] - mean as f32) * istd;
                    xhat[off + i] = xh;
                    y.data[off + i] = g * xh + bt;
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, shape: x.shape });
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("BatchNorm2d::backward without forward");
        assert_eq!(grad.shape, cache.shape);
        let [n, channels, h, w] = cache.shape;
        let plane = h * w;
        let sl = channels * plane;
        let m = (n * plane) as f32;
        let mut dx = Tensor::zeros(n, channels, h, w);
        for c in 0..channels {
            let mut dgamma = 0.0f64;
            let mut dbeta = 0.0f64;
            for b in 0..n {
                let off = b * sl + c * plane;
                for i in 0..plane {
                    dgamma += (grad.data[off + i] * cache.xhat[off + i]) as f64;
                    dbeta += grad.data[off + i] as f64;
                }
            }
            self.gamma.grad[c] += dgamma as f32;
            self.beta.grad[c] += dbeta as f32;
            let k = self.gamma.value[c] * cache.inv_std[c] / m;
            for b in 0..n {
                let off = b * sl + c * plane;
                for i in 0..plane {
                    dx.data[off + i] =
                        k * (m * grad.data[off + i] - dbeta as f32 - cache.xhat[off + i] * dgamma as f32);
                }
            }
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_layer, random_tensor};
    use super::*;

    #[test]
    fn training_output_is_normalised_per_channel() {
        let mut bn = BatchNorm2d::new(3);
        let x = random_tensor([4, 3, 5, 5], 2);
        let y = bn.forward(&x);
        for c in 0..3 {
            let vals: Vec<f64> =
                (0..4).flat_map(|b| y.sample(b)[c * 25..(c + 1) * 25].to_vec()).map(|v| v as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let x = random_tensor([3, 2, 3, 3], 7);
        assert!(check_layer(&mut bn, &x, 4) < 2e-2);
    }
}
