use super::{Layer, Tensor};

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    fn run(x: &Tensor) -> (Tensor, Vec<usize>) {
        let (oh, ow) = (x.h() / 2, x.w() / 2);
        let mut y = Tensor::zeros(x.n(), x.c(), oh, ow);
        let mut arg = vec![0usize; y.data.len()];
        let mut k = 0;
        for b in 0..x.n() {
            for c in 0..x.c() {
                let base = (b * x.c() + c) * x.h() * x.w();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut bi = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = base + (2 * oy + dy) * x.w() + 2 * ox + dx;
                            if x.data[i] > best {
                                best = x.data[i];
                                bi = i;
                            }
                        }
                        y.data[k] = best;
                        arg[k] = bi;
                        k += 1;
                    }
                }
            }
        }
        (y, arg)
    }
}

impl Layer for MaxPool2 {
    fn infer(&self, x: &Tensor) -> Tensor {
        Self::run(x).0
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (y, arg) = Self::run(x);
        self.argmax = Some((arg, x.shape));
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (arg, shape) = self.argmax.take().expect("MaxPool2::backward without forward");
        let mut dx = Tensor::zeros(shape[0], shape[1], shape[2], shape[3]);
        for (g, &i) in grad.data.iter().zip(&arg) {
            dx.data[i] += g;
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
#[derive(Clone, Debug, Default)]
pub struct UpsampleNearest2 {
    shape: Option<[usize; 4]>,
}

impl UpsampleNearest2 {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for UpsampleNearest2 {
    fn infer(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.h(), x.w());
        let mut y = Tensor::zeros(x.n(), x.c(), 2 * h, 2 * w);
        for p in 0..x.n() * x.c() {
            let src = &x.data[p * h * w..(p + 1) * h * w];
            let dst = &mut y.data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
        y
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.shape = Some(x.shape);
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.shape.take().expect("UpsampleNearest2::backward without forward");
        let (h, w) = (shape[2], shape[3]);
        let mut dx = Tensor::zeros(shape[0], shape[1], h, w);
        for p in 0..shape[0] * shape[1] {
            let src = &grad.data[p * 4 * h * w..(p + 1) * 4 * h * w];
            let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                }
            }
        }
        dx
    }
}
