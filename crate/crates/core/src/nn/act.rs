use super::{Layer, Tensor};

macro_rules! elementwise {
    ($name:ident, $doc:literal, |$x:ident| $f:expr, |$y:ident, $xin:ident| $df:expr) => {
        #[doc = $doc]
        #[derive(Clone, Debug, Default)]
        pub struct $name {
            input: Option<Tensor>,
            output: Option<Tensor>,
        }

        impl $name {
            pub fn new() -> Self {
                Self::default()
            }

            #[inline]
            fn apply($x: f32) -> f32 {
                $f
            }
        }

        impl Layer for $name {
            fn infer(&self, x: &Tensor) -> Tensor {
                Tensor::from_vec(x.shape, x.data.iter().map(|&v| Self::apply(v)).collect())
            }

            fn forward(&mut self, x: &Tensor) -> Tensor {
                let y = self.infer(x);
                self.input = Some(x.clone());
                self.output = Some(y.clone());
                y
            }

            fn backward(&mut self, grad: &Tensor) -> Tensor {
                let y = self.output.take().expect("activation backward without forward");
                let x = self.input.take().expect("activation backward without forward");
                assert_eq!(grad.shape, y.shape);
                let data = grad
                    .data
                    .iter()
                    .zip(y.data.iter().zip(&x.data))
                    .map(|(&g, (&$y, &$xin))| {
                        let _ = $xin;
                        let _ = $y;
                        g * ($df)
                    })
                    .collect();
                Tensor::from_vec(grad.shape, data)
            }
        }
    };
}

elementwise!(Relu, "Rectified linear unit.", |x| x.max(0.0), |_y, x| if x > 0.0 { 1.0 } else { 0.0 });
elementwise!(Sigmoid, "Logistic sigmoid.", |x| 1.0 / (1.0 + (-x).exp()), |y, _x| y * (1.0 - y));
elementwise!(Tanh, "Hyperbolic tangent.", |x| x.tanh(), |y, _x| 1.0 - y * y);

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_layer, random_tensor};
    use super::*;

    #[test]
    fn activations_have_correct_gradients() {
        let x = random_tensor([1, 2, 3, 3], 9);
        assert!(check_layer(&mut Sigmoid::new(), &x, 1) < 1e-2);
        assert!(check_layer(&mut Tanh::new(), &x, 2) < 1e-2);
        // Keep inputs away from the kink for ReLU.
        let mut xr = x.clone();
        xr.data.iter_mut().for_each(|v| {
            if v.abs() < 0.05 {
                *v += 0.1
            }
        });
        assert!(check_layer(&mut Relu::new(), &xr, 3) < 1e-2);
    }

    #[test]
    fn sigmoid_saturates_into_unit_interval() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-100.0, 0.0, 100.0]);
        let y = Sigmoid::new().infer(&x);
        assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(y.data[1], 0.5);
    }
}
