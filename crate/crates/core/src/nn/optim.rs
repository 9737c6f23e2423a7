use super::Parameterized;

/// Adam with bias correction. State is indexed by parameter visit order, which
/// is fixed for a given network.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, model: &mut dyn Parameterized) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |_, p| {
            if !p.trainable {
                return;
            }
            if ms.len() <= idx {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
                p.grad[i] = 0.0;
            }
            idx += 1;
        });
    }
}
