use super::OptimizerConfig;
use crate::model::{Network, ParamGroup, Scalar};

/// ADAM with bias correction. Moment buffers are keyed by the network's
/// fixed parameter visiting order.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates the trainable parameters of `groups` from their accumulated
    /// gradients. Other groups are not touched.
    pub fn step<T: Scalar>(&mut self, net: &mut Network<T>, groups: &[ParamGroup]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let moments = &mut self.moments;
        let mut slot = 0;
        net.visit(&mut |g, _, r| {
            let Some(p) = r.param else { return };
            if moments.len() <= slot {
                moments.push((vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            }
            let (m, v) = &mut moments[slot];
            slot += 1;
            if !groups.contains(&g) {
                return;
            }
            for (i, (w, grad)) in p.value.iter_mut().zip(&p.grad).enumerate() {
                let gi = grad.as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *w = T::from_f64(w.as_f64() - update);
            }
        });
    }
}
