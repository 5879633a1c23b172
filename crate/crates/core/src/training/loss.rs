use serde::{Deserialize, Serialize};

use super::TrainPhase;
use crate::model::{Prediction, Scalar, Tensor};
use crate::scenegen::class;
use crate::Error;

/// Probabilities are clamped to at least this value inside the logarithm.
pub const CE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_seg: f64,
    pub w_depth: f64,
    pub class_weights: [f64; class::COUNT],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w_seg: 1.0, w_depth: 1.0, class_weights: [1.0; class::COUNT] }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let all = [self.w_seg, self.w_depth].into_iter().chain(self.class_weights);
        if all.clone().any(|w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.w_seg == 0.0 && self.w_depth == 0.0 {
            return Err(Error::invalid("w_seg and w_depth cannot both be zero"));
        }
        if self.class_weights.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("class weights cannot all be zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Pixel-averaged (class-weighted) cross-entropy.
    pub ce: f64,
    /// Pixel-averaged squared error in normalized depth; absent when fine-tuning.
    pub mse: Option<f64>,
}

/// Loss value together with its gradients with respect to the segmentation
/// logits and the depth pre-activations (the inputs of softmax and sigmoid).
pub fn loss_and_grads<T: Scalar>(
    pred: &Prediction<T>,
    gt_seg: &[u8],
    gt_depth_norm: Option<&[T]>,
    cfg: &LossConfig,
    phase: TrainPhase,
) -> Result<(LossBreakdown, Tensor<T>, Option<Tensor<T>>), Error> {
    let [n, c, h, w] = pred.seg_probs.shape;
    let hw = h * w;
    let count = n * hw;
    if c != class::COUNT || gt_seg.len() != count {
        return Err(Error::shape(format!(
            "segmentation target of {} labels does not match prediction {:?}",
            gt_seg.len(),
            pred.seg_probs.shape
        )));
    }
    if let Some(&bad) = gt_seg.iter().find(|&&l| l as usize >= class::COUNT) {
        return Err(Error::invalid(format!("class id {bad} out of range")));
    }
    let inv = 1.0 / count as f64;

    let mut ce = 0.0;
    let mut d_seg = Tensor::zeros(pred.seg_probs.shape);
    for i in 0..n {
        let probs = pred.seg_probs.sample(i);
        let grad = d_seg.sample_mut(i);
        for p in 0..hw {
            let y = gt_seg[i * hw + p] as usize;
            let wy = cfg.class_weights[y];
            let py = probs[y * hw + p].as_f64();
            ce -= wy * py.max(CE_EPSILON).ln();
            if py >= CE_EPSILON {
                let scale = cfg.w_seg * wy * inv;
                for k in 0..c {
                    let onehot = if k == y { 1.0 } else { 0.0 };
                    grad[k * hw + p] = T::from_f64(scale * (probs[k * hw + p].as_f64() - onehot));
                }
            }
        }
    }
    ce *= inv;

    let (mse, d_depth) = if phase.uses_depth() {
        let gt = gt_depth_norm.ok_or_else(|| Error::invalid("joint phase needs a depth target"))?;
        if gt.len() != count || pred.depth_norm.shape != [n, 1, h, w] {
            return Err(Error::shape(format!(
                "depth target of {} values does not match prediction {:?}",
                gt.len(),
                pred.depth_norm.shape
            )));
        }
        let mut sq = 0.0;
        let mut d = Tensor::zeros(pred.depth_norm.shape);
        for (j, (&p, &g)) in pred.depth_norm.data.iter().zip(gt).enumerate() {
            let (p, g) = (p.as_f64(), g.as_f64());
            sq += (p - g) * (p - g);
            d.data[j] = T::from_f64(cfg.w_depth * 2.0 * (p - g) * p * (1.0 - p) * inv);
        }
        (Some(sq * inv), Some(d))
    } else {
        (None, None)
    };

    let total = cfg.w_seg * ce + mse.map_or(0.0, |m| cfg.w_depth * m);
    Ok((LossBreakdown { total, ce, mse }, d_seg, d_depth))
}

pub fn loss_total<T: Scalar>(
    pred: &Prediction<T>,
    gt_seg: &[u8],
    gt_depth_norm: Option<&[T]>,
    cfg: &LossConfig,
    phase: TrainPhase,
) -> Result<f64, Error> {
    Ok(loss_and_grads(pred, gt_seg, gt_depth_norm, cfg, phase)?.0.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Network};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(probs: Vec<f64>, depth: Vec<f64>, h: usize, w: usize) -> Prediction<f64> {
        let n = depth.len() / (h * w);
        Prediction {
            seg_probs: Tensor::from_vec(probs, [n, 3, h, w]).unwrap(),
            depth_norm: Tensor::from_vec(depth, [n, 1, h, w]).unwrap(),
        }
    }

    #[test]
    fn uniform_prediction_gives_ln3() {
        let p = pred(vec![1.0 / 3.0; 3], vec![0.5], 1, 1);
        let l = loss_and_grads(&p, &[2], None, &LossConfig::default(), TrainPhase::SegFinetuneReal).unwrap().0;
        assert!((l.ce - 3f64.ln()).abs() < 1e-12);
        assert_eq!(l.total, l.ce);
    }

    #[test]
    fn two_pixel_depth_example() {
        let p = pred(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0], vec![0.2, 0.6], 1, 2);
        let l = loss_and_grads(&p, &[0, 0], Some(&[0.0, 1.0]), &LossConfig::default(), TrainPhase::JointSynthetic)
            .unwrap()
            .0;
        assert!((l.mse.unwrap() - 0.10).abs() < 1e-12);
        assert!((l.total - 0.10).abs() < 1e-12);
    }

    #[test]
    fn exact_prediction_is_nearly_zero() {
        let labels = [0u8, 1, 2, 1];
        let mut probs = vec![0.0; 12];
        for (p, &y) in labels.iter().enumerate() {
            probs[y as usize * 4 + p] = 1.0;
        }
        let depth = vec![0.1, 0.2, 0.3, 0.4];
        let p = pred(probs, depth.clone(), 2, 2);
        let total = loss_total(&p, &labels, Some(&depth), &LossConfig::default(), TrainPhase::JointSynthetic).unwrap();
        assert!(total <= 3e-7);
    }

    #[test]
    fn decomposition_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, h, w) = (2, 3, 4);
        let hw = h * w;
        let mut probs = vec![0.0; n * 3 * hw];
        for i in 0..n {
            for p in 0..hw {
                let raw: [f64; 3] = [rng.random(), rng.random(), rng.random()];
                let s: f64 = raw.iter().sum();
                for k in 0..3 {
                    probs[i * 3 * hw + k * hw + p] = raw[k] / s;
                }
            }
        }
        let depth: Vec<f64> = (0..n * hw).map(|_| rng.random()).collect();
        let gt: Vec<f64> = (0..n * hw).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..n * hw).map(|_| rng.random_range(0..3)).collect();
        let cfg = LossConfig { w_seg: 0.7, w_depth: 1.9, class_weights: [0.5, 3.0, 1.5] };
        let p = pred(probs.clone(), depth.clone(), h, w);
        let l = loss_and_grads(&p, &labels, Some(&gt), &cfg, TrainPhase::JointSynthetic).unwrap().0;

        let mut ce = 0.0;
        let mut mse = 0.0;
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let pix = i * hw + y * w + x;
                    let c = labels[pix] as usize;
                    ce += -cfg.class_weights[c] * probs[i * 3 * hw + c * hw + y * w + x].ln();
                    mse += (depth[pix] - gt[pix]).powi(2);
                }
            }
        }
        ce /= (n * hw) as f64;
        mse /= (n * hw) as f64;
        assert!((l.ce - ce).abs() < 1e-12);
        assert!((l.mse.unwrap() - mse).abs() < 1e-12);
        assert!((l.total - (0.7 * ce + 1.9 * mse)).abs() < 1e-12);
    }

    #[test]
    fn shape_and_phase_errors() {
        let p = pred(vec![1.0 / 3.0; 6], vec![0.5, 0.5], 1, 2);
        let cfg = LossConfig::default();
        assert!(loss_total(&p, &[0], None, &cfg, TrainPhase::SegFinetuneReal).is_err());
        assert!(loss_total(&p, &[0, 0], None, &cfg, TrainPhase::JointSynthetic).is_err());
        assert!(loss_total(&p, &[0, 0], Some(&[0.1]), &cfg, TrainPhase::JointSynthetic).is_err());
        assert!(loss_total(&p, &[0, 5], None, &cfg, TrainPhase::SegFinetuneReal).is_err());
        assert!(LossConfig { w_seg: 0.0, w_depth: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(LossConfig { w_seg: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let cfg = ModelConfig { depth_levels: 2, base_channels: 3, input_size: [8, 8], ..ModelConfig::default() };
        let mut net = Network::<f64>::new(&cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec((0..2 * 3 * 64).map(|_| rng.random::<f64>()).collect(), [2, 3, 8, 8]).unwrap();
        let labels: Vec<u8> = (0..128).map(|_| rng.random_range(0..3)).collect();
        let gt: Vec<f64> = (0..128).map(|_| rng.random()).collect();
        let lc = LossConfig::default();
        let phase = TrainPhase::JointSynthetic;
        let loss_of = |net: &Network<f64>| {
            let (p, _) = net.forward_train(&x, true).unwrap();
            loss_total(&p, &labels, Some(&gt), &lc, phase).unwrap()
        };

        let (p, cache) = net.forward_train(&x, true).unwrap();
        let (_, ds, dd) = loss_and_grads(&p, &labels, Some(&gt), &lc, phase).unwrap();
        net.zero_grad();
        net.backward(&cache, &ds, dd.as_ref());

        // The first few elements of every trainable tensor, so each layer is covered.
        let mut slots = Vec::new();
        let mut t = 0;
        net.visit(&mut |_, name, r| {
            if let Some(p) = r.param {
                for e in 0..p.value.len().min(3) {
                    slots.push((t, e, p.grad[e], name.to_string()));
                }
            }
            t += 1;
        });
        let h = 1e-5;
        for (ti, e, analytic, name) in slots {
            let nudge = |net: &mut Network<f64>, delta: f64| {
                let mut t = 0;
                net.visit(&mut |_, _, mut r| {
                    if t == ti {
                        r.values_mut()[e] += delta;
                    }
                    t += 1;
                });
            };
            let mut plus = net.clone();
            nudge(&mut plus, h);
            let mut minus = net.clone();
            nudge(&mut minus, -h);
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            // Biases ahead of batch norm have a zero gradient; the floor absorbs roundoff there.
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel <= 1e-3, "{name} #{ti}[{e}]: analytic {analytic}, numeric {numeric}");
        }
    }
}
