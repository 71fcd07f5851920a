//! AdamW with decoupled weight decay and a warm-up cosine schedule.

use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: first/second moments per parameter name plus a step
/// counter for bias correction. Serialized into checkpoints for resume.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
    pub step_count: u64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { moments: BTreeMap::new(), step_count: 0, weight_decay }
    }

    /// One update over the parameters present in `grads`. Decoupled weight
    /// decay applies to convolution weights only — not biases or norm
    /// scales, and not the classification head: under partial-label
    /// training, head rows of never-annotated classes receive no gradient
    /// and must not drift.
    #[allow(clippy::needless_range_loop)] // four slices advance in lockstep
    pub fn step(
        &mut self,
        params: &mut Vec<(String, &mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let decay = if name.ends_with(".weight") && !name.starts_with("head.") {
                self.weight_decay
            } else {
                0.0
            };
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + decay * pd[i]);
            }
        }
    }
}

/// Warm-up cosine schedule over epochs: linear ramp to `base` during
/// `warmup` epochs, then cosine decay to zero at `total`.
pub fn cosine_lr(base: f64, epoch: usize, warmup: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    if epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (epoch - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let base = 0.5;
        assert!((cosine_lr(base, 0, 10, 100) - 0.05).abs() < 1e-12);
        assert!((cosine_lr(base, 9, 10, 100) - 0.5).abs() < 1e-12);
        assert!((cosine_lr(base, 10, 10, 100) - 0.5).abs() < 1e-12);
        let mid = cosine_lr(base, 55, 10, 100);
        assert!((mid - 0.25).abs() < 1e-12);
        assert!(cosine_lr(base, 99, 10, 100) < 0.01);
    }

    #[test]
    fn adamw_moves_toward_minimum() {
        // minimize (p - 3)^2 with analytic gradient 2(p - 3)
        let mut p = Tensor::scalar(0.0);
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0));
            let mut grads = BTreeMap::new();
            grads.insert("x.weight".to_string(), g);
            let mut params: Vec<(String, &mut Tensor)> = vec![("x.weight".into(), &mut p)];
            opt.step(&mut params, &grads, 0.05);
        }
        assert!((p.item() - 3.0).abs() < 1e-3, "{}", p.item());
    }

    #[test]
    fn decay_applies_only_to_weights() {
        let mut w = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let mut opt = AdamW::new(0.5);
        let mut grads = BTreeMap::new();
        grads.insert("x.weight".to_string(), Tensor::scalar(0.0));
        grads.insert("x.bias".to_string(), Tensor::scalar(0.0));
        let mut params: Vec<(String, &mut Tensor)> =
            vec![("x.weight".into(), &mut w), ("x.bias".into(), &mut b)];
        opt.step(&mut params, &grads, 0.1);
        assert!(w.item() < 1.0);
        assert_eq!(b.item(), 1.0);
    }

    #[test]
    fn untouched_params_keep_no_state() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = AdamW::new(0.0);
        let grads = BTreeMap::new();
        let mut params: Vec<(String, &mut Tensor)> = vec![("x.weight".into(), &mut w)];
        opt.step(&mut params, &grads, 0.1);
        assert_eq!(w.item(), 1.0);
        assert!(opt.moments.is_empty());
    }
}
