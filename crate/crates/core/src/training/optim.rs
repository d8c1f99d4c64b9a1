//! Decoupled-weight-decay Adam and the warmup-cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params`; a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId], grads: &BTreeMap<ParamId, Tensor>, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for &id in params {
            let (rows, cols) = store.get(id).shape();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (Tensor::zeros(rows, cols), Tensor::zeros(rows, cols)));
            let g = grads.get(&id);
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Linear warmup from 0 to `peak` then cosine decay to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = ((warmup_ratio * total_steps as f64).ceil() as usize).min(total_steps);
        Self { peak, total_steps, warmup_steps }
    }

    /// Rate at `step`, for `step` in `0..=total_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_shape() {
        let s = LrSchedule::new(1e-3, 1000, 0.03);
        assert_eq!(s.warmup_steps, 30);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(30) - 1e-3).abs() < 1e-18);
        assert!(s.lr(1000) < 1e-18);
        assert!(s.lr(999) < 1e-8);
        let lrs: Vec<f64> = (0..=1000).map(|i| s.lr(i)).collect();
        let argmax = (0..lrs.len()).max_by(|&a, &b| lrs[a].total_cmp(&lrs[b])).unwrap();
        assert_eq!(argmax, 30);
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= 1e-3 / 30.0 + 1e-15, "jump in schedule");
        }
        assert!(lrs[..=30].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[30..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::row_vector(&[1.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        let grads = BTreeMap::from([(id, Tensor::row_vector(&[0.5, -3.0]))]);
        opt.step(&mut store, &[id], &grads, 0.1);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(2.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &[id], &BTreeMap::new(), 0.5);
        assert!((store.get(id).item() - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::from([(ParamId(0), Tensor::row_vector(&[3.0, 4.0]))]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[&ParamId(0)].norm() - 1.0).abs() < 1e-15);
    }
}
