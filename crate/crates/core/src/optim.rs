//! AdamW with a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};
use sslbench_autograd::Tensor;

use crate::params::ParameterSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to `floor` at `total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    m: ParameterSet,
    v: ParameterSet,
    pub step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, m: ParameterSet::new(), v: ParameterSet::new(), step: 0 }
    }

    /// One update at learning rate `lr`. Matrices (rank ≥ 2) are decayed;
    /// biases, norms and embeddings are not.
    pub fn update(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).expect("moment").data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("moment").data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
            }
            let decay = if p.shape().len() >= 2 { self.cfg.weight_decay } else { 0.0 };
            let m = self.m.get(name).expect("moment").data();
            let v = self.v.get(name).expect("moment").data();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let update = (mi / c1) / ((vi / c2).sqrt() + self.cfg.eps);
                *pi -= lr * (update + decay * *pi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule { peak: 1.0, floor: 0.0, warmup: 10, total: 110 };
        assert!((s.lr(0) - 0.1).abs() < 1e-15);
        assert_eq!(s.lr(9), 1.0);
        assert_eq!(s.lr(10), 1.0);
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert!(s.lr(110).abs() < 1e-12);
        assert!(s.lr(500).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParameterSet::new();
        p.insert("b", Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]));
        let mut g = ParameterSet::new();
        g.insert("b", Tensor::from_vec(&[3], vec![2.0, -0.5, 0.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.update(&mut p, &g, 0.01);
        let d = p.get("b").unwrap().data();
        assert!((d[0] - 0.99).abs() < 1e-9);
        assert!((d[1] - 1.01).abs() < 1e-9);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let before = p.clone();
        let mut g = ParameterSet::new();
        g.insert("w", Tensor::from_vec(&[2, 2], vec![1.0; 4]));
        AdamW::new(AdamWConfig::default()).update(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }
}
