use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per path.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Array2<f64>>,
    second: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, ..Self::default() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update; paths missing from `grads` are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (path, g) in grads {
            let Some(p) = params.get_mut(path) else { continue };
            let m = self.first.entry(path.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.second.entry(path.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn grad_norm(grads: &Gradients) -> f64 {
    grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert("w", array![[1.0, -2.0, 0.5]]).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = store();
        let before = ps.clone();
        let mut opt = Adam::new(AdamConfig::default());
        let mut g = Gradients::new();
        g.insert("w".into(), Array2::zeros((1, 3)));
        for _ in 0..10 {
            opt.update(&mut ps, &g);
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn constant_gradient_moves_by_lr_times_sign() {
        let mut ps = store();
        let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg);
        let mut g = Gradients::new();
        g.insert("w".into(), array![[0.3, -4.0, 2e-3]]);
        for _ in 0..200 {
            let before = ps.get("w").unwrap().clone();
            opt.update(&mut ps, &g);
            let delta = ps.get("w").unwrap() - &before;
            // Bias-corrected moments of a constant gradient are exact, so
            // each step is lr * g / (|g| + eps).
            for (d, gi) in delta.iter().zip(g["w"].iter()) {
                let expect = -cfg.lr * gi / (gi.abs() + cfg.eps);
                assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");
            }
        }
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut ps = store();
        let mut opt = Adam::new(AdamConfig::default());
        let g = Gradients::new();
        assert_eq!(opt.step_count(), 0);
        opt.update(&mut ps, &g);
        assert_eq!(opt.step_count(), 1);
        opt.update(&mut ps, &g);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Gradients::new();
        g.insert("a".into(), array![[3.0, 4.0]]);
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }
}
