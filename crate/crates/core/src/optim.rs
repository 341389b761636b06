//! Adaptive-moment optimization with per-layer step sizes, cosine warm
//! restarts and per-layer gradient clipping.

use crate::autodiff::ParamVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: each step multiplies parameters by `1 − lr·weight_decay`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }
}

/// First and second moment state for one parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// Advances the moments with `grad` and returns the parameter change for
    /// `params`, with layer `l` moving at rate `lrs[l]`.
    pub fn update(&mut self, params: &ParamVector, grad: &ParamVector, lrs: &[f64]) -> Result<ParamVector> {
        let layout = params.layout();
        if grad.layout() != layout || params.len() != self.m.len() {
            return Err(Error::shape("adam", "gradient, parameters and state disagree"));
        }
        if lrs.len() != layout.num_layers() {
            return Err(Error::shape(
                "adam",
                format!("{} rates for {} layers", lrs.len(), layout.num_layers()),
            ));
        }
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let mut delta = ParamVector::zeros(layout.clone());
        for (l, &lr) in lrs.iter().enumerate() {
            for i in layout.layer_range(l) {
                let g = grad.values()[i];
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                let m_hat = self.m[i] / c1;
                let v_hat = self.v[i] / c2;
                let p = params.values()[i];
                delta.values_mut()[i] = -lr * weight_decay * p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(delta)
    }

    /// Applies [`Adam::update`] in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lrs: &[f64]) -> Result<()> {
        let delta = self.update(params, grad, lrs)?;
        for (p, d) in params.values_mut().iter_mut().zip(delta.values()) {
            *p += d;
        }
        Ok(())
    }
}

/// Cosine annealing to zero, restarting every `period` steps.
pub fn cosine_warm_restart(base_lr: f64, step: usize, period: usize) -> f64 {
    if period == 0 {
        return base_lr;
    }
    let t = (step % period) as f64 / period as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales every layer block whose Euclidean norm exceeds `cap` so that it
/// ends at most `cap`. Returns the pre-clip norms.
pub fn clip_layer_norms(grad: &mut ParamVector, cap: f64) -> Vec<f64> {
    let layout = grad.layout().clone();
    let mut norms = Vec::with_capacity(layout.num_layers());
    for l in 0..layout.num_layers() {
        let norm = grad.layer_norm(l);
        norms.push(norm);
        if norm > cap {
            let mut scale = cap / norm;
            let block = grad.layer_values_mut(l);
            let original: Vec<f64> = block.to_vec();
            loop {
                block.iter_mut().zip(&original).for_each(|(b, o)| *b = o * scale);
                if block.iter().map(|v| v * v).sum::<f64>().sqrt() <= cap {
                    break;
                }
                scale = scale.next_down();
            }
        }
    }
    norms
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::autodiff::{LayerShape, ParamLayout};

    fn vector(values: Vec<f64>) -> ParamVector {
        let layout = Arc::new(ParamLayout::new(vec![
            LayerShape::new(1, 2, true),
            LayerShape::new(1, 1, false),
        ]));
        ParamVector::from_values(layout, values).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vector(vec![1.0, -1.0, 0.5, 2.0]);
        let g = vector(vec![0.3, -2.0, 1e-3, 0.0]);
        let mut opt = Adam::new(AdamConfig::default(), 4);
        opt.step(&mut p, &g, &[0.1, 0.01]).unwrap();
        let want = [1.0 - 0.1, -1.0 + 0.1, 0.5 - 0.1, 2.0];
        for (got, want) in p.values().iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn matches_reference_recurrence() {
        // hand-unrolled two steps for a single coordinate
        let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8, 0.05, 0.1);
        let cfg = AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        };
        let mut p = vector(vec![0.7, 0.0, 0.0, 0.0]);
        let mut opt = Adam::new(cfg, 4);
        let mut x = 0.7;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 0.4), (2, -0.25)] {
            opt.step(&mut p, &vector(vec![g, 0.0, 0.0, 0.0]), &[lr, lr]).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x = x - lr * wd * x - lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.values()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut p = vector(vec![0.1, 0.2, 0.3, 0.4]);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::with_weight_decay(1e-4), 4);
        opt.step(&mut p, &vector(vec![1.0, -1.0, 2.0, 3.0]), &[0.0, 0.0]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn cosine_restarts() {
        assert_eq!(cosine_warm_restart(1e-4, 0, 100), 1e-4);
        assert!((cosine_warm_restart(1e-4, 50, 100) - 5e-5).abs() < 1e-18);
        assert!(cosine_warm_restart(1e-4, 99, 100) < 1e-7);
        assert_eq!(cosine_warm_restart(1e-4, 100, 100), 1e-4);
        assert_eq!(cosine_warm_restart(1e-4, 250, 100), cosine_warm_restart(1e-4, 50, 100));
    }

    #[test]
    fn clipping_caps_each_layer() {
        let mut g = vector(vec![3.0, 4.0, 12.0, 0.1]);
        let norms = clip_layer_norms(&mut g, 1.0);
        assert!((norms[0] - 13.0).abs() < 1e-12);
        assert!(g.layer_norm(0) <= 1.0);
        assert!((g.values()[0] / g.values()[1] - 0.75).abs() < 1e-12);
        assert_eq!(g.values()[3], 0.1);
    }
}
