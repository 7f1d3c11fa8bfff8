use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Gradients keyed by parameter path.
pub type Grads = BTreeMap<String, Vec<f64>>;

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moment buffers are created on first use and only for
/// parameters that are trainable at that time.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.98, 1e-9)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, path: &str) -> bool {
        self.moments.contains_key(path)
    }

    /// One update at learning rate `lr`. Frozen parameters are never touched, even when a
    /// gradient is supplied for them.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Grads, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (path, g) in grads {
            if params.is_frozen(path) {
                continue;
            }
            let p = params.tensor_mut(path)?;
            if p.numel() != g.len() {
                return Err(Error::shape("adam", p.shape(), &[g.len()]));
            }
            let mo = self.moments.entry(path.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut mo.m).zip(&mut mo.v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn frozen_untouched_and_no_state() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::full(&[3], 1.0)).unwrap();
        p.insert("b", Tensor::full(&[2], 1.0)).unwrap();
        p.set_frozen("b", true);
        let mut g = Grads::new();
        g.insert("a".into(), vec![0.1, -0.2, 0.3]);
        g.insert("b".into(), vec![1.0, 1.0]);
        let mut opt = Adam::default();
        for _ in 0..5 {
            opt.step(&mut p, &g, 1e-2).unwrap();
        }
        assert!(p.tensor("b").unwrap().bitwise_eq(&Tensor::full(&[2], 1.0)));
        assert!(!opt.has_state("b") && opt.has_state("a"));
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g)
        let mut p = ModelParams::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        let mut g = Grads::new();
        g.insert("a".into(), vec![0.5, -3.0]);
        Adam::default().step(&mut p, &g, 0.01).unwrap();
        let d = p.tensor("a").unwrap().data();
        assert!((d[0] + 0.01).abs() < 1e-9 && (d[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let mut g = Grads::new();
        g.insert("a".into(), vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["a"], vec![3.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["a"][1] - 0.8).abs() < 1e-15);
    }
}
