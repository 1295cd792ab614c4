//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Module, ParamKind};
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
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moments per parameter, in `visit` order.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update: `p ← p − lr·wd·p` for decaying parameters, then the
    /// bias-corrected Adam step. `grads` follows the module's `visit` order.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut names = Vec::new();
        module.visit("", &mut |name, t, _| names.push((name, t.shape())));
        if names.len() != grads.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), names.len())));
        }
        for ((name, shape), g) in names.iter().zip(grads) {
            if *shape != g.shape() {
                return Err(crate::tensor::shape_error(&format!("adamw `{name}`"), *shape, g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |_, p, kind| {
            let (m, v, g) = (&mut ms[idx], &mut vs[idx], grads[idx].data());
            idx += 1;
            let decay = if kind == ParamKind::Weight { lr * weight_decay } else { 0.0 };
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *p -= decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor, ParamKind);

    impl Module for One {
        fn visit<'a>(&'a self, _: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
            f("p".into(), &self.0, self.1);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
            f("p".into(), &mut self.0, self.1);
        }
    }

    fn run(p: f64, g: f64, lr: f64, wd: f64, kind: ParamKind) -> f64 {
        let mut m = One(Tensor::scalar(p), kind);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: wd, ..AdamWConfig::default() });
        opt.step(&mut m, &[Tensor::scalar(g)], lr).unwrap();
        m.0.item().unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        assert_eq!(run(1.5, 0.0, 0.1, 0.0, ParamKind::Weight), 1.5);
    }

    #[test]
    fn pure_decoupled_decay() {
        assert!((run(1.0, 0.0, 0.1, 0.05, ParamKind::Weight) - 0.995).abs() < 1e-15);
        assert_eq!(run(1.0, 0.0, 0.1, 0.05, ParamKind::Bias), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        assert!((run(0.0, 1.0, 1e-3, 0.0, ParamKind::Weight) + 1e-3).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut m = One(Tensor::scalar(0.0), ParamKind::Weight);
        let err = AdamW::default().step(&mut m, &[Tensor::scalar(f64::NAN)], 0.1).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(m.0.item().unwrap(), 0.0);
    }
}
