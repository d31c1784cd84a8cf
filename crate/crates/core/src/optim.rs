//! First-order optimizers over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor borrowed together with its stable name.
pub type NamedParam<'a> = (String, &'a mut Tensor);

fn grad_of<'a>(name: &str, t: &'a Tensor) -> Result<&'a [f64]> {
    t.grad.as_deref().ok_or_else(|| Error::MissingGrad(name.to_string()))
}

/// Plain SGD: `w <- w - lr * g`.
pub fn sgd_step(params: &mut [NamedParam<'_>], lr: f64) -> Result<()> {
    for (name, t) in params.iter() {
        grad_of(name, t)?;
    }
    for (_, t) in params.iter_mut() {
        let g = t.grad.take().expect("checked above");
        for (w, gv) in t.data_mut().iter_mut().zip(&g) {
            *w -= lr * gv;
        }
        t.grad = Some(g);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with per-parameter bias-corrected moment estimates.
///
/// State is keyed by parameter name and persists across calls; each
/// parameter keeps its own step count so that groups stepped at different
/// times stay correctly bias-corrected.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    pub fn steps_taken(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |m| m.t)
    }

    pub fn step(&mut self, params: &mut [NamedParam<'_>], cfg: &AdamConfig) -> Result<()> {
        for (name, t) in params.iter() {
            grad_of(name, t)?;
        }
        for (name, t) in params.iter_mut() {
            let g = t.grad.take().expect("checked above");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
                st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            t.grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_on_square() {
        let mut w = Tensor::scalar(1.0).into_param();
        w.set_grad(vec![2.0 * w.item()]);
        sgd_step(&mut [("w".into(), &mut w)], 0.1).unwrap();
        assert!((w.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut w = Tensor::from_vec(vec![0.3, -0.7]).into_param();
        w.set_grad(vec![0.0, 0.0]);
        sgd_step(&mut [("w".into(), &mut w)], 0.5).unwrap();
        assert_eq!(w.data(), &[0.3, -0.7]);
    }

    #[test]
    fn missing_grad_names_param() {
        let mut w = Tensor::scalar(1.0).into_param();
        let err = sgd_step(&mut [("head.fc1.weight".into(), &mut w)], 0.1).unwrap_err();
        assert!(err.to_string().contains("head.fc1.weight"));
        let err = Adam::new()
            .step(&mut [("gate".into(), &mut w)], &AdamConfig::with_lr(0.1))
            .unwrap_err();
        assert!(matches!(err, Error::MissingGrad(n) if n == "gate"));
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // m_hat = g, v_hat = g^2, so the first update is lr * g / (|g| + eps).
        for scale in [1e-4, 1.0, 1e4] {
            let mut w = Tensor::from_vec(vec![0.0, 0.0]).into_param();
            w.set_grad(vec![scale, -3.0 * scale]);
            let cfg = AdamConfig::with_lr(0.01);
            Adam::new().step(&mut [("w".into(), &mut w)], &cfg).unwrap();
            for (v, s) in w.data().iter().zip([-1.0, 1.0]) {
                assert!((v - s * 0.01).abs() < 1e-6, "scale {scale}: {v}");
            }
        }
    }

    #[test]
    fn adam_state_persists() {
        let mut w = Tensor::scalar(1.0).into_param();
        let cfg = AdamConfig::with_lr(0.1);
        let mut opt = Adam::new();
        for _ in 0..3 {
            w.set_grad(vec![1.0]);
            opt.step(&mut [("w".into(), &mut w)], &cfg).unwrap();
        }
        assert_eq!(opt.steps_taken("w"), 3);
        assert!((w.item() - 0.7).abs() < 1e-6);
    }
}
