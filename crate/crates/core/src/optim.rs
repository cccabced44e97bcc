//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm to at most this value before a step.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: None }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.max_grad_norm.is_none_or(|n| n > 0.0 && n.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, t: 0, moments: BTreeMap::new() })
    }

    /// Rebuild from serialized state.
    pub fn from_state(config: AdamConfig, t: u64, moments: BTreeMap<String, Moments>) -> Result<Self> {
        config.validate()?;
        for (name, mo) in &moments {
            if mo.m.len() != mo.v.len() || mo.v.iter().any(|&v| v < 0.0) {
                return Err(Error::Config(format!("malformed Adam moments for {name}")));
            }
        }
        Ok(Self { config, t, moments })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// A parameter with no gradient is treated as having gradient zero.
    /// Nothing is modified if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, model: &mut impl Parameterized) -> Result<()> {
        let mut params = model.parameters_mut();
        params.retain(|(_, p)| p.requires_grad());

        let mut sq_norm = 0.0;
        for (name, p) in &params {
            if let Some(g) = p.grad() {
                if g.len() != p.numel() {
                    return Err(Error::ShapeMismatch { op: "adam_step", lhs: vec![p.numel()], rhs: vec![g.len()] });
                }
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(format!("{name}[{i}] = {}", g[i])));
                }
                sq_norm += g.iter().map(|v| v * v).sum::<f64>();
            }
            if let Some(mo) = self.moments.get(name) {
                if mo.m.len() != p.numel() {
                    return Err(Error::ShapeMismatch { op: "adam_step", lhs: vec![p.numel()], rhs: vec![mo.m.len()] });
                }
            }
        }
        let clip = match self.config.max_grad_norm {
            Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
            _ => 1.0,
        };

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params {
            let n = p.numel();
            let grad = p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
            let mo = self.moments.entry(name).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i] * clip;
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g;
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g * g;
                let m_hat = mo.m[i] / bc1;
                let v_hat = mo.v[i] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
