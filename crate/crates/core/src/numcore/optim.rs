use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Matrix, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and a multiplicative learning-rate decay.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Current learning rate, starts at `config.lr`.
    pub lr: f64,
    pub step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            lr: config.lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Multiplies the current learning rate by `factor`.
    pub fn decay(&mut self, factor: f64) {
        self.lr *= factor;
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        check_shapes(params, grads)?;
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 5e-4,
            alpha: 0.99,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RmsPropState {
    pub config: RmsPropConfig,
    pub lr: f64,
    sq: BTreeMap<String, Matrix>,
}

impl RmsPropState {
    pub fn new(config: RmsPropConfig) -> Self {
        RmsPropState {
            config,
            lr: config.lr,
            sq: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        check_shapes(params, grads)?;
        let RmsPropConfig { alpha, eps, .. } = self.config;
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let s = self
                .sq
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for ((pi, &gi), si) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                *si = alpha * *si + (1.0 - alpha) * gi * gi;
                *pi -= self.lr * gi / (si.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(AdamState),
    RmsProp(RmsPropState),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        match self {
            Optimizer::Adam(s) => s.step(params, grads),
            Optimizer::RmsProp(s) => s.step(params, grads),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam(s) => s.lr,
            Optimizer::RmsProp(s) => s.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Adam(s) => s.lr = lr,
            Optimizer::RmsProp(s) => s.lr = lr,
        }
    }

    pub fn decay(&mut self, factor: f64) {
        let lr = self.lr() * factor;
        self.set_lr(lr);
    }
}

fn check_shapes(params: &ParamStore, grads: &Gradients) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` is {}x{}, parameter is {}x{}",
                g.rows(),
                g.cols(),
                p.rows(),
                p.cols()
            )));
        }
    }
    Ok(())
}
