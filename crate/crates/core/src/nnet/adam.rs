use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Mat, ParamGrads, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.002, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Mat>,
    second: BTreeMap<String, Mat>,
}

impl Adam {
    /// Registers every parameter of `params` with zeroed moments.
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: BTreeMap<String, Mat> = params.iter().map(|(n, p)| (n.clone(), Mat::zeros(p.raw_dim()))).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first: BTreeMap<String, Mat>,
        second: BTreeMap<String, Mat>,
    ) -> Result<Self> {
        let consistent = first.len() == second.len()
            && first.iter().zip(&second).all(|((a, x), (b, y))| a == b && x.dim() == y.dim());
        if !consistent {
            return Err(Error::validation(None, "adam moment tensors disagree"));
        }
        Ok(Self { config, step, first, second })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Mat> {
        &self.first
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Mat> {
        &self.second
    }

    /// Applies one update. Parameters without a gradient entry see a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::shape(format!("optimizer tracks {} tensors, got {}", self.first.len(), params.len())));
        }
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::shape(format!("gradient for unknown parameter {name:?}")))?;
            if p.dim() != g.dim() {
                return Err(Error::shape(format!("gradient {name:?} {:?} vs parameter {:?}", g.dim(), p.dim())));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self
                .first
                .get_mut(name)
                .ok_or_else(|| Error::shape(format!("parameter {name:?} not registered with the optimizer")))?;
            let v = self.second.get_mut(name).expect("moments share keys");
            if m.dim() != p.dim() {
                return Err(Error::shape(format!("moment shape mismatch for {name:?}")));
            }
            let update = |pv: &mut f64, mv: &mut f64, vv: &mut f64, g: f64| {
                *mv = beta1 * *mv + (1.0 - beta1) * g;
                *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            let cells = p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut());
            match grads.get(name) {
                Some(g) => cells.zip(g.iter()).for_each(|(((pv, mv), vv), &gi)| update(pv, mv, vv, gi)),
                None => cells.for_each(|((pv, mv), vv)| update(pv, mv, vv, 0.0)),
            }
        }
        Ok(())
    }
}
