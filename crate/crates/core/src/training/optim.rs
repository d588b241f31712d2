use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HscError, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Heavy-ball momentum.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the full gradient to at most this norm (0 disables).
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_finite()
            && self.clip_norm >= 0.0;
        if !ok {
            return Err(HscError::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

struct Slot {
    m: Tensor,
    v: Tensor,
}

pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    step: u64,
    state: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            lr: config.lr,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step on every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(HscError::NonFinite("gradient"));
        }
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let c = self.config;
        let t = self.step as i32;
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| HscError::MissingParam(name.clone()))?;
            let slot = self.state.entry(name.clone()).or_insert_with(|| Slot {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let (pd, md, vd) = (p.data_mut(), slot.m.data_mut(), slot.v.data_mut());
            match c.kind {
                OptimizerKind::Adam => {
                    let b1 = c.momentum;
                    let bc1 = 1.0 - b1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for i in 0..pd.len() {
                        let gi = g.data()[i] * clip;
                        md[i] = b1 * md[i] + (1.0 - b1) * gi;
                        vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                        pd[i] -= self.lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + c.eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..pd.len() {
                        md[i] = c.momentum * md[i] + g.data()[i] * clip;
                        pd[i] -= self.lr * md[i];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_run(kind: OptimizerKind, lr: f64) -> f64 {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![3.0, -2.0]));
        let mut opt = Optimizer::new(OptimizerConfig {
            kind,
            lr,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..500 {
            let g = store.get("w").unwrap().scale(2.0);
            let grads = BTreeMap::from([("w".to_string(), g)]);
            opt.step(&mut store, &grads).unwrap();
        }
        store.get("w").unwrap().sum_sq()
    }

    #[test]
    fn both_kinds_minimize_a_quadratic() {
        assert!(quadratic_run(OptimizerKind::Adam, 0.05) < 1e-3);
        assert!(quadratic_run(OptimizerKind::Sgd, 0.01) < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0]));
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![f64::NAN]))]);
        assert!(opt.step(&mut store, &grads).is_err());
    }

    #[test]
    fn clipping_bounds_the_first_sgd_step() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![0.0, 0.0]));
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 1.0,
            clip_norm: 1.0,
            ..Default::default()
        })
        .unwrap();
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![30.0, 40.0]))]);
        opt.step(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap();
        assert!((w.data()[0] + 0.6).abs() < 1e-12 && (w.data()[1] + 0.8).abs() < 1e-12);
    }
}
