//! First-order optimisers over convolution parameters.

use alloc::{collections::BTreeMap, format};
use serde::{Deserialize, Serialize};

use crate::ann::{Gradients, Params};
use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, momentum: 0.9, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, momentum, ..Self::adam(lr) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(arg_err("learning rate", format!("{} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(arg_err("optimizer", "momentum and betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(arg_err("optimizer", "eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m_kernel: Tensor,
    m_bias: Tensor,
    v_kernel: Tensor,
    v_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    slots: BTreeMap<usize, Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, steps: 0, slots: BTreeMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; layers without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients) -> Result<()> {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        for (id, g) in grads {
            let Some(p) = params.get_mut(id) else { continue };
            p.kernel.same_shape(&g.kernel, "optimizer kernel")?;
            p.bias.same_shape(&g.bias, "optimizer bias")?;
            let slot = self.slots.entry(*id).or_insert_with(|| Slot {
                m_kernel: Tensor::zeros(g.kernel.shape()),
                m_bias: Tensor::zeros(g.bias.shape()),
                v_kernel: Tensor::zeros(g.kernel.shape()),
                v_bias: Tensor::zeros(g.bias.shape()),
            });
            match c.kind {
                OptimizerKind::Sgd => {
                    sgd_update(&mut p.kernel, &mut slot.m_kernel, &g.kernel, c);
                    sgd_update(&mut p.bias, &mut slot.m_bias, &g.bias, c);
                }
                OptimizerKind::Adam => {
                    adam_update(&mut p.kernel, &mut slot.m_kernel, &mut slot.v_kernel, &g.kernel, c, bc1, bc2);
                    adam_update(&mut p.bias, &mut slot.m_bias, &mut slot.v_bias, &g.bias, c, bc1, bc2);
                }
            }
        }
        Ok(())
    }
}

fn sgd_update(p: &mut Tensor, m: &mut Tensor, g: &Tensor, c: OptimizerConfig) {
    for ((p, m), g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
        *m = c.momentum * *m + g;
        *p -= c.lr * *m;
    }
}

fn adam_update(p: &mut Tensor, m: &mut Tensor, v: &mut Tensor, g: &Tensor, c: OptimizerConfig, bc1: f64, bc2: f64) {
    for (((p, m), v), g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= c.lr * mh / (libm::sqrt(vh) + c.eps);
    }
}
