//! SGD (optionally Nesterov), Adam and AdamW, with AMSGrad for the Adam family.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub nesterov: bool,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub amsgrad: bool,
}

impl OptimizerSpec {
    pub fn sgd(lr: f64, momentum: f64, nesterov: bool) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            nesterov,
            weight_decay: 0.0,
            amsgrad: false,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr,
            momentum: 0.0,
            nesterov: false,
            weight_decay,
            amsgrad: false,
        }
    }

    pub fn adam(lr: f64, amsgrad: bool) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.0,
            amsgrad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                if self.amsgrad {
                    return Err(Error::Config("amsgrad applies only to adam/adamw".into()));
                }
                if self.momentum < 0.0 {
                    return Err(Error::Config("momentum must be non-negative".into()));
                }
                if self.nesterov && self.momentum <= 0.0 {
                    return Err(Error::Config("nesterov requires positive momentum".into()));
                }
            }
            OptimizerKind::Adam | OptimizerKind::Adamw => {
                if self.momentum != 0.0 || self.nesterov {
                    return Err(Error::Config("momentum/nesterov apply only to sgd".into()));
                }
            }
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    vmax: Vec<f64>,
}

pub struct Optimizer {
    spec: OptimizerSpec,
    step: u64,
    slots: HashMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            step: 0,
            slots: HashMap::new(),
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter. Parameters without a
    /// gradient are treated as having a zero gradient.
    #[allow(clippy::needless_range_loop)] // parallel indexing into weights and optimizer slots
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let spec = self.spec.clone();
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let grad = grads.get(id).map(|g| g.data());
            let w = store.get_mut(id).data_mut();
            let slot = self.slots.entry(id).or_default();
            let g_at = |i: usize| grad.map_or(0.0, |g| g[i]);
            match spec.kind {
                OptimizerKind::Sgd => {
                    let use_momentum = spec.momentum > 0.0;
                    if use_momentum && slot.m.is_empty() {
                        slot.m = vec![0.0; w.len()];
                    }
                    for i in 0..w.len() {
                        let mut g = g_at(i) + spec.weight_decay * w[i];
                        if use_momentum {
                            let buf = if t == 1 { g } else { spec.momentum * slot.m[i] + g };
                            slot.m[i] = buf;
                            g = if spec.nesterov { g + spec.momentum * buf } else { buf };
                        }
                        w[i] -= spec.lr * g;
                    }
                }
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    if slot.m.is_empty() {
                        slot.m = vec![0.0; w.len()];
                        slot.v = vec![0.0; w.len()];
                        if spec.amsgrad {
                            slot.vmax = vec![0.0; w.len()];
                        }
                    }
                    let bc1 = 1.0 - BETA1.powi(t);
                    let bc2 = 1.0 - BETA2.powi(t);
                    let decoupled = spec.kind == OptimizerKind::Adamw;
                    for i in 0..w.len() {
                        let mut g = g_at(i);
                        if decoupled {
                            w[i] *= 1.0 - spec.lr * spec.weight_decay;
                        } else {
                            g += spec.weight_decay * w[i];
                        }
                        slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * g;
                        slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * g * g;
                        let second = if spec.amsgrad {
                            slot.vmax[i] = slot.vmax[i].max(slot.v[i]);
                            slot.vmax[i]
                        } else {
                            slot.v[i]
                        };
                        let denom = (second / bc2).sqrt() + ADAM_EPS;
                        w[i] -= spec.lr * (slot.m[i] / bc1) / denom;
                    }
                }
            }
        }
    }
}
