//! Parameter update rules.

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `θ ← θ − lr·g`
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0.0)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::AdamW, lr, weight_decay)
    }

    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters without an entry in `grads` are untouched.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradMap) -> Result<()> {
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(String::from("non-finite gradient")));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
                OptimizerKind::AdamW => {
                    let (m, v) = self
                        .moments
                        .entry(String::from(name))
                        .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
                    let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
                    let w = p.value.data_mut();
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for i in 0..w.len() {
                        let d = g.data()[i];
                        md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * d;
                        vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * d * d;
                        let mh = md[i] / bc1;
                        let vh = vd[i] / bc2;
                        w[i] -= self.lr * (mh / (libm::sqrt(vh) + self.eps) + self.weight_decay * w[i]);
                    }
                }
            }
        }
        Ok(())
    }
}
