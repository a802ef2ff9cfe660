//! First-order optimisers with per-parameter state keyed by name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball SGD: `v = mu v + g; p -= lr v`.
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Self {
            kind,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn sgd_momentum(momentum: f64) -> Self {
        Self::new(OptimizerKind::SgdMomentum, momentum)
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::Adam, 0.0)
    }

    /// Advances the shared step counter; call once per training step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        debug_assert_eq!(param.shape(), grad.shape(), "{name}");
        let n = param.numel();
        match self.kind {
            OptimizerKind::SgdMomentum => {
                let v = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                for ((p, vi), g) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                    *vi = self.momentum * *vi + g;
                    *p -= lr * *vi;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step.max(1) as i32;
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                for (((p, mi), vi), g) in param
                    .data_mut()
                    .iter_mut()
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                    .zip(grad.data())
                {
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                }
            }
        }
    }
}
