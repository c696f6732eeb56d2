//! First-order optimizers over [`NetParams`].

use serde::{Deserialize, Serialize};

use crate::model::NetParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: NetParams,
    v: NetParams,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, like: &NetParams) -> Self {
        Self {
            kind,
            lr,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut NetParams, grad: &NetParams) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grad, -self.lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let blocks = params
                    .blocks_mut()
                    .zip(grad.blocks())
                    .zip(self.m.blocks_mut().zip(self.v.blocks_mut()));
                for ((p, g), (m, v)) in blocks {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
