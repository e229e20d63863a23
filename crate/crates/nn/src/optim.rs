use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Plain SGD or Adam with the usual decay constants.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Invalid(format!("learning rate {lr}")));
        }
        Ok(match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
        })
    }

    /// Applies one update from the accumulated gradients. Gradients are
    /// left in place; callers zero them before the next step.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        if params.blocks().iter().any(|b| !b.grad().is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        match self {
            Optimizer::Sgd { lr } => {
                for b in params.blocks_mut() {
                    let g = b.grad().data().to_vec();
                    for (p, g) in b.value_mut().data_mut().iter_mut().zip(g) {
                        *p -= *lr * g;
                    }
                }
            }
            Optimizer::Adam(a) => {
                if a.m.is_empty() {
                    a.m = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
                    a.v = a.m.clone();
                }
                if a.m.len() != params.len() {
                    return Err(Error::Shape("optimizer state does not match parameters".into()));
                }
                a.t += 1;
                let c1 = 1.0 - a.beta1.powi(a.t as i32);
                let c2 = 1.0 - a.beta2.powi(a.t as i32);
                for (bi, b) in params.blocks_mut().iter_mut().enumerate() {
                    let g = b.grad().data().to_vec();
                    let (m, v) = (&mut a.m[bi], &mut a.v[bi]);
                    for (k, p) in b.value_mut().data_mut().iter_mut().enumerate() {
                        m[k] = a.beta1 * m[k] + (1.0 - a.beta1) * g[k];
                        v[k] = a.beta2 * v[k] + (1.0 - a.beta2) * g[k] * g[k];
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        *p -= a.lr * mh / (vh.sqrt() + a.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
