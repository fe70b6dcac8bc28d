//! Parameter updates.

use serde::{Deserialize, Serialize};

use crate::model::ModelState;
use crate::tensor::{Result, TensorError};

/// `p ← p − lr·grad(p)` for every parameter, then clear the gradients.
pub fn sgd_step(model: &mut ModelState, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(TensorError::Contract(format!("learning rate {lr} must be non-negative")));
    }
    ensure_grads(model)?;
    for p in model.params_mut() {
        let g = p.grad().expect("checked").to_vec();
        for (x, gx) in p.data_mut().iter_mut().zip(g) {
            *x -= lr * gx;
        }
        p.clear_grad();
    }
    model.bump_version();
    Ok(())
}

fn ensure_grads(model: &ModelState) -> Result<()> {
    if let Some((name, _)) = model
        .named_params()
        .find(|(_, p)| p.requires_grad() && p.grad().is_none())
    {
        return Err(TensorError::State(format!("parameter {name} has no gradient")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// SGD or Adam behind one `step` contract.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: Vec::new(),
                v: Vec::new(),
            }),
        }
    }

    pub fn step(&mut self, model: &mut ModelState) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(model, *lr),
            Optimizer::Adam(a) => a.step(model),
        }
    }
}

impl Adam {
    fn step(&mut self, model: &mut ModelState) -> Result<()> {
        ensure_grads(model)?;
        if self.m.is_empty() {
            self.m = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in model.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().expect("checked").to_vec();
            for (i, (x, gx)) in p.data_mut().iter_mut().zip(g).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gx;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gx * gx;
                *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            p.clear_grad();
        }
        model.bump_version();
        Ok(())
    }
}
