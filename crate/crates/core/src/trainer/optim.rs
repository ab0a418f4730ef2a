//! Momentum SGD and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// Weight decay enters as an L2 term added to the gradient.
    Sgd {
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9, weight_decay: 1e-4 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd { momentum, weight_decay } => (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerKind::Adam { beta1, beta2, eps } => (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-parameter moment buffers, allocated lazily on first update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    /// Per-parameter update counts (Adam bias correction).
    pub steps: Vec<u64>,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: usize) -> Self {
        Self { steps: vec![0; params], first: vec![Vec::new(); params], second: vec![Vec::new(); params] }
    }
}

/// Updates `params[i]` from `grads[i]`; `None` gradients leave the parameter
/// and its buffers untouched.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&[f64]>],
    state: &mut OptimizerState,
    kind: OptimizerKind,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.steps.len() != params.len() {
        return Err(TensorError::shape(
            "optimizer_step",
            format!("{} params, {} grads, state for {}", params.len(), grads.len(), state.steps.len()),
        )
        .into());
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if g.len() != p.numel() {
            return Err(
                TensorError::shape("optimizer_step", format!("parameter {i} has {} values, gradient {}", p.numel(), g.len())).into()
            );
        }
        let n = g.len();
        if state.first[i].len() != n {
            state.first[i] = vec![0.0; n];
            state.second[i] = vec![0.0; n];
        }
        state.steps[i] += 1;
        let w = p.data_mut();
        match kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                let v = &mut state.first[i];
                for j in 0..n {
                    let d = g[j] + weight_decay * w[j];
                    v[j] = momentum * v[j] + d;
                    w[j] -= lr * v[j];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = state.steps[i] as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (m, v) = (&mut state.first[i], &mut state.second[i]);
                for j in 0..n {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                    w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
