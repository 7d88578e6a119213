use serde::{Deserialize, Serialize};

use super::nn::NetParams;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// Adam with the betas customary for GAN training.
    pub fn adam_gan() -> Self {
        OptimizerKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, net: &NetParams) -> Self {
        let zeros: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros.clone(), zeros),
        };
        Self {
            kind,
            lr,
            step: 0,
            first,
            second,
        }
    }

    pub fn sgd(lr: f64, net: &NetParams) -> Self {
        Self::new(OptimizerKind::Sgd, lr, net)
    }

    pub fn adam(lr: f64, net: &NetParams) -> Self {
        Self::new(OptimizerKind::adam_gan(), lr, net)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

fn param_name(i: usize) -> String {
    format!(
        "layer {} {}",
        i / 2,
        if i.is_multiple_of(2) { "weight" } else { "bias" }
    )
}

/// Applies one optimizer update in place. The step is rejected, leaving
/// both `params` and `state` untouched, if any gradient is non-finite.
pub fn optimizer_step(params: &mut NetParams, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    let mut ps = params.params_mut();
    if ps.len() != grads.len() {
        return Err(shape_err("optimizer_step gradients", ps.len(), grads.len()));
    }
    for (i, (p, g)) in ps.iter().zip(grads).enumerate() {
        if !p.same_shape(g) {
            return Err(shape_err(
                format!("optimizer_step {}", param_name(i)),
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", param_name(i))));
        }
    }
    state.step += 1;
    let lr = state.lr;
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in ps.iter_mut().zip(grads) {
                p.axpy(-lr, g);
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((p, g), m), v) in ps
                .iter_mut()
                .zip(grads)
                .zip(state.first.iter_mut())
                .zip(state.second.iter_mut())
            {
                let pd = p.data_mut();
                let (md, vd) = (m.data_mut(), v.data_mut());
                for j in 0..pd.len() {
                    let gj = g.data()[j];
                    md[j] = beta1 * md[j] + (1.0 - beta1) * gj;
                    vd[j] = beta2 * vd[j] + (1.0 - beta2) * gj * gj;
                    let mh = md[j] / c1;
                    let vh = vd[j] / c2;
                    pd[j] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
