//! Stochastic gradient descent with classical momentum and decoupled-free
//! (coupled, L2-style) weight decay: `v = momentum*v + g + wd*p`,
//! `p -= lr*v`.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::SegModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter tensor, aligned with the model's order.
    pub velocity: Vec<(String, ArrayD<f64>)>,
}

impl Sgd {
    pub fn new(params: &SegModelParams, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::validation("momentum must be in [0, 1)"));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay must be finite and >= 0"));
        }
        Ok(Self {
            momentum,
            weight_decay,
            velocity: params
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), ArrayD::zeros(t.raw_dim())))
                .collect(),
        })
    }

    /// Applies one update. `grads` must align with the parameter tensors
    /// one-to-one, in order.
    pub fn step(
        &mut self,
        params: &mut SegModelParams,
        grads: &[ArrayD<f64>],
        lr: f64,
    ) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::validation("learning rate must be finite and >= 0"));
        }
        if grads.len() != params.tensors.len() {
            return Err(Error::validation(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                params.tensors.len()
            )));
        }
        for (((name, p), (vname, v)), g) in params
            .tensors
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(grads.iter())
        {
            if name != vname {
                return Err(Error::validation(format!(
                    "optimizer state {vname} does not match parameter {name}"
                )));
            }
            if g.shape() != p.shape() {
                return Err(Error::validation(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            azip_update(p, v, g, self.momentum, self.weight_decay, lr)?;
        }
        Ok(())
    }
}

fn azip_update(
    p: &mut ArrayD<f64>,
    v: &mut ArrayD<f64>,
    g: &ArrayD<f64>,
    momentum: f64,
    weight_decay: f64,
    lr: f64,
) -> Result<()> {
    for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
        if !gv.is_finite() {
            return Err(Error::numeric("non-finite gradient in optimizer step"));
        }
        let d = gv + weight_decay * *pv;
        *vv = momentum * *vv + d;
        *pv -= lr * *vv;
    }
    Ok(())
}
