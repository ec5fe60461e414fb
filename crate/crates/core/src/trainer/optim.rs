use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("Adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update of `params`, whose gradients are looked up
/// in `grads` under the matching entry of `vars`. Nothing is modified unless
/// every gradient is present with the right shape.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    vars: &[Var],
    grads: &GradientMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != vars.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} vars, {} moment slots",
            params.len(),
            vars.len(),
            state.m.len()
        )));
    }
    let mut gs = Vec::with_capacity(vars.len());
    for (i, (&v, p)) in vars.iter().zip(params.iter()).enumerate() {
        let g = grads
            .get(v)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {i}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Contract(format!(
                "gradient {i} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        gs.push(g);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
    for (((p, g), m), v) in params.iter_mut().zip(gs).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `initial · 0.5^floor(counter / period)`.
pub fn lr_at(counter: usize, initial: f64, period: usize) -> f64 {
    let halvings = (counter / period.max(1)).min(i32::MAX as usize) as i32;
    initial * 0.5f64.powi(halvings)
}
