//! Adam with bias correction over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// True when every moment buffer matches the corresponding parameter.
    pub fn mirrors(&self, params: &ParamStore) -> bool {
        let sizes = params.tensors().iter().map(|t| t.numel());
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && sizes
                .zip(self.m.iter().zip(&self.v))
                .all(|(n, (m, v))| m.len() == n && v.len() == n)
    }
}

/// One Adam update: `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `p ← p − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamHyper,
) -> Result<()> {
    if !state.mirrors(params) || grads.len() != params.len() {
        return Err(Error::Contract(
            "optimizer state does not mirror the parameter set".into(),
        ));
    }
    if let Some((i, g)) = grads
        .iter()
        .enumerate()
        .find(|(i, g)| g.len() != params.tensors()[*i].numel())
    {
        return Err(Error::Contract(format!(
            "gradient for `{}` has {} elements, parameter has {}",
            params.iter().nth(i).map_or("?", |(n, _)| n),
            g.len(),
            params.tensors()[i].numel()
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate {lr} must be finite and non-negative"
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
