use serde::{Deserialize, Serialize};

use super::{Float, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub m: Parameters<F>,
    pub v: Parameters<F>,
}

impl<F: Float> OptimizerState<F> {
    pub fn new(params: &Parameters<F>) -> Self {
        OptimizerState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

fn same_shapes<F: Float>(a: &Parameters<F>, b: &Parameters<F>) -> bool {
    a.tensors.len() == b.tensors.len()
        && a.tensors
            .iter()
            .zip(&b.tensors)
            .all(|(x, y)| x.name == y.name && x.data.len() == y.data.len())
}

/// Decoupled weight decay followed by the bias-corrected Adam update.
pub fn adamw_step<F: Float>(
    params: &mut Parameters<F>,
    grads: &Parameters<F>,
    state: &mut OptimizerState<F>,
    hp: &AdamW,
) -> Result<()> {
    if !same_shapes(params, grads) || !same_shapes(params, &state.m) || !same_shapes(params, &state.v) {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - hp.lr * hp.weight_decay;
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.m.tensors)
        .zip(&mut state.v.tensors)
    {
        for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
            let g = g.f64();
            let mn = hp.beta1 * m.f64() + (1.0 - hp.beta1) * g;
            let vn = hp.beta2 * v.f64() + (1.0 - hp.beta2) * g * g;
            *m = F::of(mn);
            *v = F::of(vn);
            let step = hp.lr * (mn / c1) / ((vn / c2).sqrt() + hp.eps);
            *p = F::of(p.f64() * decay - step);
        }
    }
    Ok(())
}
