use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_fraction: f64, base_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let s = step as f64;
    let total = total_steps as f64;
    let warmup = warmup_fraction * total;
    if s < warmup {
        base_lr * s / warmup
    } else {
        base_lr * (total - s) / (total - warmup)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// First moments, one per array in [`EncoderParams::named`] order.
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        let zeros: Vec<Matrix> = params
            .arrays()
            .iter()
            .map(|a| Matrix::zeros(a.rows(), a.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked before anything is
/// modified, so a rejected step leaves params and state untouched.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &[Matrix],
    state: &mut AdamState,
    hyper: AdamHyper,
) -> Result<()> {
    let mut arrays = params.arrays_mut();
    if grads.len() != arrays.len() || state.m.len() != arrays.len() {
        return Err(Error::input(format!(
            "{} gradients and {} moment arrays for {} parameters",
            grads.len(),
            state.m.len(),
            arrays.len()
        )));
    }
    for (i, (g, p)) in grads.iter().zip(arrays.iter()).enumerate() {
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter array {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (((p, g), m), v) in arrays
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .zip(m.values_mut())
            .zip(v.values_mut())
        {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
