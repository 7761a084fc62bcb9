use serde::{Deserialize, Serialize};

use super::{NnError, Params, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// First and second moment estimates plus step bookkeeping.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Params<T>,
    pub v: Params<T>,
    /// Number of calls to [`adam_step`], including skipped ones.
    pub step: u64,
    /// Number of moment updates actually applied (drives bias correction).
    pub applied: u64,
    /// Steps skipped because of non-finite gradients.
    pub skipped: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Params<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            applied: 0,
            skipped: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Non-finite gradients leave parameters and moments untouched and bump
/// `state.skipped`. Returns whether the update was applied.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut Params<T>,
    grads: &Params<T>,
    lr: f64,
) -> Result<bool, NnError> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(NnError::Shape(
            "gradients, parameters and optimizer state differ in layout".into(),
        ));
    }
    state.step += 1;
    if !grads.all_finite() {
        state.skipped += 1;
        return Ok(false);
    }
    let c = state.config;
    let scale = match c.max_grad_norm {
        Some(max) => {
            let norm: f64 = grads
                .iter()
                .flat_map(|(_, a)| a.iter())
                .map(|g| {
                    let g = g.to_f64().unwrap();
                    g * g
                })
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.applied += 1;
    let t = state.applied as i32;
    let b1 = T::from(c.beta1).unwrap();
    let b2 = T::from(c.beta2).unwrap();
    let one = T::one();
    let scale = T::from(scale).unwrap();
    state.m.update(grads, |m, g| *m = b1 * *m + (one - b1) * g * scale)?;
    state
        .v
        .update(grads, |v, g| *v = b2 * *v + (one - b2) * (g * scale) * (g * scale))?;
    let bc1 = T::from(1.0 - c.beta1.powi(t)).unwrap();
    let bc2 = T::from(1.0 - c.beta2.powi(t)).unwrap();
    let lr = T::from(lr).unwrap();
    let eps = T::from(c.eps).unwrap();
    // params -= lr · m̂ / (√v̂ + ε)
    let mut step_dir = state.m.clone();
    step_dir.update(&state.v, |m, v| {
        let m_hat = *m / bc1;
        let v_hat = v / bc2;
        *m = lr * m_hat / (v_hat.sqrt() + eps);
    })?;
    params.update(&step_dir, |p, d| *p = *p - d)?;
    Ok(true)
}
