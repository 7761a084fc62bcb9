//! Minimal dense-network stack: parameter sets, MLPs, reverse-mode
//! gradients, Adam, finite-difference checking and PCA.

mod adam;
pub mod gradcheck;
mod mlp;
mod params;
mod pca;
pub mod tape;

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{mlp_forward, Activation, Mlp, MlpSpec, OutputTransform};
pub use params::{ParamSet, Params};
pub use pca::{pca_fit, pca_project, PcaBasis};
pub use tape::{Graph, ParamVars, Var};

/// Floating-point element type usable on a [`Graph`].
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::ops::AddAssign
    + std::iter::Sum
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss {0}; gradients withheld")]
    NonFiniteLoss(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Evaluates `loss_fn` on a fresh graph holding `params` and returns the loss
/// value together with parameter-shaped gradients.
pub fn value_and_grad<T, F>(params: &Params<T>, loss_fn: F) -> Result<(T, Params<T>), NnError>
where
    T: Scalar,
    F: FnOnce(&mut Graph<T>, &ParamVars) -> Result<Var, NnError>,
{
    let mut g = Graph::new();
    let pv = g.params(params);
    let loss = loss_fn(&mut g, &pv)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(NnError::NonFiniteLoss(value.to_f64().unwrap_or(f64::NAN)));
    }
    let grads = g.backward(loss)?;
    Ok((value, params.with_arrays(grads)))
}
