//! Minimal reverse-mode differentiation over a fixed layer stack.
//!
//! Every supported layer is piecewise linear in its input, which keeps
//! gradients of directional derivatives (needed by the latent and input
//! gradient penalties) first-order: a forward tangent sweep followed by an
//! ordinary reverse sweep.

mod layer;
mod loss;
mod model;

pub use layer::{Layer, LayerKind, ParamGrad, Params};
pub use loss::{argmax_rows, cross_entropy, log_softmax_row, softmax_row};
pub use model::{ForwardPass, GradientRecord, LayeredModel, PooledLatent};
