//! Concept activation vectors and concept-level bias unlearning for small
//! feedforward networks.
//!
//! * [`net`]: layer stack with reverse-mode gradients and the
//!   extractor / head split.
//! * [`data`]: controlled-bias synthetic classification tasks.
//! * [`cav`]: concept activation vectors (signal, ridge, lasso, logistic, SVM).
//! * [`alignment`]: agreement between a CAV and the true artifact direction.
//! * [`correction`]: RR-ClArC, A-/P-ClArC, RRR and vanilla fine-tuning.
//! * [`metrics`]: accuracy, TCAV, TCAV sensitivity and input-level bias relevance.
//! * [`io`]: checkpoint, dataset and CAV files.

pub mod alignment;
pub mod cav;
pub mod correction;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
