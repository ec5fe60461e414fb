//! Class support networks for few-shot classification.
//!
//! Support samples of each class are embedded by a shared network, re-embedded
//! jointly per class, and a query is classified by letting each class's
//! support points compete for the query before a softmax over the winners.
//! Checkpoints of one training run can be averaged into a single model.

pub mod aeml;
pub mod attention;
pub mod autodiff;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod networks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
