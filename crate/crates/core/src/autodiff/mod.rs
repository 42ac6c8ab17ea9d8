//! Minimal reverse-mode automatic differentiation over dense rank-0..3 arrays.
//!
//! Includes the gradient-reversal op used by the domain discriminator: the
//! forward pass is the identity and the backward pass scales the upstream
//! gradient by `-lambda`, so one backward pass on the total loss trains the
//! discriminator to separate domains while pushing the feature extractor to
//! confuse it.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{compare_central_differences, finite_diff_check, relative_error, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
