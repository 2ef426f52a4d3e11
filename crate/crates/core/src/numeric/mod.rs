//! Dense linear algebra, stable reductions, seeded randomness and
//! reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod reduce;
pub mod rng;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{dot, norm, Matrix};
pub use reduce::{cosine_sim, dropout_mask, log_sum_exp, softmax_rows};
pub use rng::{Rng, RngState};
pub use tape::{AttentionNorm, AttentionWeights, Gradients, Tape, Var, RATIO_EPS};
