//! Reverse-mode gradients for the training computation and a
//! finite-difference verifier.

mod tape;

pub(crate) use tape::{bce_term, pow_alpha};
pub use tape::{cosine_similarity, GradientSet, Tape, Unary, Var};
