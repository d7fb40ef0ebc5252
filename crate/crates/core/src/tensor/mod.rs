//! Dense `f64` linear algebra and the seeded generator behind every random draw.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub(crate) use matrix::{argmax, softmax_in_place};
pub use rng::RngState;
