//! Dense numerical core: matrices, layers, losses, reverse-mode gradients
//! and SGD.

mod matrix;
pub mod nn;
mod params;
mod tape;

pub use matrix::Matrix;
pub(crate) use matrix::argmax;
pub use nn::{cross_entropy, dense_forward, relu, sgd_step, softmax, softmax_rows};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
