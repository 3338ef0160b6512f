//! Dense f32 tensors, the `.ten` file format and a reverse-mode tape.

mod tape;
mod tensor;
pub mod ten;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{NormMode, Tensor};
