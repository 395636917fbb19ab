//! Dense f64 tensors, a reverse-mode tape, and an Adam optimizer — just
//! enough machinery for small set networks, checked against finite
//! differences rather than tuned for throughput.

mod adam;
mod kernels;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
