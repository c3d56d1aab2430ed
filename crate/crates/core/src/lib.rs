//! Knowledge-distillation laboratory: deterministic kernels, small
//! teacher/student networks, distillation losses and soft-label diagnostics.

pub mod analysis;
pub mod data;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod sweetspot;
pub mod tensor;
pub mod train;

pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tensor::{Padding, Tensor};
