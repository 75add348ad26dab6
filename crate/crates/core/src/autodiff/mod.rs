//! Reverse-mode automatic differentiation over dense `f64` tensors, with
//! the optimiser, learning-rate schedule, gradient checker and checkpoints.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
pub mod special;

pub use checkpoint::{fingerprint, Checkpoint};
pub(crate) use checkpoint::{read_exact, read_u32};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use optim::{lr_at, Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
