//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive evaluated in a forward pass; calling
//! [`Tape::backward`] on a scalar replays the records in reverse and leaves
//! `d root / d leaf` on every trainable leaf. Besides the dense primitives
//! there are fused sparse ones (rulebook convolution, neighbor attention)
//! so the voxel backbone trains without materializing dense grids.

mod backward;
pub mod optim;
pub mod params;
pub mod sparse;
mod tape;
mod tensor;

pub use optim::{cosine_lr, optimizer_step, optimizer_step_filtered, AdamConfig, AdamState};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use sparse::{Neighbors, Rulebook};
pub use tape::{Broadcast, OpKind, Tape, Var};
pub use tensor::Tensor;
