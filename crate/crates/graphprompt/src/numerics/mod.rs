//! Dense-array numerics: element types, reverse-mode autodiff,
//! parameter storage, optimization, gradient checking, checkpoints.

pub mod adamw;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod scalar;
pub mod tape;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use params::{Binding, Param, ParamGroup, ParamId, ParamStore};
pub use scalar::{Dtype, Scalar};
pub use tape::{Grads, NodeId, Tape};
