//! Differentiable numeric substrate: tensors on a gradient tape, parameter
//! sets, and a finite-difference oracle.

mod gradcheck;
pub mod kernels;
mod ops;
mod param;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use ops::{affine_map, conv2d, norm_groups, softmax_rows};
pub use param::{normal_init, Gradients, Param, ParamId, ParamSet, INIT_STD};
pub use tape::{NodeGrads, Tape, Var};
