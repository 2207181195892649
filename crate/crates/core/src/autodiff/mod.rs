//! Reverse-mode differentiation over `f64` grids.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the handles of its parents, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Tensors are channel-major
//! `[C, H, W]` grids with no batch dimension and no broadcasting; complex images
//! enter as two channels (real, imaginary).

mod conv;
mod gradcheck;
mod graph;
mod params;

pub use conv::{conv_output_size, conv_transpose_output_size};
pub use gradcheck::{grad_check, random_projection, GradCheckReport, LeafSpec};
pub use graph::{CustomOp, DiffTensor, Graph};
pub use params::{read_checkpoint, write_checkpoint, Bound, ParamEntry, ParamId, ParamStore, CHECKPOINT_MAGIC};
