//! Dense tensors, hand-written layer gradients, ADAM and checkpoints.
//!
//! Every learned head in the pipeline is assembled from the layers here.
//! There is no graph autodiff: each network stores its activation trace and
//! walks it backwards explicitly.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod tensor;

pub use adam::{adam_step, Adam, Param};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, param_grad_check, relative_error, FnObjective, GradError, LayerProbe, Objective};
pub(crate) use layers::softmax_in_place;
pub use layers::{layer_backward, layer_forward, Conv3x3, Dense, Layer, Sequential};
pub use tensor::{gemm, MatRef, Real, Tensor};
