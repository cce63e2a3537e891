//! Dense matrices and the differentiable primitives the tiny transformer
//! needs. Backward passes are written out by hand next to each forward.

mod gradcheck;
mod matrix;
mod ops;

pub use gradcheck::{finite_diff_check, GradCheckReport, FD_ABS_FLOOR, FD_STEP};
pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use ops::{
    cross_entropy, cross_entropy_masked, gelu, gelu_backward, gelu_derivative, gelu_scalar,
    layer_norm, layer_norm_backward, layer_norm_forward, softmax_rows, LayerNormCache, Token,
    LAYER_NORM_EPS,
};
pub(crate) use ops::softmax_in_place;
