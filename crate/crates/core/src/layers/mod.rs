//! Forward and backward passes for the layer kinds the network is built from.

mod conv;
mod deconv;
pub mod gradcheck;
mod pointwise;
mod pool;

pub use conv::{conv_backward, conv_forward, ConvLayer};
pub use deconv::{deconv_backward, deconv_forward, DeconvLayer};
pub use gradcheck::{
    check_gradients, grad_check, layer_suite, relative_error, GradCheckOptions, GradCheckReport,
    LayerKind, LayerUnderTest, KINK_THRESHOLD,
};
pub use pointwise::{concat_channels, relu_backward, relu_forward, split_channels};
pub use pool::{maxpool_backward, maxpool_forward, MaxPoolLayer, PoolContext};

use crate::tensor::Tensor;

/// Gradients of `<grad_output, layer(input)>` with respect to the layer's operands.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub grad_input: Tensor,
    pub grad_weight: Option<Tensor>,
    pub grad_bias: Option<Tensor>,
}
