//! Small convolutional residual networks with hand-written forward and
//! reverse passes.

mod activation;
mod block;
mod conv;

pub use activation::{activation, activation_deriv};
pub use block::{
    block_backward, block_forward, block_forward_tape, branch_forward_tape, branch_jvp,
    branch_lipschitz_bound, branch_vjp, conv_operator_norm, jacobian_spectral_norm,
    normalize_branch_lipschitz, xavier_init, BlockGrads, BlockTape, NetworkGrads, NetworkWeights,
    ResidualBlockWeights, HIDDEN_CHANNELS,
};
pub use conv::{
    conv_forward, conv_input_grad, conv_jvp, conv_weight_grad, ConvGrad, ConvLayer, KERNEL_SIZE,
};
