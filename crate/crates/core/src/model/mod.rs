//! Two-encoder classifier with concatenation fusion and hand-written
//! forward/backward passes.

mod network;
mod params;

pub use network::{
    backward, backward_with_embeddings, ce_loss_and_grad, forward_multi, forward_uni, sgd_step, softmax_rows, Forward,
    ForwardCache, Path,
};
pub use params::{
    DenseLayer, EncoderParams, FusionParams, GradientVector, Group, GroupMask, GroupedParams, ModelParams, ModelShape,
};

#[cfg(test)]
pub(crate) use network::tests::unflatten;
