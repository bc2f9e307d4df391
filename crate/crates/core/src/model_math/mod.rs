//! Numeric kernels of the multi-head model: channel attention and the
//! shape-gated mask losses, each with analytic gradients.

pub mod eca;
pub mod gradcheck;
pub mod loss;

pub use eca::{apply_channel_attention, eca_weights, eca_weights_with_jacobian, EcaJacobian, EcaParams, RoiFeature};
pub use gradcheck::{run_selftest, GradCheck, GRADCHECK_TOLERANCE};
pub use loss::{
    bce, bce_with_logits, composite_loss, gate, mask_loss_logits, mask_loss_nonconcave, smooth_l1,
    softmax_cross_entropy, HeadGradients, HeadLogits, HeadPrediction, LossWeights, MaskLoss, MaskSample, EPS_P,
};
