//! Learned matching features: a small multi-scale convolutional extractor
//! trained through the plane-sweep matching loss.

mod extractor;
mod layers;
mod loss;
mod train;

pub use extractor::{
    ExtractorConfig, ExtractorParams, ForwardCache, MultiScaleFeatures, TapGradients, CONV_KERNEL, DECONV_KERNEL,
    INPUT_CHANNELS, PARAMS_MAGIC,
};
pub use layers::{Conv2d, Deconv2d};
pub use loss::{
    deep_supervised_loss, matching_loss, DeepSupervisedLoss, LossWeights, MatchingLoss, PairGeometry, PairSupervision,
    TapLoss,
};
pub use train::{pair_gradient, train, write_loss_history, LossRecord, TrainConfig, TrainOutcome};
