//! Patch encoder, spline graph convolutions and node classifier, with the
//! pretext task and training loops.

mod model;
mod pretext;
mod spline;
mod train;

pub use model::{
    argmax_rows, error_net_forward, error_net_forward_from, init_error_net, init_pretext, predict_classes,
    predict_logits, pretext_forward, transfer_encoder, GraphBatch, ModelConfig, CONV_KERNEL,
};
pub use pretext::{
    pretrain_encoder, pretext_accuracy, sample_pretext_patches, PretextSampler, PretextSet, PretrainOutcome,
    OFF_MIN_DISTANCE,
};
pub use spline::{basis_1d, build_spline_graph, open_uniform_knots, spline_basis, SplineBasis, PSEUDO_TOLERANCE};
pub use train::{
    class_weights, history_csv, schedule_lr, train_error_net, ClassWeighting, EpochRecord, InMemorySamples, Init, SampleLoader,
    TrainConfig, TrainOutcome, TrainSplit,
};
