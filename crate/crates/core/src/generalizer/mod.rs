//! Latent distribution distances, hard-sample synthesis and the two-stage
//! training schedule.

pub mod ascent;
pub mod gaussian;
pub mod train;

pub use ascent::{
    regularized_cost, synthesize_hard_samples, synthesize_with_reference, AscentOutcome, GeneralizationConfig,
    HardSample, HardSamplePool, SourceReference, INPUT_BOUND,
};
pub use gaussian::{bures_cost, bures_cost_sq, fit_gaussian, GaussianSummary, VARIANCE_FLOOR};
pub use train::{
    classifier_arch, confusion, evaluate, maximization_epochs, maximization_phase, mean_nll, minimization_epoch,
    preprocess_rows, pretrain_epoch, train, train_classifier, Confusion, Control, EpochLosses, EpochMetrics,
    FlowBranch, Mode, TrainConfig, TrainState,
};
