//! The encoder stack: subject-wise mapper, shared semantic encoder with its
//! prior, and the shared visual encoder with its assist heads and prior.

mod checkpoint;
mod config;
mod data;
mod model;
mod train;

pub use checkpoint::{
    dtype_name, load_model, load_params, read_manifest, save_model, save_params, CheckpointManifest, ParamEntry,
    CHECKPOINT_FILE, CHECKPOINT_SCHEMA, PARAM_DIR,
};
pub use config::{Mode, ModelConfig, ModelShape, TrainConfig, FREEZABLE};
pub use data::{
    active_tokens, averaged_test_voxels, avg_pool_image, gather_rows, pad_target, single_repetition_test_voxels,
    StimulusTable, TrainingData, PADDED_TOKENS,
};
pub use model::{infer, ForwardVars, Inference, Model, SsvModule, SubjectBatch, VisualVars};
pub use train::{
    batches_per_epoch, epoch_order, evaluate_batch, fit, objective, train, Batch, EpochRecord, History, LossBreakdown,
    LossVars, SsvLossVars,
};
