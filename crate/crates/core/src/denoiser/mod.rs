//! Conditional denoisers: architecture, network passes, conditioning
//! builders, checkpoints, and the trainer.

mod arch;
mod checkpoint;
mod conditioning;
pub mod net;
mod train;

pub use arch::{ArchitectureDescriptor, CondMode, Layout, TensorSlot};
pub use checkpoint::{
    init_denoiser, DenoiserCheckpoint, ScheduleSummary, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use conditioning::{expand_first_frames, make_first_frame_condition, sobel_edges, sobel_x_raw, ConditionSpec};
pub use train::{batch_loss, draw_batch, loss_and_grad, train_denoiser, Batch, TrainConfig, TrainOutcome, TrainingSet};
