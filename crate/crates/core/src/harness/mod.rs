//! Optimizer, schedule, run configuration, checkpoints, training loops and
//! sliding-window inference.

mod checkpoint;
mod config;
mod infer;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, HEADS_PREFIX, SWCK_MAGIC, SWCK_VERSION};
pub use config::{Mode, RunConfig};
pub use infer::{argmax_labels, infer_probs, sliding_window_infer, window_origins, SlidingOutput};
pub use optim::{adamw_step, lr_schedule, AdamW, OptimState};
pub use train::{
    data_index, derive_seed, evaluate_dice, finetune, load_model, pretrain, stream_rng, Curve, CurveRow, Purpose,
    TrainOptions, TrainOutcome, FINETUNE_COLUMNS, PRETRAIN_COLUMNS,
};
