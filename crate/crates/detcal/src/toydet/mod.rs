//! Desk-scale dense detector: synthetic scenes, model, and training loop.

pub mod data;
pub mod model;
pub mod train;

pub use data::{assign_positives, cell_center, generate_dataset, CellTarget, SyntheticScene};
pub use model::{decode_box, nms, Checkpoint, ModelValues, SceneForward, ToyDetector};
pub use train::{
    evaluate_split, log_to_csv, mean_average_precision, task_loss, train, train_from, EpochStats,
    SplitEval, ToyDataset, TrainConfig, TrainMode, TrainOutcome,
};
