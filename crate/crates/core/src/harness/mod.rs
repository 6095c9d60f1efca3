//! Training, evaluation, ablation and rendering around the model.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod render;
mod train;

pub use ablate::{
    ablate, ablation_rows, table_text, AblationCell, AblationResult, AblationRow, AblationTable,
    RowSummary, SWITCH_KEYS,
};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LrSchedule, RunConfig, TargetCodebook};
pub use eval::{evaluate, predict, report_text, sample_masks, write_report};
pub use render::{label_images, palette, ppm, render_scene, CELL};
pub use train::{
    check_dataset, init_model, load_model, train, EvalLog, Experiment, PreparedBatch, StepLog,
    TrainLog, TrainOptions, TrainOutcome,
};
