//! Training: the split optimizer, the training loop, the rotating-bucket
//! incremental schedule, and checkpoints.

mod checkpoint;
mod optimizer;
mod pit;
pub(crate) mod run;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optimizer::{
    optimizer_step, OptimizerState, ADAGRAD_EPS, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use pit::{build_pit_schedule, run_pit, PhaseReport, PitPhase, PitSchedule};
pub use run::{train_steps, train_steps_on, StepMetrics, TrainConfig};
