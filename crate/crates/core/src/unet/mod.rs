//! Attention-gated 3D U-Net, its trainer and the checkpoint format.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{
    attention_gate, forward_graph, gate_coefficients, param_specs, BoundParams, GateParams,
    ModelConfig, ModelError, ParamSpec, UNet,
};
pub use train::{
    epoch_order, evaluate_loss, train, write_history_csv, EpochRecord, Round, Sample, TrainError,
    TrainPlan, HISTORY_HEADER,
};
