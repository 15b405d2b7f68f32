//! Full networks (AA-TransUNet, TransUNet, UNet), the persistence baseline,
//! parameter accounting and checkpoints.

mod checkpoint;
mod config;
mod net;
mod report;

pub use checkpoint::{load_checkpoint, load_weights, save_checkpoint, CHECKPOINT_SCHEMA};
pub use config::{ModelConfig, ModelKind};
pub use net::{persistence, Model, ShapeTrace};
pub use report::{
    human_count, ParamReport, REFERENCE_AA_DECODER, REFERENCE_REDUCTION_PERCENT, REFERENCE_TRANSUNET_DECODER,
};
