//! Network specifications, parameter sets and checkpoints.

mod checkpoint;
mod model;
mod spec;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use model::{BoundParams, Forward, Mode, Model, Param};
pub use spec::{ActShape, Activation, BatchNormConfig, LayerSpec, NetworkSpec, Plan, SCHEMA_VERSION};
