//! The reference-guided super-resolution model: configuration, parameters,
//! forward and backward passes, and checkpoint serialization.

pub mod backward;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use backward::{backward, LossSignal};
pub use checkpoint::{load_checkpoint, load_checkpoint_with_config, save_checkpoint, Checkpoint};
pub use config::{ModelConfig, SearchMode, SearchSpec};
pub use forward::{forward, ForwardTrace};
pub use params::{init_params, ModelParams, ResBlock};
