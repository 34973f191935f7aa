//! Stage configuration, losses, optimisation and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod reward;
pub mod trainer;

pub use checkpoint::{config_hash, Checkpoint, HashCheck};
pub use config::{Stage, StageConfig};
pub use optim::Adam;
pub use reward::{RewardBundle, RewardFunction, RewardRow};
pub use trainer::{LogRecord, TrainingSample};
