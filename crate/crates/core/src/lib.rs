//! PPO training on the gridrts tasks with optional action guidance: a main
//! policy learning from the sparse reward is steered, early on, by auxiliary
//! policies trained on shaped rewards.

use std::path::PathBuf;

pub mod agent;
pub mod guidance;
pub mod harness;
pub mod ppo;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{location}: expected `key = value`, got {line:?}")]
    Syntax { location: String, line: String },
    #[error("{location}: unknown setting {key:?}")]
    UnknownKey { key: String, location: String },
    #[error("{location}: bad value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, location: String, reason: String },
    #[error("invalid {key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("conflicting settings: {0}")]
    Conflict(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Num(#[from] numcore::NumError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
