//! Offline Q-learning with a Random Ensemble Mixture over small MLPs.

mod bc;
mod checkpoint;
mod mlp;
mod optim;
mod rem;

pub use bc::{clone_behavior, BcConfig, BcReport, BehaviorClassifier};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use mlp::{Dense, ForwardCache, Mlp};
pub use optim::{clip_global_norm, Adam};
pub use rem::{
    greedy_action, greedy_policy, huber, huber_grad, rem_q, sample_alphas, EnsembleLayout, LossOutput, QEnsemble,
    QNetwork, QNetworkCache, TrainConfig, TrainStats,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("non-finite loss {loss} at update {update}")]
    NonFiniteLoss { update: u64, loss: f64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("network expects {expected} inputs, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, AgentError>;
