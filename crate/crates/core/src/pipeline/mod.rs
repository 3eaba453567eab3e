//! End-to-end run orchestration behind the command-line tool: configuration,
//! checkpoints, staged training, embedding, extraction and evaluation.
//! Everything here runs in `f32`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod plot;
pub mod stego;
pub mod strategy;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use evaluate::{cmd_evaluate, EvaluateReport, EvaluateRequest};
pub use stego::{cmd_embed, cmd_extract, CodecOverrides, EmbedRequest, ExtractRequest, ModelSet};
pub use strategy::StrategyName;
pub use train::{cmd_train, Stage, TrainReport};

/// Scalar type of pipeline models.
pub type P = f32;
