//! Staged orchestration with a content-hashed run manifest.

pub mod config;
pub mod manifest;
pub mod stages;
pub mod synthetic;

pub use config::PipelineConfig;
pub use manifest::{RunManifest, StageEntry};
pub use stages::{AuditArgs, Pipeline, Stage, StageOutcome, Status};
