//! Weak-supervision text classification through natural-language learned
//! features: LLM-written yes/no subtask questions, an LLM-labeled sample, a
//! small pair encoder that scores every question, and an interpretable tree
//! on top.

pub mod bsq;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod llm;
pub mod models;
pub mod nllfg;
pub mod pipeline;
pub mod selection;
pub mod util;
pub mod weak_labeler;

pub use error::{Error, Result};
