//! Metrics, explanation rendering and the weak-label audit.

pub mod audit;
pub mod explain;
pub mod metrics;

pub use audit::{audit, AuditReport, AuditSample};
pub use explain::{explanations_markdown, render_explanations, Explanation};
pub use metrics::{score, Confusion, EvalReport};
