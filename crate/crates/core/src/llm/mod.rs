//! Prompt rendering and the cached LLM gateway.

pub mod gateway;
pub mod hosted;
pub mod mock;
pub mod template;

pub use gateway::{
    cache_key, BackendError, CompletionParams, Gateway, GatewayStats, LlmBackend, LlmResponse, RetryPolicy,
};
pub use hosted::HostedBackend;
pub use mock::{MockBackend, MockSpec};
pub use template::{bindings, Message, PromptTemplate, Rendered, Role};
