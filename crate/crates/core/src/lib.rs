//! Flintlet: staged dataflow queries executed as short-lived function
//! invocations, with shuffles carried over an at-least-once message queue.

pub mod api;
pub mod cost;
pub mod executor;
pub mod faas;
pub mod functions;
pub mod harness;
pub mod plan;
pub mod queue;
pub mod record;
pub mod scheduler;
pub mod store;
