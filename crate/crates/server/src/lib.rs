//! HTTP job service and command-line front end for the `livestyle` pipelines.

pub mod cli;
pub mod engine;
pub mod service;

pub use engine::{Engine, EngineError, JobParams, ModelKind};
pub use service::{router, serve, JobService, ServiceConfig};
