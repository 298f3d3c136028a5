//! HTTP service, model registry and command-line entry points for the
//! triage engine.

pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod registry;
pub mod service;

pub use config::Config;
pub use error::{ApiError, ErrorCode};
pub use registry::ModelRegistry;
pub use service::Service;
