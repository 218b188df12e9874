//! HTTP session service. Many human sessions share one calibration stream;
//! each stream commits finalized days in a single total order and persists
//! them as a replayable run log.

pub mod api;
pub mod config;
pub mod error;
pub mod service;
pub mod store;
pub mod task;
pub mod wire;

pub use api::{router, serve};
pub use config::{ServiceConfig, StreamConfig, TaskSpec};
pub use error::ApiError;
pub use service::Service;
