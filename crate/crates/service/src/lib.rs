//! Screening service: an append-only event log of studies, proposals and
//! grader decisions, the HTTP API over it, and the `drscreen` command line.

pub mod api;
pub mod cli;
pub mod cohort;
pub mod config;
pub mod service;
pub mod sidecar;
pub mod state;
pub mod store;

pub use config::ServiceConfig;
pub use service::{Service, ServiceError};
