//! Library behind the `flowrag` binary: configuration, manifest-driven
//! pipeline stages, and the retrieval service.

pub mod config;
pub mod error;
pub mod manifest;
pub mod service;
pub mod stages;

pub use config::AppConfig;
pub use error::CliError;
