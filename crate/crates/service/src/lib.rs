//! HTTP front for simulated providers, and the black-box client users call
//! it with.
//!
//! One process hosts any number of providers under
//! `/providers/{name}/v1/generate`. A provider may claim one model and serve
//! another; nothing in a response, header or error reveals which model
//! actually ran, apart from the proxy vectors themselves.

mod client;
mod server;

pub use client::{HttpEndpoint, DEFAULT_TIMEOUT};
pub use server::{router, serve, shutdown_signal, spawn_background, ProvidersFile, ServiceHandle, ServiceState};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] bpo_core::BpoError),
    #[error("duplicate provider name {0:?}")]
    DuplicateProvider(String),
    #[error("no providers configured")]
    NoProviders,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad providers file: {0}")]
    Config(#[from] serde_json::Error),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;
