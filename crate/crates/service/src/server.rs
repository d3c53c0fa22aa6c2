use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use bpo_core::endpoint::{handle_generate, GenerateRequest, ProviderConfig};
use bpo_core::{BpoError, ModelRegistry};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::{Result, ServiceError};

/// Provider list as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvidersFile {
    pub providers: Vec<ProviderConfig>,
}

impl ProvidersFile {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Read-only state shared by all handlers.
#[derive(Clone, Debug)]
pub struct ServiceState {
    registry: Arc<ModelRegistry>,
    providers: Arc<BTreeMap<String, ProviderConfig>>,
}

impl ServiceState {
    pub fn new(registry: Arc<ModelRegistry>, providers: Vec<ProviderConfig>) -> Result<Self> {
        if providers.is_empty() {
            return Err(ServiceError::NoProviders);
        }
        let mut map = BTreeMap::new();
        for p in providers {
            p.validate(&registry)?;
            if map.contains_key(&p.name) {
                return Err(ServiceError::DuplicateProvider(p.name));
            }
            map.insert(p.name.clone(), p);
        }
        Ok(ServiceState { registry, providers: Arc::new(map) })
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

#[derive(Serialize)]
struct ProviderListing<'a> {
    name: &'a str,
    claimed_model_id: &'a str,
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn error_response(status: StatusCode, msg: String) -> Response {
    json_response(status, &ErrorBody { error: msg })
}

async fn healthz() -> &'static str {
    "ok"
}

async fn list_providers(State(state): State<ServiceState>) -> Response {
    let listing: Vec<ProviderListing> = state
        .providers
        .values()
        .map(|p| ProviderListing { name: &p.name, claimed_model_id: &p.claimed_model_id })
        .collect();
    json_response(StatusCode::OK, &listing)
}

async fn generate(State(state): State<ServiceState>, UrlPath(name): UrlPath<String>, body: Bytes) -> Response {
    let Some(provider) = state.providers.get(&name).cloned() else {
        return error_response(StatusCode::NOT_FOUND, format!("unknown provider {name:?}"));
    };
    let req: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let registry = state.registry.clone();
    let result = tokio::task::spawn_blocking(move || handle_generate(&registry, &provider, &req)).await;
    match result {
        Ok(Ok(resp)) => json_response(StatusCode::OK, &resp),
        Ok(Err(
            e @ (BpoError::InvalidConfig(_)
            | BpoError::UnknownToken(_)
            | BpoError::UnknownConcept(_)
            | BpoError::EmptyPrompt
            | BpoError::PromptTooLong { .. }),
        )) => error_response(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(Err(e)) => {
            log::error!("generate failed: {e}");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal error".into())
        }
        Err(e) => {
            log::error!("generate task failed: {e}");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal error".into())
        }
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/providers", get(list_providers))
        .route("/providers/{name}/v1/generate", post(generate))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve<F>(listener: TcpListener, state: ServiceState, shutdown: F) -> Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// A service running on its own thread and runtime. Dropping it shuts the
/// service down.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServiceHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn provider_url(&self, name: &str) -> String {
        format!("{}/providers/{name}", self.base_url())
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("service thread panicked").into())),
            None => Ok(()),
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on a background thread.
pub fn spawn_background(state: ServiceState, addr: &str) -> Result<ServiceHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let listener = runtime.block_on(TcpListener::bind(addr))?;
    let local = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        runtime.block_on(serve(listener, state, async {
            let _ = rx.await;
        }))
    });
    Ok(ServiceHandle { addr: local, stop: Some(tx), thread: Some(thread) })
}
