//! Retrieval service. The HTTP layer and the `retrieve` subcommand share
//! one request handler over the same loaded artifacts, so an answer over
//! the wire is the answer an in-process caller gets. Artifacts are loaded
//! once and never mutated; /healthz reports 503 until the load finishes.

use crate::config::AppConfig;
use crate::error::{err, CliError};
use crate::stages::check_service_artifacts;
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use flowrag_core::corpus::{Element, ElementKind};
use flowrag_core::dataset::{raw_text_template, render_raw_text, templates_for_task, TaskId};
use flowrag_core::encoder::{load_model, EncoderModel};
use flowrag_core::retrieval::{
    load_dense_index, Bm25Index, DenseIndex, DenseRetriever, RetrieveError, Retriever,
};
use flowrag_core::synth::read_split_set;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::str::FromStr;
use std::sync::{Arc, RwLock};
use std::time::Instant;

pub struct LoadedService {
    pub model: EncoderModel,
    pub dense: DenseIndex,
    pub bm25: Bm25Index,
}

impl LoadedService {
    pub fn fingerprint_hex(&self) -> String {
        format!("{:016x}", self.model.fingerprint())
    }
}

#[derive(Clone)]
pub struct ServiceState {
    loaded: Arc<RwLock<Option<Arc<LoadedService>>>>,
    auth_token: Option<Arc<str>>,
}

impl ServiceState {
    pub fn new(auth_token: Option<String>) -> Self {
        Self {
            loaded: Arc::new(RwLock::new(None)),
            auth_token: auth_token.map(Arc::from),
        }
    }

    pub fn set_loaded(&self, service: LoadedService) {
        *self.loaded.write().expect("service lock") = Some(Arc::new(service));
    }

    pub fn loaded(&self) -> Option<Arc<LoadedService>> {
        self.loaded.read().expect("service lock").clone()
    }
}

/// Load everything the service queries: the trained model, the dense
/// index for the chosen split, and a BM25 index rebuilt from that split's
/// catalog. All missing artifacts are reported in one diagnostic.
pub fn load_service(cfg: &AppConfig, split: &str) -> Result<LoadedService, CliError> {
    check_service_artifacts(cfg, split)?;
    let model = load_model(&cfg.model_path()).map_err(|e| err("model-io", e))?;
    let dense = load_dense_index(&cfg.index_path(split)).map_err(|e| err("index-io", e))?;
    if dense.model_fingerprint() != model.fingerprint() {
        return Err(CliError::new(
            "index-io",
            format!(
                "index {} was built by model {:016x} but the loaded model is {:016x}; run `flowrag index`",
                cfg.index_path(split).display(),
                dense.model_fingerprint(),
                model.fingerprint()
            ),
        ));
    }
    let set = read_split_set(&cfg.corpus_dir()).map_err(|e| err("corpus-io", e))?;
    let catalog = set
        .catalogs
        .get(split)
        .ok_or_else(|| CliError::new("corpus-io", format!("corpus has no {split} catalog")))?;
    let elements: Vec<Element> = catalog.elements().cloned().collect();
    let bm25 = Bm25Index::build(&elements, cfg.bm25);
    Ok(LoadedService { model, dense, bm25 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub task: String,
    pub text: String,
    pub k: usize,
    #[serde(default = "default_engine")]
    pub engine: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind_filter: Option<String>,
}

fn default_engine() -> String {
    "dense".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveHit {
    pub kind: ElementKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub results: Vec<RetrieveHit>,
    pub engine: String,
    pub model_fingerprint: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedRequest {
    /// Task whose instruction wraps each text; absent or empty embeds the
    /// raw text, the way catalog documents are embedded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embeddings: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestError {
    BadRequest(String),
    UnknownTask(String),
    Internal(String),
}

impl RequestError {
    fn status(&self) -> StatusCode {
        match self {
            RequestError::BadRequest(_) => StatusCode::BAD_REQUEST,
            RequestError::UnknownTask(_) => StatusCode::NOT_FOUND,
            RequestError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            RequestError::BadRequest(_) => "bad-request",
            RequestError::UnknownTask(_) => "unknown-task",
            RequestError::Internal(_) => "internal",
        }
    }

    fn message(&self) -> &str {
        match self {
            RequestError::BadRequest(m)
            | RequestError::UnknownTask(m)
            | RequestError::Internal(m) => m,
        }
    }
}

fn parse_task(raw: &str) -> Result<TaskId, RequestError> {
    TaskId::parse(raw).ok_or_else(|| {
        RequestError::UnknownTask(format!(
            "unknown task {raw:?}; see /v1/tasks for the registered tasks"
        ))
    })
}

fn instruction_for(task: TaskId, text: &str) -> Result<String, RequestError> {
    render_raw_text(task, text).map_err(|e| RequestError::BadRequest(e.to_string()))
}

fn map_retrieve_error(e: RetrieveError) -> RequestError {
    match e {
        RetrieveError::InvalidK => RequestError::BadRequest("k must be at least 1".to_string()),
        other => RequestError::Internal(other.to_string()),
    }
}

/// Answer a retrieve request against loaded artifacts. Also the backend
/// of the `retrieve` subcommand and the golden-equivalence tests.
pub fn handle_retrieve(
    svc: &LoadedService,
    req: &RetrieveRequest,
) -> Result<RetrieveResponse, RequestError> {
    if req.k == 0 {
        return Err(RequestError::BadRequest("k must be at least 1".to_string()));
    }
    let task = parse_task(&req.task)?;
    let kind = match &req.kind_filter {
        Some(raw) => ElementKind::from_str(raw)
            .map_err(|e| RequestError::BadRequest(format!("bad kind_filter: {e}")))?,
        None => task.target_kind(),
    };
    let instruction = instruction_for(task, &req.text)?;
    let start = Instant::now();
    let hits = match req.engine.as_str() {
        "dense" => DenseRetriever {
            index: &svc.dense,
            model: &svc.model,
        }
        .topk(&instruction, req.k, Some(kind)),
        "bm25" => svc.bm25.topk(&instruction, req.k, Some(kind)),
        other => {
            return Err(RequestError::BadRequest(format!(
                "unknown engine {other:?}; expected \"dense\" or \"bm25\""
            )))
        }
    }
    .map_err(map_retrieve_error)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(RetrieveResponse {
        results: hits
            .into_iter()
            .map(|hit| RetrieveHit {
                kind: hit.element.kind,
                name: hit.element.name,
                parent: hit.element.parent,
                score: hit.score,
            })
            .collect(),
        engine: req.engine.clone(),
        model_fingerprint: svc.fingerprint_hex(),
        latency_ms,
    })
}

pub fn handle_embed(
    svc: &LoadedService,
    req: &EmbedRequest,
) -> Result<EmbedResponse, RequestError> {
    let task = match req.task.as_deref() {
        Some(raw) if !raw.is_empty() => Some(parse_task(raw)?),
        _ => None,
    };
    let mut embeddings = Vec::with_capacity(req.texts.len());
    for text in &req.texts {
        let vector = match task {
            Some(task) => svc.model.embed(&instruction_for(task, text)?),
            None => svc.model.embed(text),
        };
        embeddings.push(vector);
    }
    Ok(EmbedResponse { embeddings })
}

/// The /v1/tasks payload: every task with its target kind, raw-text
/// template (when one exists), and registered instruction headers.
pub fn tasks_payload() -> Value {
    let tasks: Vec<Value> = TaskId::ALL
        .iter()
        .map(|&task| {
            json!({
                "task": task.as_str(),
                "target_kind": task.target_kind().as_str(),
                "raw_text_template": raw_text_template(task).map(|t| t.id),
                "templates": templates_for_task(task)
                    .iter()
                    .map(|t| json!({"id": t.id, "header": t.header, "eval_only": t.eval_only}))
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({ "tasks": tasks })
}

type ErrResp = (StatusCode, Json<Value>);

fn error_response(status: StatusCode, code: &str, message: &str) -> ErrResp {
    (status, Json(json!({ "code": code, "message": message })))
}

fn request_error(e: RequestError) -> ErrResp {
    error_response(e.status(), e.code(), e.message())
}

fn authorize(state: &ServiceState, headers: &HeaderMap) -> Result<(), ErrResp> {
    let Some(token) = &state.auth_token else {
        return Ok(());
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok());
    match presented {
        Some(value) if value == format!("Bearer {token}") => Ok(()),
        _ => Err(error_response(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or invalid bearer token",
        )),
    }
}

fn ready(state: &ServiceState) -> Result<Arc<LoadedService>, ErrResp> {
    state.loaded().ok_or_else(|| {
        error_response(
            StatusCode::SERVICE_UNAVAILABLE,
            "loading",
            "artifacts are still loading",
        )
    })
}

fn parse_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ErrResp> {
    match body {
        Ok(Json(value)) => Ok(value),
        Err(rejection) => Err(error_response(
            StatusCode::BAD_REQUEST,
            "bad-request",
            &rejection.body_text(),
        )),
    }
}

async fn healthz(State(state): State<ServiceState>) -> ErrResp {
    match state.loaded() {
        Some(svc) => (
            StatusCode::OK,
            Json(json!({ "status": "ok", "model_fingerprint": svc.fingerprint_hex() })),
        ),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "loading" })),
        ),
    }
}

async fn tasks(
    State(state): State<ServiceState>,
    headers: HeaderMap,
) -> Result<Json<Value>, ErrResp> {
    authorize(&state, &headers)?;
    ready(&state)?;
    Ok(Json(tasks_payload()))
}

async fn embed(
    State(state): State<ServiceState>,
    headers: HeaderMap,
    body: Result<Json<EmbedRequest>, JsonRejection>,
) -> Result<Json<EmbedResponse>, ErrResp> {
    authorize(&state, &headers)?;
    let svc = ready(&state)?;
    let req = parse_body(body)?;
    handle_embed(&svc, &req).map(Json).map_err(request_error)
}

async fn retrieve(
    State(state): State<ServiceState>,
    headers: HeaderMap,
    body: Result<Json<RetrieveRequest>, JsonRejection>,
) -> Result<Json<RetrieveResponse>, ErrResp> {
    authorize(&state, &headers)?;
    let svc = ready(&state)?;
    let req = parse_body(body)?;
    handle_retrieve(&svc, &req).map(Json).map_err(request_error)
}

pub fn build_router(state: ServiceState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/tasks", get(tasks))
        .route("/v1/embed", post(embed))
        .route("/v1/retrieve", post(retrieve))
        .with_state(state)
}

/// Serve an already-built router until the listener closes.
pub async fn serve_router(
    listener: tokio::net::TcpListener,
    state: ServiceState,
) -> Result<(), CliError> {
    axum::serve(listener, build_router(state))
        .await
        .map_err(|e| err("serve", e))
}

/// The `serve` subcommand: bind first, then load artifacts in the
/// background so /healthz reports the loading phase; a failed load is
/// fatal.
pub fn run_serve(cfg: &AppConfig, bind_override: Option<String>) -> Result<(), CliError> {
    let bind = bind_override.unwrap_or_else(|| cfg.service.bind.clone());
    let addr: std::net::SocketAddr = bind
        .parse()
        .map_err(|_| CliError::config(format!("bind {bind:?} is not an address:port")))?;
    let auth_token = match &cfg.service.auth_token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| {
            CliError::config(format!("auth token environment variable {var} is not set"))
        })?),
        None => None,
    };
    let state = ServiceState::new(auth_token);
    let split = cfg.service.split.clone();
    let loader_cfg = cfg.clone();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| err("serve", e))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| err("serve", format!("cannot bind {addr}: {e}")))?;
        tracing::info!(%addr, split = %split, "listening");
        let load_state = state.clone();
        tokio::spawn(async move {
            let result =
                tokio::task::spawn_blocking(move || load_service(&loader_cfg, &split)).await;
            match result {
                Ok(Ok(service)) => {
                    tracing::info!(
                        model_fingerprint = %service.fingerprint_hex(),
                        documents = service.dense.len(),
                        "service ready"
                    );
                    load_state.set_loaded(service);
                }
                Ok(Err(e)) => {
                    eprintln!("{}", e.to_json());
                    std::process::exit(1);
                }
                Err(e) => {
                    eprintln!("{}", CliError::new("serve", e.to_string()).to_json());
                    std::process::exit(1);
                }
            }
        });
        serve_router(listener, state).await
    })
}

/// The `retrieve` subcommand shares the service's handler.
pub fn run_retrieve(
    cfg: &AppConfig,
    req: &RetrieveRequest,
    split: Option<&str>,
) -> Result<RetrieveResponse, CliError> {
    let split = split.unwrap_or(&cfg.service.split);
    let svc = load_service(cfg, split)?;
    handle_retrieve(&svc, req).map_err(|e| CliError::new(
        match e {
            RequestError::BadRequest(_) => "bad-request",
            RequestError::UnknownTask(_) => "unknown-task",
            RequestError::Internal(_) => "internal",
        },
        e.message(),
    ))
}
