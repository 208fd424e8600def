//! HTTP/JSON front end for the engine and the taxi benchmark.
//!
//! | method | path           | body             | reply          |
//! |--------|----------------|------------------|----------------|
//! | GET    | `/health`      |                  | `Health`       |
//! | GET    | `/v1/config`   |                  | `FlintConfig`  |
//! | POST   | `/v1/datasets` | `GenRequest`     | `GenSummary`   |
//! | POST   | `/v1/runs`     | `RunRequest`     | `RunResponse`  |
//! | POST   | `/v1/bench`    | `BenchRequest`   | `BenchReport`  |
//! | POST   | `/v1/explain`  | `ExplainRequest` | `PhysicalPlan` |
//!
//! Errors come back as `ErrorBody` with a 4xx/5xx status. Query work is
//! blocking and runs on the blocking pool; the object store is shared by
//! all requests, queues and function runtimes are per run.

use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;

use flintlet_core::api::{
    BenchRequest, ErrorBody, ExplainRequest, GenRequest, Health, Overrides, RunRequest, RunResponse,
};
use flintlet_core::harness::{
    BenchReport, FlintConfig, GenSummary, Harness, HarnessError, QueryId,
};
use flintlet_core::plan::{PhysicalPlan, PlanError};
use flintlet_core::store::ObjectStore;

#[derive(Clone)]
pub struct AppState {
    store: Arc<ObjectStore>,
    config: Arc<FlintConfig>,
}

impl AppState {
    pub fn new(store: Arc<ObjectStore>, config: FlintConfig) -> Self {
        AppState {
            store,
            config: Arc::new(config),
        }
    }

    fn harness(&self, ov: Overrides) -> Result<Harness, ApiError> {
        let mut cfg = ov.config.unwrap_or_else(|| (*self.config).clone());
        if let Some(input) = ov.input {
            cfg.harness.data = input;
        }
        if let Some(p) = ov.partitions {
            cfg.harness.partitions = p;
        }
        Ok(Harness::with_store(Arc::clone(&self.store), cfg)?)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/config", get(config))
        .route("/v1/datasets", post(generate))
        .route("/v1/runs", post(run))
        .route("/v1/bench", post(bench))
        .route("/v1/explain", post(explain))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: error.to_string(),
                message: message.into(),
            },
        }
    }
}

impl From<HarnessError> for ApiError {
    fn from(e: HarnessError) -> Self {
        use HarnessError as H;
        let (status, code) = match &e {
            H::Config(_) | H::Location(_) => (StatusCode::BAD_REQUEST, "bad_config"),
            H::NoDataset(_) | H::Plan(PlanError::EmptySource { .. }) => {
                (StatusCode::NOT_FOUND, "no_dataset")
            }
            H::Plan(_) => (StatusCode::BAD_REQUEST, "bad_plan"),
            H::Run(_) => (StatusCode::UNPROCESSABLE_ENTITY, "run_failed"),
            H::Store(_) | H::Queue(_) | H::Faas(_) | H::Local(_) | H::Answer(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(message = %self.body.message, "request failed");
        }
        (self.status, Json(self.body)).into_response()
    }
}

type Reply<T> = Result<Json<T>, ApiError>;

fn body<T: DeserializeOwned>(req: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    Ok(req?.0)
}

async fn blocking<T: Serialize + Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Reply<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            e.to_string(),
        )),
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn config(State(state): State<AppState>) -> Json<FlintConfig> {
    Json((*state.config).clone())
}

async fn generate(
    State(state): State<AppState>,
    req: Result<Json<GenRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<GenSummary>), ApiError> {
    let req = body(req)?;
    let Json(summary) = blocking(move || {
        let mut cfg = (*state.config).clone();
        cfg.harness.data = req.out;
        cfg.harness.records = req.records;
        cfg.harness.seed = req.seed;
        cfg.harness.parts = req.parts;
        let h = Harness::with_store(Arc::clone(&state.store), cfg)?;
        Ok(h.generate()?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn run(
    State(state): State<AppState>,
    req: Result<Json<RunRequest>, JsonRejection>,
) -> Reply<RunResponse> {
    let req = body(req)?;
    blocking(move || Ok(state.harness(req.overrides)?.run(req.query, req.mode)?)).await
}

async fn bench(
    State(state): State<AppState>,
    req: Result<Json<BenchRequest>, JsonRejection>,
) -> Reply<BenchReport> {
    let req = body(req)?;
    blocking(move || {
        let queries = if req.queries.is_empty() {
            QueryId::ALL.to_vec()
        } else {
            req.queries
        };
        Ok(state.harness(req.overrides)?.bench(&queries)?)
    })
    .await
}

async fn explain(
    State(state): State<AppState>,
    req: Result<Json<ExplainRequest>, JsonRejection>,
) -> Reply<PhysicalPlan> {
    let req = body(req)?;
    blocking(move || Ok(state.harness(req.overrides)?.plan(req.query)?)).await
}
