//! HTTP API over a [`ControlPlane`].
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/apply` | body is a manifest file |
//! | GET | `/{kind}s`, `/{kind}s/{name}` | listing, single resource |
//! | DELETE | `/{kind}s/{name}` | |
//! | GET | `/describe/{name}` | |
//! | GET | `/streams/{name}/metrics` | |
//! | GET | `/instances`, `/instances/{id}[/metrics\|/health\|/logs]` | |
//! | GET/POST | `/nodes` | list, register |
//! | PUT | `/nodes/{id}` | heartbeat |
//! | GET | `/conditions` | |
//!
//! Errors are `{"error": {"code": ..., "message": ...}}` with 400, 404, 409
//! or 500.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use datax_core::scheduler::NodeRecord;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::kind::Kind;
use crate::service::{ControlPlane, ServiceError};

type Shared = Arc<ControlPlane>;

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut body = json!({"error": {"code": self.0.code(), "message": self.0.to_string()}});
        if let ServiceError::Parse(p) = &self.0 {
            body["error"]["document"] = json!(p.document);
            body["error"]["line"] = json!(p.line);
            body["error"]["column"] = json!(p.column);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn kind_of(segment: &str) -> ApiResult<Kind> {
    segment
        .strip_suffix('s')
        .and_then(Kind::parse_loose)
        .filter(|k| k.plural() == segment)
        .ok_or_else(|| {
            ApiError(ServiceError::NotFound {
                kind: "collection".into(),
                name: segment.to_string(),
            })
        })
}

/// Runs a blocking control-plane call off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::Internal(e.to_string())))?
        .map_err(ApiError)
}

async fn apply(State(cp): State<Shared>, body: String) -> ApiResult<Json<Value>> {
    let report = blocking(move || cp.apply_text(&body)).await?;
    Ok(Json(serde_json::to_value(report).expect("reports serialize")))
}

async fn list(State(cp): State<Shared>, Path(collection): Path<String>) -> ApiResult<Json<Value>> {
    let kind = kind_of(&collection)?;
    Ok(Json(Value::Array(cp.list(kind))))
}

async fn get_one(State(cp): State<Shared>, Path((collection, name)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let kind = kind_of(&collection)?;
    Ok(Json(cp.get(kind, &name)?))
}

async fn delete_one(State(cp): State<Shared>, Path((collection, name)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let kind = kind_of(&collection)?;
    blocking(move || cp.delete(kind, &name)).await?;
    Ok(Json(json!({"deleted": true})))
}

async fn describe(State(cp): State<Shared>, Path(name): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(cp.describe(&name)?))
}

async fn stream_metrics(State(cp): State<Shared>, Path(name): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(cp.stream_metrics(&name)?))
}

async fn instances(State(cp): State<Shared>) -> Json<Value> {
    Json(serde_json::to_value(cp.instances()).expect("summaries serialize"))
}

async fn instance(State(cp): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(serde_json::to_value(cp.instance(&id)?).expect("summaries serialize")))
}

async fn instance_metrics(State(cp): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(serde_json::to_value(cp.instance_metrics(&id)?).expect("metrics serialize")))
}

async fn instance_health(State(cp): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let summary = cp.instance(&id)?;
    Ok(Json(json!({"instance_id": id, "state": summary.state, "reason": summary.reason})))
}

async fn instance_logs(State(cp): State<Shared>, Path(id): Path<String>) -> ApiResult<String> {
    Ok(cp.instance_logs(&id)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRegistration {
    node_id: String,
    #[serde(default)]
    address: String,
    capacity: u32,
}

async fn register_node(State(cp): State<Shared>, Json(reg): Json<NodeRegistration>) -> (StatusCode, Json<Value>) {
    let record = NodeRecord::new(reg.node_id, reg.address, reg.capacity, 0);
    cp.controller().register_node(record.clone());
    (StatusCode::CREATED, Json(json!({"node_id": record.node_id})))
}

async fn heartbeat(State(cp): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    cp.controller().heartbeat(&id).map_err(|_| {
        ApiError(ServiceError::NotFound {
            kind: "node".into(),
            name: id.clone(),
        })
    })?;
    Ok(Json(json!({"node_id": id})))
}

async fn nodes(State(cp): State<Shared>) -> Json<Value> {
    Json(serde_json::to_value(cp.controller().nodes()).expect("nodes serialize"))
}

async fn conditions(State(cp): State<Shared>) -> Json<Value> {
    Json(serde_json::to_value(cp.controller().conditions()).expect("conditions serialize"))
}

pub fn router(cp: Shared) -> Router {
    Router::new()
        .route("/apply", post(apply))
        .route("/describe/{name}", get(describe))
        .route("/streams/{name}/metrics", get(stream_metrics))
        .route("/instances", get(instances))
        .route("/instances/{id}", get(instance))
        .route("/instances/{id}/metrics", get(instance_metrics))
        .route("/instances/{id}/health", get(instance_health))
        .route("/instances/{id}/logs", get(instance_logs))
        .route("/nodes", get(nodes).post(register_node))
        .route("/nodes/{id}", put(heartbeat))
        .route("/conditions", get(conditions))
        .route("/{collection}", get(list))
        .route("/{collection}/{name}", get(get_one).delete(delete_one))
        .with_state(cp)
}

/// A server running on a background thread with its own runtime.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` and serves in the background until the handle drops.
pub fn spawn(cp: Shared, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let thread = std::thread::Builder::new().name("http".into()).spawn(move || {
        runtime.block_on(async move {
            let listener = TcpListener::from_std(std_listener).expect("listener converts");
            let _ = axum::serve(listener, router(cp))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    })?;
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves in the foreground until Ctrl-C.
pub fn serve_forever(cp: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        axum::serve(listener, router(cp))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
