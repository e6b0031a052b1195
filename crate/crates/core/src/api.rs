//! HTTP front end for the platform: the developer interface (endpoint
//! registration, catalogs, credentials) and the execution API (invoke,
//! status, cancel, results), plus operator routes for the simulator clock,
//! the advisor, and the bundled exemplar fixtures. Requests and responses
//! are JSON; errors are `{code, message, detail}` with conventional status
//! codes (400 schema, 401 token, 404 unknown, 409 state conflict).

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::catalog::{CatalogError, CatalogKind};
use crate::exemplars::{self, EsmParams, RomParams, UcParams};
use crate::platform::{Platform, PlatformError};
use crate::vault::{CredentialKind, VaultError};

// ---------------------------------------------------------------------------
// Error envelope

pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl ToString) -> Self {
        ApiError { status, code, message: message.to_string(), detail: Value::Null }
    }

    fn bad_request(code: &'static str, message: impl ToString) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"code": self.code, "message": self.message, "detail": self.detail});
        (self.status, Json(body)).into_response()
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        use PlatformError::*;
        let (status, code) = match &e {
            SchemaMismatch { .. } => (StatusCode::BAD_REQUEST, "SCHEMA_MISMATCH"),
            BadDescriptor(_) => (StatusCode::BAD_REQUEST, "BAD_DESCRIPTOR"),
            MissingCredential(_) => (StatusCode::UNAUTHORIZED, "MISSING_CREDENTIAL"),
            Auth(_) => (StatusCode::UNAUTHORIZED, "AUTH_FAILED"),
            UnknownEndpoint(_) => (StatusCode::NOT_FOUND, "UNKNOWN_ENDPOINT"),
            UnknownInvocation(_) => (StatusCode::NOT_FOUND, "UNKNOWN_INVOCATION"),
            Catalog(CatalogError::NotFound(_)) => (StatusCode::NOT_FOUND, "NOT_FOUND"),
            Catalog(CatalogError::InvalidPayload { .. }) | Catalog(CatalogError::BadRef(_)) => {
                (StatusCode::BAD_REQUEST, "INVALID_PAYLOAD")
            }
            NotFinished(_) => (StatusCode::CONFLICT, "NOT_FINISHED"),
            StateConflict(_) => (StatusCode::CONFLICT, "STATE_CONFLICT"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        ApiError::new(status, code, e)
    }
}

impl From<VaultError> for ApiError {
    fn from(e: VaultError) -> Self {
        use VaultError::*;
        let (status, code) = match &e {
            UnknownSite(_) => (StatusCode::NOT_FOUND, "UNKNOWN_SITE"),
            MissingCredential(_) => (StatusCode::UNAUTHORIZED, "MISSING_CREDENTIAL"),
            Expired | Revoked | OutOfScope(_) | UnknownToken => (StatusCode::UNAUTHORIZED, "AUTH_FAILED"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        ApiError::new(status, code, e)
    }
}

impl From<CatalogError> for ApiError {
    fn from(e: CatalogError) -> Self {
        ApiError::from(PlatformError::Catalog(e))
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

/// Runs a blocking platform call off the async worker threads (platform
/// operations may pump the virtual clock under a mutex).
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e))?
}

fn to_json<T: serde::Serialize>(v: T) -> Json<Value> {
    Json(serde_json::to_value(v).expect("response encodes"))
}

// ---------------------------------------------------------------------------
// Handlers

async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

#[derive(Deserialize)]
struct RegisterEndpointBody {
    workflow_ref: String,
    #[serde(default = "default_developer")]
    developer: String,
}

fn default_developer() -> String {
    "anonymous".into()
}

async fn register_endpoint(State(p): State<Arc<Platform>>, Json(body): Json<RegisterEndpointBody>) -> ApiResult {
    let id = blocking(move || Ok(p.register_endpoint(&body.workflow_ref, &body.developer)?)).await?;
    Ok(Json(json!({"endpoint_id": id})))
}

async fn list_endpoints(State(p): State<Arc<Platform>>) -> ApiResult {
    Ok(to_json(p.endpoints()))
}

#[derive(Deserialize)]
struct InvokeBody {
    #[serde(default)]
    inputs: BTreeMap<String, Value>,
    token: String,
}

async fn invoke(
    State(p): State<Arc<Platform>>,
    Path(id): Path<String>,
    Json(body): Json<InvokeBody>,
) -> ApiResult {
    let inv = blocking(move || Ok(p.invoke(&id, body.inputs, &body.token)?)).await?;
    Ok(Json(json!({"invocation_id": inv})))
}

async fn get_status(State(p): State<Arc<Platform>>, Path(id): Path<String>) -> ApiResult {
    Ok(to_json(p.get_status(&id).map_err(ApiError::from)?))
}

async fn cancel(State(p): State<Arc<Platform>>, Path(id): Path<String>) -> ApiResult {
    blocking(move || {
        p.cancel(&id)?;
        Ok(())
    })
    .await?;
    Ok(Json(json!({"cancelled": true})))
}

async fn results(State(p): State<Arc<Platform>>, Path(id): Path<String>) -> ApiResult {
    Ok(to_json(p.fetch_results(&id).map_err(ApiError::from)?))
}

#[derive(Deserialize)]
struct CredentialBody {
    user: String,
    site: String,
    #[serde(default)]
    kind: Option<String>,
    /// Secret material; accepted, stored in the vault, never echoed back.
    material: String,
}

async fn register_credential(State(p): State<Arc<Platform>>, Json(body): Json<CredentialBody>) -> ApiResult {
    let kind = match body.kind.as_deref() {
        None | Some("password") => CredentialKind::Password,
        Some("keypair") => CredentialKind::Keypair,
        Some(other) => return Err(ApiError::bad_request("INVALID_PAYLOAD", format!("unknown credential kind '{other}'"))),
    };
    let id = p.vault.store_credential(&body.user, &body.site, kind, body.material.into_bytes())?;
    Ok(Json(json!({"credential_id": id})))
}

#[derive(Deserialize)]
struct KeypairBody {
    user: String,
    site: String,
}

async fn generate_keypair(State(p): State<Arc<Platform>>, Json(body): Json<KeypairBody>) -> ApiResult {
    blocking(move || {
        let (id, public) = p.vault.generate_keypair(&body.user, &body.site)?;
        // Key management includes provisioning: the public part is pushed to
        // the target site so jobs submitted with this credential pass its
        // authorized-keys check.
        p.world()
            .with(|w| w.cluster.authorize_key(&body.site, &public))
            .map_err(PlatformError::from)?;
        Ok(Json(json!({"credential_id": id, "public_key": public})))
    })
    .await
}

#[derive(Deserialize)]
struct TokenBody {
    user: String,
    scope: Vec<String>,
    #[serde(default = "default_ttl")]
    ttl_s: u64,
}

fn default_ttl() -> u64 {
    3600
}

async fn mint_token(State(p): State<Arc<Platform>>, Json(body): Json<TokenBody>) -> ApiResult {
    let token = p.vault.mint_token(&body.user, body.scope, body.ttl_s)?;
    Ok(to_json(token))
}

fn parse_kind(kind: &str) -> Result<CatalogKind, ApiError> {
    CatalogKind::parse(kind)
        .ok_or_else(|| ApiError::bad_request("INVALID_PAYLOAD", format!("unknown catalog kind '{kind}'")))
}

async fn catalog_list(State(p): State<Arc<Platform>>, Path(kind): Path<String>) -> ApiResult {
    let kind = parse_kind(&kind)?;
    Ok(to_json(p.catalogs.list_names(kind)))
}

async fn catalog_get(State(p): State<Arc<Platform>>, Path((kind, reference)): Path<(String, String)>) -> ApiResult {
    let kind = parse_kind(&kind)?;
    Ok(to_json(p.catalogs.get_entry(kind, &reference)?))
}

async fn catalog_put(
    State(p): State<Arc<Platform>>,
    Path((kind, name)): Path<(String, String)>,
    Json(payload): Json<Value>,
) -> ApiResult {
    let kind = parse_kind(&kind)?;
    let (version, digest) = p.catalogs.put_entry(kind, &name, payload)?;
    Ok(Json(json!({
        "name": name,
        "version": version,
        "digest": digest,
        "reference": format!("{name}@{version}"),
    })))
}

#[derive(Deserialize)]
struct AdvanceBody {
    seconds: u64,
}

async fn sim_advance(State(p): State<Arc<Platform>>, Json(body): Json<AdvanceBody>) -> ApiResult {
    let now = blocking(move || {
        Ok(p.world().with(|w| {
            w.advance(body.seconds * 1000);
            w.now()
        }))
    })
    .await?;
    Ok(Json(json!({"now_ms": now})))
}

async fn sim_trace(State(p): State<Arc<Platform>>) -> ApiResult {
    let (hash, events) =
        p.world().with(|w| (w.cluster.trace_hash(), serde_json::to_value(&w.cluster.trace).expect("encodes")));
    Ok(Json(json!({"trace_hash": hash, "events": events})))
}

async fn advisor_report(State(p): State<Arc<Platform>>, Path(workflow): Path<String>) -> ApiResult {
    let records = p.advisor.records_for_workflow(&workflow);
    let mut per_task: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for r in &records {
        let e = per_task.entry(r.task.clone()).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += r.duration_s;
        e.2 += r.node_seconds;
    }
    let tasks: Vec<Value> = per_task
        .into_iter()
        .map(|(task, (n, dur, ns))| {
            json!({
                "task": task,
                "records": n,
                "mean_duration_s": dur / n as f64,
                "total_node_seconds": ns,
            })
        })
        .collect();
    Ok(Json(json!({"workflow": workflow, "records": records.len(), "tasks": tasks})))
}

async fn run_exemplar(Path(name): Path<String>, body: Option<Json<Value>>) -> ApiResult {
    let params = body.map(|Json(v)| v).unwrap_or(Value::Null);
    blocking(move || {
        let f64p = |key: &str, d: f64| params.get(key).and_then(Value::as_f64).unwrap_or(d);
        let u64p = |key: &str, d: u64| params.get(key).and_then(Value::as_u64).unwrap_or(d);
        let (report, text) = match name.as_str() {
            "rom" => {
                let d = RomParams::default();
                let p = RomParams {
                    dofs: u64p("dofs", d.dofs as u64) as usize,
                    steps: u64p("steps", d.steps as u64) as usize,
                    rank: u64p("rank", d.rank as u64) as usize,
                    tolerance: f64p("tolerance", d.tolerance),
                    modes: u64p("modes", d.modes as u64) as usize,
                    seed: u64p("seed", d.seed),
                    inject_failures: u64p("inject_failures", 0) as u32,
                };
                let r = exemplars::run_rom_pipeline(&p)
                    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "EXEMPLAR_FAILED", e))?;
                (serde_json::to_value(&r).expect("encodes"), r.text())
            }
            "esm" => {
                let d = EsmParams::default();
                let p = EsmParams {
                    members: u64p("members", d.members as u64) as usize,
                    threshold: params.get("threshold").and_then(Value::as_f64).or(d.threshold),
                    window: u64p("window", d.window as u64) as usize,
                    ..d
                };
                let r = exemplars::run_ensemble_pruning(&p)
                    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "EXEMPLAR_FAILED", e))?;
                (serde_json::to_value(&r).expect("encodes"), r.text())
            }
            "uc" => {
                let d = UcParams::default();
                let p = UcParams {
                    members: u64p("members", d.members as u64) as usize,
                    member_s: u64p("member_s", d.member_s),
                    deadline_s: u64p("deadline_s", d.deadline_s),
                    min_nodes: u64p("min_nodes", d.min_nodes as u64) as u32,
                    max_nodes: u64p("max_nodes", d.max_nodes as u64) as u32,
                    seed: u64p("seed", d.seed),
                };
                let r = exemplars::run_urgent_ensemble(&p)
                    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "EXEMPLAR_FAILED", e))?;
                (serde_json::to_value(&r).expect("encodes"), r.text())
            }
            other => {
                return Err(ApiError::new(
                    StatusCode::NOT_FOUND,
                    "NOT_FOUND",
                    format!("unknown exemplar '{other}' (expected rom, esm, or uc)"),
                ))
            }
        };
        Ok(Json(json!({"report": report, "text": text})))
    })
    .await
}

// ---------------------------------------------------------------------------
// Server

pub fn router(platform: Arc<Platform>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/v1/endpoints", post(register_endpoint).get(list_endpoints))
        .route("/api/v1/endpoints/{id}/invoke", post(invoke))
        .route("/api/v1/invocations/{id}", get(get_status))
        .route("/api/v1/invocations/{id}/cancel", post(cancel))
        .route("/api/v1/invocations/{id}/results", get(results))
        .route("/api/v1/credentials", post(register_credential))
        .route("/api/v1/credentials/keypair", post(generate_keypair))
        .route("/api/v1/credentials/token", post(mint_token))
        .route("/api/v1/catalog/{kind}", get(catalog_list))
        .route("/api/v1/catalog/{kind}/{reference}", get(catalog_get).post(catalog_put))
        .route("/api/v1/sim/advance", post(sim_advance))
        .route("/api/v1/sim/trace", get(sim_trace))
        .route("/api/v1/advisor/report/{workflow}", get(advisor_report))
        .route("/api/v1/exemplars/{name}", post(run_exemplar))
        .with_state(platform)
}

/// A running HTTP server on its own thread; dropped or shut down, it stops
/// accepting and joins the runtime.
pub struct ApiServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ApiServer {
    /// Binds and serves; `addr` like "127.0.0.1:0" (port 0 picks a free one).
    pub fn bind(platform: Arc<Platform>, addr: &str) -> std::io::Result<ApiServer> {
        let addr = addr.to_string();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel::<std::io::Result<SocketAddr>>();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::bind(&addr).await {
                    Ok(l) => l,
                    Err(e) => {
                        let _ = addr_tx.send(Err(e));
                        return;
                    }
                };
                let local = listener.local_addr().expect("bound socket has an address");
                let _ = addr_tx.send(Ok(local));
                let app = router(platform);
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = stop_rx.await;
                });
                if let Err(e) = serve.await {
                    log::error!("api server stopped: {e}");
                }
            });
        });
        let addr = addr_rx.recv().map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::Other, "server thread exited before binding")
        })??;
        Ok(ApiServer { addr, shutdown: Some(stop_tx), thread: Some(thread) })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        self.stop();
    }
}
