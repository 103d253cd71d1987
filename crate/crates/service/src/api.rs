//! HTTP+JSON surface over a store.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use branchvis_core::query::{
    sample_point, sample_window, Field, SampledWindow, SpaceTimePoint, StoreSource, WindowSpec,
};
use branchvis_core::solver::{GridSpec, SolverParams};
use branchvis_core::store::{
    Locality, ParamPatch, ReuseStats, RunId, RunRecord, RunStatus, Store, DEFAULT_CHECKPOINT_EVERY,
    PARAM_FIELDS,
};

use crate::bench::{parse_schemes, parse_workers, run_bench, BenchOutput};
use crate::error::ApiError;

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    store: Arc<Store>,
    /// Serializes run and branch creation.
    writes: tokio::sync::Mutex<()>,
}

pub fn router(store: Arc<Store>) -> Router {
    let state = Arc::new(AppState {
        store,
        writes: tokio::sync::Mutex::new(()),
    });
    Router::new()
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(run_status))
        .route("/runs/{id}/branches", post(create_branch))
        .route("/runs/{id}/frames/{t}", get(frame))
        .route("/runs/{id}/deltas", get(deltas))
        .route("/query/point", post(query_point))
        .route("/query/window", post(query_window))
        .route("/bench", get(bench))
        .route("/params/schema", get(params_schema))
        .with_state(state)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(
            crate::error::ErrorCode::Corruption,
            format!("worker panicked: {e}"),
        )
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunNode {
    pub id: RunId,
    pub parent: Option<RunId>,
    pub t_branch: u64,
    pub n_steps: u64,
    pub status: RunStatus,
    pub locality: Locality,
    pub patch: ParamPatch,
    pub available_until: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_at: Option<u64>,
    pub children: Vec<RunId>,
}

impl RunNode {
    fn new(rec: &RunRecord, all: &[RunRecord]) -> Self {
        RunNode {
            id: rec.id.clone(),
            parent: rec.parent.clone(),
            t_branch: rec.t_branch,
            n_steps: rec.n_steps,
            status: rec.status,
            locality: rec.patch.locality(),
            patch: rec.patch.clone(),
            available_until: rec.available_until(),
            failed_at: rec.failed_at,
            children: all
                .iter()
                .filter(|r| r.parent.as_ref() == Some(&rec.id))
                .map(|r| r.id.clone())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTree {
    pub runs: Vec<RunNode>,
}

async fn list_runs(State(app): State<Arc<AppState>>) -> Json<RunTree> {
    let all = app.store.runs();
    Json(RunTree {
        runs: all.iter().map(|r| RunNode::new(r, &all)).collect(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRun {
    pub grid: GridSpec,
    #[serde(default)]
    pub params: Option<SolverParams>,
    pub n_steps: u64,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

fn spawn_simulation(store: Arc<Store>, id: RunId) {
    tokio::task::spawn_blocking(move || {
        // Failures are recorded on the run itself.
        let _ = store.simulate(&id);
    });
}

async fn create_run(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateRun = parse_body(&body)?;
    req.grid
        .validate()
        .map_err(|e| ApiError::bad_request(e.to_string()).with_detail("grid"))?;
    let id = {
        let _guard = app.writes.lock().await;
        app.store.register_root(
            req.grid,
            req.params.unwrap_or_default(),
            req.n_steps,
            req.checkpoint_every.unwrap_or(DEFAULT_CHECKPOINT_EVERY),
        )?
    };
    spawn_simulation(Arc::clone(&app.store), id.clone());
    let all = app.store.runs();
    let rec = app.store.run(&id)?;
    Ok((StatusCode::CREATED, Json(RunNode::new(&rec, &all))).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateBranch {
    pub t_branch: u64,
    #[serde(default)]
    pub patch: Value,
    #[serde(default)]
    pub n_steps: Option<u64>,
}

async fn create_branch(
    State(app): State<Arc<AppState>>,
    Path(parent): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: CreateBranch = parse_body(&body)?;
    let patch = match req.patch {
        Value::Null => ParamPatch::default(),
        v => ParamPatch::from_json(v).map_err(|e| ApiError::from(e).with_detail("patch"))?,
    };
    let parent = RunId(parent);
    let id = {
        let _guard = app.writes.lock().await;
        app.store
            .register_branch(&parent, req.t_branch, patch, req.n_steps)?
    };
    spawn_simulation(Arc::clone(&app.store), id.clone());
    let all = app.store.runs();
    let rec = app.store.run(&id)?;
    Ok((StatusCode::CREATED, Json(RunNode::new(&rec, &all))).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatusView {
    pub node: RunNode,
    pub grid: GridSpec,
    pub params: SolverParams,
    pub checkpoints: Vec<u64>,
    /// Present once the run is complete.
    pub stats: Option<ReuseStats>,
}

async fn run_status(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<RunStatusView>> {
    let id = RunId(id);
    let rec = app.store.run(&id)?;
    let all = app.store.runs();
    let stats = match rec.status {
        RunStatus::Complete => Some(app.store.stats(&id)?),
        _ => None,
    };
    Ok(Json(RunStatusView {
        node: RunNode::new(&rec, &all),
        params: app.store.effective_params(&id)?,
        grid: rec.grid,
        checkpoints: rec.checkpoints,
        stats,
    }))
}

fn etag(id: &str) -> String {
    format!("\"{id}\"")
}

async fn frame(
    State(app): State<Arc<AppState>>,
    Path((id, t)): Path<(String, u64)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let store = Arc::clone(&app.store);
    let (chunk, bytes) = blocking(move || Ok(store.frame_chunk(&RunId(id), t)?)).await?;
    let tag = etag(&chunk.0);
    let cached = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == tag));
    if cached {
        return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, tag)]).into_response());
    }
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::ETAG, tag),
            (
                header::CACHE_CONTROL,
                "public, max-age=31536000, immutable".to_string(),
            ),
        ],
        bytes,
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
pub struct DeltaRange {
    pub from: u64,
    pub to: u64,
}

async fn deltas(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(range): Query<DeltaRange>,
) -> ApiResult<Response> {
    let store = Arc::clone(&app.store);
    let chunks =
        blocking(move || Ok(store.delta_chunks(&RunId(id), range.from, range.to)?)).await?;
    let count = chunks.len();
    let body: Vec<u8> = chunks.into_iter().flat_map(|(_, b)| b).collect();
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (
                header::HeaderName::from_static("x-chunk-count"),
                count.to_string(),
            ),
        ],
        body,
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointQuery {
    pub run: RunId,
    pub point: SpaceTimePoint,
    #[serde(default = "default_field")]
    pub field: Field,
}

fn default_field() -> Field {
    Field::Scalar
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnswer {
    pub run: RunId,
    pub point: SpaceTimePoint,
    pub field: Field,
    pub value: f64,
}

async fn query_point(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<Json<PointAnswer>> {
    let q: PointQuery = parse_body(&body)?;
    let store = Arc::clone(&app.store);
    blocking(move || {
        let src = StoreSource::new(&store, &q.run)?;
        let value = sample_point(&src, q.point, q.field)?;
        Ok(Json(PointAnswer {
            run: q.run,
            point: q.point,
            field: q.field,
            value,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowQuery {
    pub run: RunId,
    pub spec: WindowSpec,
    pub t: u64,
}

async fn query_window(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<Json<SampledWindow>> {
    let q: WindowQuery = parse_body(&body)?;
    let store = Arc::clone(&app.store);
    blocking(move || {
        let src = StoreSource::new(&store, &q.run)?;
        let grid = store.run(&q.run)?.grid;
        let strata = store.strata_for(&grid);
        Ok(Json(sample_window(&src, &strata, q.spec, q.t)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct BenchQuery {
    pub workload: String,
    #[serde(default)]
    pub schemes: Option<String>,
    #[serde(default)]
    pub workers: Option<String>,
}

pub const DEFAULT_SCHEMES: &str = "sequential,pipeline,parallel:2,expanding";

async fn bench(
    State(app): State<Arc<AppState>>,
    Query(q): Query<BenchQuery>,
) -> ApiResult<Json<BenchOutput>> {
    if q.workload.contains(':') && q.workload.starts_with("branchsim") {
        return Err(ApiError::bad_request(
            "branchsim over HTTP uses the served store; drop the path",
        )
        .with_detail("workload"));
    }
    let schemes = parse_schemes(q.schemes.as_deref().unwrap_or(DEFAULT_SCHEMES))?;
    let workers = parse_workers(q.workers.as_deref().unwrap_or("4"))?;
    let runs = app.store.runs();
    blocking(move || {
        Ok(Json(run_bench(
            &q.workload,
            &schemes,
            &workers,
            Some(&runs),
        )?))
    })
    .await
}

/// Field names, types and defaults accepted in a branch patch.
pub fn params_schema_json() -> Value {
    let d = SolverParams::default();
    let types = [
        ("dt", "number", json!(d.dt)),
        ("diff", "number", json!(d.diff)),
        ("inflow_amp", "number", json!(d.inflow_amp)),
        ("inflow_period", "number", json!(d.inflow_period)),
        ("source_mask", "array of [i, j]", json!(d.source_mask)),
        ("source_rate", "number", json!(d.source_rate)),
        (
            "velocity",
            "{kind: still|uniform|channel, magnitude: number}",
            json!(d.velocity),
        ),
    ];
    debug_assert_eq!(types.len(), PARAM_FIELDS.len());
    let fields: Vec<Value> = types
        .iter()
        .map(|(name, ty, default)| {
            let locality = if *name == "source_mask" {
                "local"
            } else {
                "global"
            };
            json!({"name": name, "type": ty, "default": default, "locality": locality})
        })
        .collect();
    json!({ "fields": fields })
}

async fn params_schema() -> Json<Value> {
    Json(params_schema_json())
}
