//! HTTP facade over fit artifacts: upload datasets, launch fits in the
//! background, and recompute breakpoint posteriors from cached draws.
//!
//! Everything lives under one data directory. Datasets and fits are
//! content-addressed, so identical uploads and identical fit requests map to
//! the same ids, and every response is a pure function of stored files.

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bpcal_core::artifact::{fit_id, BreakpointReport, FitArtifact, PlotData};
use bpcal_core::breakpoints::{analyze_samples, SearchRange};
use bpcal_core::data::{AssayDataset, MicBreakpoints, DEFAULT_SIGMA_D, DEFAULT_SIGMA_M};
use bpcal_core::sampler::{posterior_summary, run_chain, ChainTrace, ModelKind, PosteriorSummary, SamplerConfig};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub id: String,
    pub dataset_id: String,
    pub dataset_name: String,
    pub model: ModelKind,
    pub status: FitStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A completed fit loaded into memory.
struct LoadedFit {
    artifact: FitArtifact,
    trace: ChainTrace,
    data: AssayDataset,
}

struct Inner {
    data_dir: PathBuf,
    records: Mutex<HashMap<String, FitRecord>>,
    loaded: Mutex<HashMap<String, Arc<LoadedFit>>>,
    workers: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Serialize, Deserialize)]
struct StoredDataset {
    name: String,
    sigma_m: f64,
    sigma_d: f64,
    csv: String,
}

impl AppState {
    /// Open (or create) a data directory and register the fits already in it.
    pub fn open(data_dir: impl Into<PathBuf>, jobs: usize) -> std::io::Result<Self> {
        let data_dir = data_dir.into();
        fs::create_dir_all(data_dir.join("datasets"))?;
        fs::create_dir_all(data_dir.join("fits"))?;
        let mut records = HashMap::new();
        for entry in fs::read_dir(data_dir.join("fits"))? {
            let path = entry?.path();
            let Ok(bytes) = fs::read(path.join("fit.json")) else { continue };
            let Ok(art) = serde_json::from_slice::<FitArtifact>(&bytes) else { continue };
            records.insert(
                art.fit_id.clone(),
                FitRecord {
                    id: art.fit_id.clone(),
                    dataset_id: art.dataset_digest.clone(),
                    dataset_name: art.dataset_name.clone(),
                    model: art.config.model,
                    status: FitStatus::Done,
                    error: None,
                },
            );
        }
        Ok(Self(Arc::new(Inner {
            data_dir,
            records: Mutex::new(records),
            loaded: Mutex::new(HashMap::new()),
            workers: Arc::new(Semaphore::new(jobs.max(1))),
        })))
    }

    fn dataset_path(&self, id: &str) -> PathBuf {
        self.0.data_dir.join("datasets").join(format!("{id}.json"))
    }

    fn fit_dir(&self, id: &str) -> PathBuf {
        self.0.data_dir.join("fits").join(id)
    }

    fn load_dataset(&self, id: &str) -> ApiResult<AssayDataset> {
        if !is_hex_id(id) {
            return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown dataset {id}")));
        }
        let bytes = fs::read(self.dataset_path(id))
            .map_err(|_| ApiError(StatusCode::NOT_FOUND, format!("unknown dataset {id}")))?;
        let stored: StoredDataset = serde_json::from_slice(&bytes).map_err(internal)?;
        AssayDataset::from_csv_reader(stored.name, stored.csv.as_bytes(), stored.sigma_m, stored.sigma_d)
            .map_err(internal)
    }

    fn record(&self, id: &str) -> ApiResult<FitRecord> {
        self.0
            .records
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown fit {id}")))
    }

    fn set_status(&self, id: &str, status: FitStatus, error: Option<String>) {
        if let Some(r) = self.0.records.lock().unwrap().get_mut(id) {
            r.status = status;
            r.error = error;
        }
    }

    /// A done fit, loaded from disk on first use.
    fn done_fit(&self, id: &str) -> ApiResult<Arc<LoadedFit>> {
        let record = self.record(id)?;
        if record.status != FitStatus::Done {
            return Err(ApiError(StatusCode::CONFLICT, format!("fit {id} is {:?}", record.status).to_lowercase()));
        }
        if let Some(f) = self.0.loaded.lock().unwrap().get(id) {
            return Ok(f.clone());
        }
        let dir = self.fit_dir(id);
        let (artifact, trace) = FitArtifact::load(&dir).map_err(internal)?;
        let data = artifact.load_dataset(&dir).map_err(internal)?;
        let fit = Arc::new(LoadedFit { artifact, trace, data });
        self.0.loaded.lock().unwrap().insert(id.to_string(), fit.clone());
        Ok(fit)
    }
}

fn is_hex_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

#[derive(Debug, Deserialize)]
pub struct UploadParams {
    pub name: Option<String>,
    pub sigma_m: Option<f64>,
    pub sigma_d: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub id: String,
    pub name: String,
    pub n_isolates: usize,
    pub n_cells: usize,
    pub mic_range: (i32, i32),
    pub censored: bool,
}

async fn upload_dataset(
    State(state): State<AppState>,
    Query(params): Query<UploadParams>,
    body: String,
) -> ApiResult<(StatusCode, Json<DatasetSummary>)> {
    let name = params.name.unwrap_or_else(|| "dataset".into());
    let data = AssayDataset::from_csv_reader(
        name.clone(),
        body.as_bytes(),
        params.sigma_m.unwrap_or(DEFAULT_SIGMA_M),
        params.sigma_d.unwrap_or(DEFAULT_SIGMA_D),
    )
    .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let id = data.digest();
    let path = state.dataset_path(&id);
    let status = if path.exists() {
        StatusCode::OK
    } else {
        let stored =
            StoredDataset { name: name.clone(), sigma_m: data.sigma_m(), sigma_d: data.sigma_d(), csv: data.to_csv_string() };
        write_atomic(&path, &serde_json::to_vec_pretty(&stored).map_err(internal)?).map_err(internal)?;
        StatusCode::CREATED
    };
    Ok((
        status,
        Json(DatasetSummary {
            id,
            name,
            n_isolates: data.n_isolates(),
            n_cells: data.observations().len(),
            mic_range: data.mic_range(),
            censored: data.has_censoring(),
        }),
    ))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// Fit request; omitted sampler settings take their defaults.
#[derive(Debug, Clone, Deserialize)]
pub struct FitRequest {
    pub dataset_id: String,
    pub model: String,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub grid_points: Option<usize>,
    pub adapt_start: Option<usize>,
    pub adapt_window: Option<usize>,
    pub kmax: Option<usize>,
}

impl FitRequest {
    fn config(&self) -> ApiResult<SamplerConfig> {
        let model: ModelKind =
            self.model.parse().map_err(|e: bpcal_core::Error| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
        let mut c = SamplerConfig::new(model, self.seed.unwrap_or(1));
        c.iterations = self.iterations.unwrap_or(c.iterations);
        c.burn_in = self.burn_in.unwrap_or(c.burn_in);
        c.thin = self.thin.unwrap_or(c.thin);
        c.grid_points = self.grid_points.unwrap_or(c.grid_points);
        c.adapt_start = self.adapt_start.unwrap_or(c.adapt_start);
        c.adapt_window = self.adapt_window.unwrap_or(c.adapt_window);
        c.kmax = self.kmax.unwrap_or(c.kmax);
        c.validate().map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitAccepted {
    pub id: String,
    pub status: FitStatus,
}

async fn submit_fit(State(state): State<AppState>, Json(req): Json<FitRequest>) -> ApiResult<(StatusCode, Json<FitAccepted>)> {
    let data = state.load_dataset(&req.dataset_id)?;
    let config = req.config()?;
    let id = fit_id(&config, &data.digest());
    {
        let mut records = state.0.records.lock().unwrap();
        if let Some(r) = records.get(&id) {
            match r.status {
                FitStatus::Done => return Ok((StatusCode::OK, Json(FitAccepted { id, status: r.status }))),
                FitStatus::Queued | FitStatus::Running => {
                    return Ok((StatusCode::CONFLICT, Json(FitAccepted { id, status: r.status })))
                }
                FitStatus::Failed => {}
            }
        }
        records.insert(
            id.clone(),
            FitRecord {
                id: id.clone(),
                dataset_id: req.dataset_id.clone(),
                dataset_name: data.name.clone(),
                model: config.model,
                status: FitStatus::Queued,
                error: None,
            },
        );
    }
    let job_state = state.clone();
    let job_id = id.clone();
    tokio::spawn(async move {
        let _permit = job_state.0.workers.clone().acquire_owned().await.expect("semaphore open");
        job_state.set_status(&job_id, FitStatus::Running, None);
        let dir = job_state.fit_dir(&job_id);
        let outcome = tokio::task::spawn_blocking(move || run_fit(&config, &data, &dir)).await;
        match outcome {
            Ok(Ok(())) => job_state.set_status(&job_id, FitStatus::Done, None),
            Ok(Err(e)) => job_state.set_status(&job_id, FitStatus::Failed, Some(e)),
            Err(e) => job_state.set_status(&job_id, FitStatus::Failed, Some(format!("fit worker crashed: {e}"))),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(FitAccepted { id, status: FitStatus::Queued })))
}

/// Run a chain and publish its artifact directory atomically.
fn run_fit(config: &SamplerConfig, data: &AssayDataset, dir: &Path) -> Result<(), String> {
    let trace = run_chain(config, data).map_err(|e| e.to_string())?;
    let art = FitArtifact::from_trace(config, data, &trace);
    let staging = dir.with_extension("staging");
    let _ = fs::remove_dir_all(&staging);
    art.save(&staging, &trace, data).map_err(|e| e.to_string())?;
    let _ = fs::remove_dir_all(dir);
    fs::rename(&staging, dir).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitView {
    #[serde(flatten)]
    pub record: FitRecord,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acceptance: Option<Vec<(String, Option<f64>)>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub summary: Option<PosteriorSummary>,
}

async fn get_fit(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<FitView>> {
    let record = state.record(&id)?;
    let mut view = FitView { record, n_samples: None, acceptance: None, summary: None };
    if view.record.status == FitStatus::Done {
        let fit = state.done_fit(&id)?;
        view.n_samples = Some(fit.trace.n_samples());
        view.acceptance =
            Some(fit.artifact.acceptance.named().into_iter().map(|(n, r)| (n.to_string(), r.rate())).collect());
        view.summary = Some(posterior_summary(&fit.trace).map_err(internal)?);
    }
    Ok(Json(view))
}

#[derive(Debug, Clone, Deserialize)]
pub struct BreakpointRequest {
    pub mic_lower: i32,
    pub mic_upper: i32,
    pub d_min: Option<i32>,
    pub d_max: Option<i32>,
    #[serde(default)]
    pub include_loss_grid: bool,
}

async fn fit_breakpoints(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<BreakpointRequest>,
) -> ApiResult<Json<BreakpointReport>> {
    let fit = state.done_fit(&id)?;
    let unprocessable = |e: bpcal_core::Error| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string());
    let bp = MicBreakpoints::new(req.mic_lower, req.mic_upper).map_err(unprocessable)?;
    let default = SearchRange::default();
    let search =
        SearchRange::new(req.d_min.unwrap_or(default.d_min), req.d_max.unwrap_or(default.d_max)).map_err(unprocessable)?;
    let report = tokio::task::spawn_blocking(move || {
        let t = &fit.trace;
        let a = analyze_samples(&t.grid, &t.g_matrix(), &t.f_matrix(), bp, fit.data.sigma_m(), fit.data.sigma_d(), search)?;
        BreakpointReport::new(&fit.artifact.fit_id, bp, search, &a, req.include_loss_grid)
    })
    .await
    .map_err(internal)?
    .map_err(internal)?;
    Ok(Json(report))
}

async fn fit_grids(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<PlotData>> {
    let fit = state.done_fit(&id)?;
    Ok(Json(PlotData::new(&fit.trace, &fit.data).map_err(internal)?))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/datasets", post(upload_dataset))
        .route("/fits", post(submit_fit))
        .route("/fits/{id}", get(get_fit))
        .route("/fits/{id}/breakpoints", post(fit_breakpoints))
        .route("/fits/{id}/grids", get(fit_grids))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serve until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
