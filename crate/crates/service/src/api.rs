//! JSON over HTTP for interactive sessions.
//!
//! Each session sits behind its own async mutex, so reports and proposals
//! for one session run one at a time while other sessions proceed. Reads of
//! history and the latent map go to a snapshot taken after the last
//! committed mutation and never wait on that mutex.

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use powderbo::pipeline::{self, ModelBundle};
use powderbo::session::{self, HistoryEntry, LatentMap, ReportSummary};
use powderbo::{Candidate, CandidateStatus, Dataset, Outcome, Schedule, SessionConfig, SessionState, Strategy, TrialSetup};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }
}

impl From<powderbo::Error> for ApiError {
    fn from(e: powderbo::Error) -> Self {
        use powderbo::Error as E;
        let status = match &e {
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            E::UnknownCandidate(_) => StatusCode::CONFLICT,
            E::InvalidInput(_) | E::DimensionMismatch { .. } | E::Json(_) | E::Version(_) => StatusCode::BAD_REQUEST,
            E::Csv(_)
            | E::Schema(_)
            | E::Parse { .. }
            | E::EmptyDataset
            | E::InsufficientData(_)
            | E::DegenerateStatistics(_)
            | E::RankDeficient { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    /// Trial history CSV, relative to the service data directory.
    pub dataset_ref: String,
    /// Saved encoder bundle to reuse instead of training, same directory.
    #[serde(default)]
    pub models_ref: Option<String>,
    pub target_setup: TrialSetup,
    #[serde(default)]
    pub config: Option<SessionConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

/// Either the weighing error read off the scale or a penalty.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutcomeBody {
    Measured { measured_kg: f64 },
    Penalized { penalized: bool },
}

impl OutcomeBody {
    fn to_outcome(self) -> ApiResult<Outcome> {
        match self {
            Self::Measured { measured_kg } => Ok(Outcome::Measured(measured_kg)),
            Self::Penalized { penalized: true } => Ok(Outcome::Penalized),
            Self::Penalized { penalized: false } => Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "outcome must be {measured_kg} or {penalized: true}",
            )),
        }
    }

    fn from_outcome(o: Outcome) -> Self {
        match o {
            Outcome::Measured(measured_kg) => Self::Measured { measured_kg },
            Outcome::Penalized => Self::Penalized { penalized: true },
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct TrialBody {
    pub candidate_id: String,
    pub outcome: OutcomeBody,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryItem {
    pub trial: usize,
    pub candidate_id: String,
    pub strategy: Strategy,
    pub kappa: f64,
    pub status: CandidateStatus,
    pub schedule: Schedule,
    pub outcome: OutcomeBody,
    pub weighing_error: f64,
    pub relative_error: f64,
}

impl From<&HistoryEntry> for HistoryItem {
    fn from(h: &HistoryEntry) -> Self {
        Self {
            trial: h.trial,
            candidate_id: h.candidate.candidate_id.clone(),
            strategy: h.candidate.strategy,
            kappa: h.candidate.kappa,
            status: h.candidate.status,
            schedule: h.candidate.schedule.clone(),
            outcome: OutcomeBody::from_outcome(h.outcome),
            weighing_error: h.weighing_error,
            relative_error: h.relative_error,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryView {
    pub session_id: String,
    pub required_weight: f64,
    pub target_rel_error: f64,
    #[serde(flatten)]
    pub summary: ReportSummaryView,
    pub trials: Vec<HistoryItem>,
}

/// [`ReportSummary`] with the pre-report infinity sent as `null`, which JSON
/// cannot carry as a number.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummaryView {
    pub history_len: usize,
    pub best_rel_error: Option<f64>,
    pub target_reached: bool,
}

impl From<ReportSummary> for ReportSummaryView {
    fn from(s: ReportSummary) -> Self {
        Self {
            history_len: s.history_len,
            best_rel_error: s.best_rel_error.is_finite().then_some(s.best_rel_error),
            target_reached: s.target_reached,
        }
    }
}

struct Snapshot {
    history: HistoryView,
    latent_map: LatentMap,
    candidates: Option<Vec<Candidate>>,
}

impl Snapshot {
    fn of(s: &SessionState) -> powderbo::Result<Self> {
        Ok(Self {
            history: HistoryView {
                session_id: s.id.clone(),
                required_weight: s.target.required_weight,
                target_rel_error: session::TARGET_REL_ERROR,
                summary: s.summary().into(),
                trials: s.history.iter().map(HistoryItem::from).collect(),
            },
            latent_map: s.latent_map()?,
            candidates: s.pending().map(<[Candidate]>::to_vec),
        })
    }
}

struct Slot {
    state: Arc<Mutex<SessionState>>,
    snapshot: RwLock<Arc<Snapshot>>,
}

impl Slot {
    fn new(s: SessionState) -> powderbo::Result<Self> {
        let snap = Snapshot::of(&s)?;
        Ok(Self {
            state: Arc::new(Mutex::new(s)),
            snapshot: RwLock::new(Arc::new(snap)),
        })
    }

    fn read(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn commit(&self, snap: Snapshot) {
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(snap);
    }
}

pub struct AppState {
    data_dir: PathBuf,
    state_dir: Option<PathBuf>,
    default_seed: u64,
    next_id: AtomicU64,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

impl AppState {
    /// `data_dir` holds the datasets and bundles that requests refer to.
    /// With a `state_dir`, sessions are written there after every change
    /// and reloaded on startup.
    pub fn new(data_dir: impl Into<PathBuf>, state_dir: Option<PathBuf>, default_seed: u64) -> powderbo::Result<Self> {
        let app = Self {
            data_dir: data_dir.into(),
            state_dir,
            default_seed,
            next_id: AtomicU64::new(1),
            sessions: RwLock::new(HashMap::new()),
        };
        app.restore()?;
        Ok(app)
    }

    fn restore(&self) -> powderbo::Result<()> {
        let Some(dir) = &self.state_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;
        let mut map = self.sessions.write().unwrap_or_else(|e| e.into_inner());
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let s = SessionState::load(&path)?;
                log::info!("restored session {} from {}", s.id, path.display());
                map.insert(s.id.clone(), Arc::new(Slot::new(s)?));
            }
        }
        let last = map
            .keys()
            .filter_map(|id| id.strip_prefix('s')?.split('-').next()?.parse::<u64>().ok())
            .max()
            .unwrap_or(0);
        self.next_id.store(last + 1, Ordering::SeqCst);
        Ok(())
    }

    fn resolve(&self, reference: &str) -> ApiResult<PathBuf> {
        let rel = Path::new(reference);
        if rel.as_os_str().is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("`{reference}` must be a relative path inside the data directory"),
            ));
        }
        Ok(self.data_dir.join(rel))
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session"))
    }

    fn persist(&self, s: &SessionState) -> powderbo::Result<()> {
        match &self.state_dir {
            Some(dir) => s.save(dir.join(format!("{}.json", s.id))),
            None => Ok(()),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/candidates", get(candidates))
        .route("/sessions/{id}/trials", post(report_trial))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/latent-map", get(latent_map))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Created>)> {
    let Json(req) = payload?;
    req.target_setup.validate()?;
    let data_path = app.resolve(&req.dataset_ref)?;
    let models_path = req.models_ref.as_deref().map(|r| app.resolve(r)).transpose()?;
    let seed = req.seed.unwrap_or(app.default_seed);
    let config = req.config.unwrap_or_default();
    let id = format!("s{}-{seed}", app.next_id.fetch_add(1, Ordering::SeqCst));

    let app2 = app.clone();
    let id2 = id.clone();
    let slot = blocking(move || {
        let d = Dataset::load_csv(&data_path)?;
        let mut s = match models_path {
            Some(p) => {
                let bundle = ModelBundle::load(p)?;
                let (cleaned, _, _) = pipeline::clean(&d, &bundle.config)?;
                SessionState::from_models(bundle, &cleaned, &req.target_setup, &config, seed)?
            }
            None => session::create_session(&d, &req.target_setup, &config, seed)?,
        };
        s.id = id2;
        app2.persist(&s)?;
        Ok(Slot::new(s)?)
    })
    .await?;
    log::info!("created session {id}");
    app.sessions
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .insert(id.clone(), Arc::new(slot));
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

async fn candidates(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<Candidate>>> {
    let slot = app.slot(&id)?;
    if let Some(c) = &slot.read().candidates {
        return Ok(Json(c.clone()));
    }
    let mut guard = slot.state.clone().lock_owned().await;
    let slot2 = slot.clone();
    let out = blocking(move || {
        let c = guard.candidates()?.to_vec();
        slot2.commit(Snapshot::of(&guard)?);
        Ok(c)
    })
    .await?;
    Ok(Json(out))
}

async fn report_trial(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    payload: Result<Json<TrialBody>, JsonRejection>,
) -> ApiResult<Json<ReportSummaryView>> {
    let Json(body) = payload?;
    let slot = app.slot(&id)?;
    let outcome = body.outcome.to_outcome()?;
    let mut guard = slot.state.clone().lock_owned().await;
    let (slot2, app2) = (slot.clone(), app.clone());
    let summary = blocking(move || {
        let summary = guard.report(&body.candidate_id, outcome)?;
        app2.persist(&guard)?;
        slot2.commit(Snapshot::of(&guard)?);
        Ok(summary)
    })
    .await?;
    Ok(Json(summary.into()))
}

async fn history(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<HistoryView>> {
    Ok(Json(app.slot(&id)?.read().history.clone()))
}

async fn latent_map(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<LatentMap>> {
    Ok(Json(app.slot(&id)?.read().latent_map.clone()))
}
