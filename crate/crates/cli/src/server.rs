//! HTTP service for the online cascade.
//!
//! Cases wait in a queue and are screened only when presented by
//! `GET /queue/next`, so each one sees every outcome confirmed before it.
//! Confirmations go through the bank's single-writer append path.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use triage_core::bank::BankError;
use triage_core::cascade::Phase;
use triage_core::eval::score_trajectories;
use triage_core::retrieval::top_k;
use triage_core::{
    BankSnapshot, Cascade, CascadeError, CaseState, LabeledCase, MemoryBank, MetricsReport, OutcomeLabel,
    OutcomeSource, PathologyOutcome, Stage, Trajectory,
};

/// A retrieved bank entry as shown to the operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborView {
    pub case_id: String,
    pub dataset: String,
    pub similarity: f64,
    pub sequence: u64,
    pub outcome: OutcomeLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Previews {
    pub screening: Vec<NeighborView>,
    /// Present only for escalated cases.
    pub diagnostic: Option<Vec<NeighborView>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub state: CaseState,
    pub previews: Previews,
    /// Set once the outcome is confirmed.
    pub trajectory: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub case_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueNext {
    /// Cases not yet finalized, including the one returned.
    pub pending: usize,
    pub case: Option<CaseView>,
    /// Cases dropped from the queue because they could not be processed.
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankStats {
    pub count: usize,
    pub embedding_dim: Option<usize>,
    pub seed: u64,
    pub last_sequence: u64,
    pub outcome_histogram: std::collections::BTreeMap<String, usize>,
    pub path: Option<String>,
}

#[derive(Debug, Deserialize)]
struct PathologyBody {
    label: String,
    #[serde(default)]
    source: Option<OutcomeSource>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "status": self.status.as_u16() });
        (self.status, Json(body)).into_response()
    }
}

impl From<CascadeError> for ApiError {
    fn from(e: CascadeError) -> Self {
        let status = match &e {
            CascadeError::AlreadyConfirmed(_) | CascadeError::IllegalPhase { .. } => StatusCode::CONFLICT,
            CascadeError::Bank(BankError::DuplicateCaseId(_)) => StatusCode::CONFLICT,
            CascadeError::Bank(BankError::Io(_)) => StatusCode::SERVICE_UNAVAILABLE,
            CascadeError::Bank(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

#[derive(Default)]
struct Queue {
    waiting: VecDeque<LabeledCase>,
    current: Option<String>,
    cases: HashMap<String, CaseView>,
    finalized: Vec<Trajectory>,
}

pub struct AppState {
    cascade: Cascade,
    bank: MemoryBank,
    queue: Mutex<Queue>,
}

impl AppState {
    pub fn new(cascade: Cascade, bank: MemoryBank, cases: Vec<LabeledCase>) -> Arc<Self> {
        Arc::new(AppState {
            cascade,
            bank,
            queue: Mutex::new(Queue { waiting: cases.into(), ..Queue::default() }),
        })
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    fn lock(&self) -> Result<std::sync::MutexGuard<'_, Queue>, ApiError> {
        self.queue
            .lock()
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service state poisoned"))
    }

    fn previews(&self, state: &CaseState, snap: &BankSnapshot) -> Previews {
        let cfg = self.cascade.config();
        let view = |stage| -> Vec<NeighborView> {
            top_k(&state.observation, snap, &cfg.retrieval, stage, &cfg.vocabulary)
                .map(|ns| {
                    ns.into_iter()
                        .map(|n| NeighborView {
                            dataset: n.trajectory.dataset.clone(),
                            outcome: n.trajectory.outcome.label,
                            case_id: n.case_id,
                            similarity: n.similarity,
                            sequence: n.sequence,
                        })
                        .collect()
                })
                .unwrap_or_default()
        };
        Previews {
            screening: view(Stage::Screening),
            diagnostic: state.diagnostic.is_some().then(|| view(Stage::Diagnostic)),
        }
    }

    pub fn next_case(&self) -> Result<QueueNext, ApiError> {
        let mut q = self.lock()?;
        let mut skipped = Vec::new();
        if q.current.is_none() {
            while let Some(case) = q.waiting.pop_front() {
                let id = case.case_id().to_string();
                if q.cases.contains_key(&id) || self.bank.contains(&id) {
                    skipped.push(Skipped { case_id: id, error: "case already processed".into() });
                    continue;
                }
                let snap = self.bank.snapshot();
                match self.cascade.process_case(&case.dataset, &case.observation, &snap) {
                    Ok(state) => {
                        let previews = self.previews(&state, &snap);
                        q.cases.insert(id.clone(), CaseView { state, previews, trajectory: None });
                        q.current = Some(id);
                        break;
                    }
                    Err(e) => skipped.push(Skipped { case_id: id, error: e.to_string() }),
                }
            }
        }
        let case = q.current.as_ref().and_then(|id| q.cases.get(id)).cloned();
        Ok(QueueNext { pending: q.waiting.len() + usize::from(case.is_some()), case, skipped })
    }

    pub fn case(&self, id: &str) -> Result<CaseView, ApiError> {
        self.lock()?
            .cases
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown case `{id}`")))
    }

    pub fn confirm(
        &self,
        id: &str,
        label: OutcomeLabel,
        source: OutcomeSource,
    ) -> Result<Trajectory, ApiError> {
        let mut q = self.lock()?;
        let view = q
            .cases
            .get_mut(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown case `{id}`")))?;
        if view.state.phase == Phase::Finalized {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("case `{id}` is already confirmed")));
        }
        let outcome = PathologyOutcome { label, source };
        let t = self.cascade.confirm_outcome(&mut view.state, outcome, &self.bank)?;
        view.trajectory = Some(t.clone());
        if q.current.as_deref() == Some(id) {
            q.current = None;
        }
        q.finalized.push(t.clone());
        Ok(t)
    }

    pub fn bank_stats(&self) -> BankStats {
        let snap = self.bank.snapshot();
        BankStats {
            count: snap.len(),
            embedding_dim: snap.embedding_dim(),
            seed: snap.header().seed,
            last_sequence: snap.last_sequence(),
            outcome_histogram: snap.outcome_histogram(),
            path: self.bank.path().map(|p| p.display().to_string()),
        }
    }

    /// Metrics over every confirmed case, scored against its confirmed outcome.
    pub fn metrics(&self) -> Result<MetricsReport, ApiError> {
        let q = self.lock()?;
        let truth = q.finalized.iter().map(|t| (t.case_id.clone(), t.outcome)).collect();
        score_trajectories(&q.finalized, &truth)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
    }
}

async fn blocking<T, F>(f: F) -> Result<Json<T>, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
}

async fn queue_next(State(s): State<Arc<AppState>>) -> Result<Json<QueueNext>, ApiError> {
    blocking(move || s.next_case()).await
}

async fn get_case(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<CaseView>, ApiError> {
    blocking(move || s.case(&id)).await
}

async fn post_pathology(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Trajectory>, ApiError> {
    let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
    let req: PathologyBody =
        serde_json::from_slice(&body).map_err(|e| unprocessable(format!("invalid body: {e}")))?;
    let label: OutcomeLabel =
        serde_json::from_value(serde_json::Value::String(req.label.clone())).map_err(|_| {
            unprocessable(format!(
                "invalid label `{}`; expected malignant, benign_confirmed or normal_confirmed",
                req.label
            ))
        })?;
    let source = req.source.unwrap_or(OutcomeSource::Biopsy);
    blocking(move || s.confirm(&id, label, source)).await
}

async fn bank_stats(State(s): State<Arc<AppState>>) -> Json<BankStats> {
    Json(s.bank_stats())
}

async fn metrics(State(s): State<Arc<AppState>>) -> Result<Json<MetricsReport>, ApiError> {
    blocking(move || s.metrics()).await
}

async fn config(State(s): State<Arc<AppState>>) -> Json<triage_core::RunConfig> {
    Json(s.cascade.config().clone())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/queue/next", get(queue_next))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/pathology", post(post_pathology))
        .route("/bank/stats", get(bank_stats))
        .route("/metrics", get(metrics))
        .route("/config", get(config))
        .with_state(state)
}
