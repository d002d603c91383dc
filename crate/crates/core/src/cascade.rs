//! The two-stage case state machine and the stream runner.
//!
//! ```text
//! AwaitingScreen ──clear──▶ Cleared ─────────────────────────┐
//!       │                                                    │ outcome
//!       └─escalate─▶ AwaitingDiag ──refer──▶ ReferredAwaitingPathology ──┤
//!                          └──no_refer──▶ NoReferAwaitingPathology ──────┴─▶ Finalized
//! ```

use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{BankError, BankHeader, BankSnapshot, MemoryBank, Trajectory, DEFAULT_BANK_SEED};
use crate::domain::{CaseObservation, DescriptorVocabulary, LabeledCase, PathologyOutcome};
use crate::panel::{summarize, EnsembleSummary};
use crate::policy::{
    experience_diag, experience_screen, external_policy_call, static_diag, static_screen, Action,
    DecisionService, ExternalRequest, PolicyConfig, PolicyError, StageDecision, TrajectoryDigest,
};
use crate::retrieval::{top_k, RetrievalConfig, RetrievalError, ScoredNeighbor, Stage};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("case `{0}` was escalated but has no diagnostic features")]
    MissingDiagnosticFeatures(String),
    #[error("case `{case_id}` cannot be confirmed in phase {phase:?}")]
    IllegalPhase { case_id: String, phase: Phase },
    #[error("case `{0}` already has a confirmed outcome")]
    AlreadyConfirmed(String),
    #[error("case `{0}` has no outcome to confirm")]
    MissingOutcome(String),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Bank(#[from] BankError),
}

impl From<PolicyError> for CascadeError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::MissingDiagnosticFeatures(id) => CascadeError::MissingDiagnosticFeatures(id),
            PolicyError::InvalidConfig(m) => CascadeError::InvalidConfig(m.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Static,
    Experience,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePolicies {
    pub screening: PolicyKind,
    pub diagnostic: PolicyKind,
}

impl StagePolicies {
    pub fn both(kind: PolicyKind) -> Self {
        StagePolicies { screening: kind, diagnostic: kind }
    }
}

impl Default for StagePolicies {
    fn default() -> Self {
        StagePolicies::both(PolicyKind::Experience)
    }
}

/// Batch runs read one fixed snapshot; online runs append each confirmed
/// trajectory before the next case is retrieved against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Batch,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalServiceConfig {
    pub url: String,
    #[serde(default = "default_deadline_ms")]
    pub deadline_ms: u64,
}

fn default_deadline_ms() -> u64 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub retrieval: RetrievalConfig,
    pub policy: PolicyConfig,
    pub policy_kind: StagePolicies,
    pub mode: RunMode,
    pub seed: u64,
    pub vocabulary: DescriptorVocabulary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalServiceConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            retrieval: RetrievalConfig::default(),
            policy: PolicyConfig::default(),
            policy_kind: StagePolicies::default(),
            mode: RunMode::Batch,
            seed: DEFAULT_BANK_SEED,
            vocabulary: DescriptorVocabulary::default(),
            external: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CascadeError> {
        self.retrieval.validate().map_err(|e| CascadeError::InvalidConfig(e.to_string()))?;
        self.policy.validate()?;
        Ok(())
    }

    pub fn with_policies(mut self, kind: PolicyKind) -> Self {
        self.policy_kind = StagePolicies::both(kind);
        self
    }

    fn deadline(&self) -> Duration {
        Duration::from_millis(self.external.as_ref().map_or_else(default_deadline_ms, |e| e.deadline_ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingScreen,
    Cleared,
    AwaitingDiag,
    ReferredAwaitingPathology,
    NoReferAwaitingPathology,
    Finalized,
}

impl Phase {
    pub fn can_transition(self, to: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, to),
            (AwaitingScreen, Cleared)
                | (AwaitingScreen, AwaitingDiag)
                | (AwaitingDiag, ReferredAwaitingPathology)
                | (AwaitingDiag, NoReferAwaitingPathology)
                | (Cleared, Finalized)
                | (ReferredAwaitingPathology, Finalized)
                | (NoReferAwaitingPathology, Finalized)
        )
    }

    pub fn is_confirmable(self) -> bool {
        matches!(self, Phase::Cleared | Phase::ReferredAwaitingPathology | Phase::NoReferAwaitingPathology)
    }
}

/// A retrieved neighbor as recorded in case state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRef {
    pub case_id: String,
    pub similarity: f64,
    pub sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub decision: StageDecision,
    pub neighbors: Vec<NeighborRef>,
}

impl StageRecord {
    fn new(decision: StageDecision, neighbors: &[ScoredNeighbor]) -> Self {
        StageRecord {
            decision,
            neighbors: neighbors
                .iter()
                .map(|n| NeighborRef {
                    case_id: n.case_id.clone(),
                    similarity: n.similarity,
                    sequence: n.sequence,
                })
                .collect(),
        }
    }

    fn ids(&self) -> Vec<String> {
        self.neighbors.iter().map(|n| n.case_id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseState {
    pub case_id: String,
    pub dataset: String,
    pub phase: Phase,
    pub observation: CaseObservation,
    pub ensemble: EnsembleSummary,
    pub screening: Option<StageRecord>,
    pub diagnostic: Option<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<PathologyOutcome>,
}

impl CaseState {
    fn advance(&mut self, to: Phase) {
        debug_assert!(self.phase.can_transition(to), "{:?} -> {:?}", self.phase, to);
        self.phase = to;
    }

    /// The trajectory this state would finalize into, without changing phase.
    pub fn to_trajectory(&self, outcome: PathologyOutcome) -> Result<Trajectory, CascadeError> {
        if !self.phase.is_confirmable() && self.phase != Phase::Finalized {
            return Err(CascadeError::IllegalPhase { case_id: self.case_id.clone(), phase: self.phase });
        }
        let screening = self.screening.as_ref().expect("screened phases carry a decision");
        Ok(Trajectory {
            case_id: self.case_id.clone(),
            dataset: self.dataset.clone(),
            observation: self.observation.clone(),
            screening_decision: screening.decision.clone(),
            diagnostic_decision: self.diagnostic.as_ref().map(|d| d.decision.clone()),
            retrieved_ids_screening: screening.ids(),
            retrieved_ids_diagnostic: self.diagnostic.as_ref().map(StageRecord::ids),
            outcome,
            recorded_at: 0,
        })
    }
}

/// Runs cases through the cascade under one [`RunConfig`].
#[derive(Clone)]
pub struct Cascade {
    cfg: RunConfig,
    service: Option<Arc<dyn DecisionService>>,
}

impl std::fmt::Debug for Cascade {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cascade").field("cfg", &self.cfg).field("service", &self.service.is_some()).finish()
    }
}

impl Cascade {
    pub fn new(cfg: RunConfig) -> Result<Self, CascadeError> {
        cfg.validate()?;
        Ok(Cascade { cfg, service: None })
    }

    pub fn with_service(mut self, service: Arc<dyn DecisionService>) -> Self {
        self.service = Some(service);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn retrieve(
        &self,
        kind: PolicyKind,
        obs: &CaseObservation,
        bank: &BankSnapshot,
        stage: Stage,
    ) -> Result<Vec<ScoredNeighbor>, CascadeError> {
        if kind == PolicyKind::Static {
            return Ok(Vec::new());
        }
        Ok(top_k(obs, bank, &self.cfg.retrieval, stage, &self.cfg.vocabulary)?)
    }

    fn external(
        &self,
        stage: Stage,
        obs: &CaseObservation,
        summary: &EnsembleSummary,
        neighbors: &[ScoredNeighbor],
        fallback: StageDecision,
    ) -> StageDecision {
        let request = ExternalRequest {
            stage,
            observation: obs.clone(),
            ensemble_summary: summary.clone(),
            neighbors: neighbors.iter().map(TrajectoryDigest::from_neighbor).collect(),
        };
        external_policy_call(self.service.as_deref(), &request, self.cfg.deadline(), fallback)
    }

    /// Screens a case and, if escalated, runs the diagnostic stage.
    pub fn process_case(
        &self,
        dataset: &str,
        obs: &CaseObservation,
        bank: &BankSnapshot,
    ) -> Result<CaseState, CascadeError> {
        let summary = summarize(&obs.panel);
        let mut state = CaseState {
            case_id: obs.case_id.clone(),
            dataset: dataset.to_string(),
            phase: Phase::AwaitingScreen,
            observation: obs.clone(),
            ensemble: summary.clone(),
            screening: None,
            diagnostic: None,
            outcome: None,
        };
        let cfg = &self.cfg;

        let kind = cfg.policy_kind.screening;
        let neighbors = self.retrieve(kind, obs, bank, Stage::Screening)?;
        let decision = match kind {
            PolicyKind::Static => static_screen(&summary, &cfg.policy),
            PolicyKind::Experience => experience_screen(&summary, &neighbors, &cfg.policy),
            PolicyKind::External => {
                let fallback = experience_screen(&summary, &neighbors, &cfg.policy);
                self.external(Stage::Screening, obs, &summary, &neighbors, fallback)
            }
        };
        let escalate = decision.action == Action::Escalate;
        state.screening = Some(StageRecord::new(decision, &neighbors));
        if !escalate {
            state.advance(Phase::Cleared);
            return Ok(state);
        }
        state.advance(Phase::AwaitingDiag);
        if obs.diag_features.is_none() {
            return Err(CascadeError::MissingDiagnosticFeatures(obs.case_id.clone()));
        }

        let kind = cfg.policy_kind.diagnostic;
        let neighbors = self.retrieve(kind, obs, bank, Stage::Diagnostic)?;
        let decision = match kind {
            PolicyKind::Static => static_diag(obs, &cfg.vocabulary)?,
            PolicyKind::Experience => experience_diag(obs, &neighbors, &cfg.policy, &cfg.vocabulary)?,
            PolicyKind::External => {
                let fallback = experience_diag(obs, &neighbors, &cfg.policy, &cfg.vocabulary)?;
                self.external(Stage::Diagnostic, obs, &summary, &neighbors, fallback)
            }
        };
        let next = if decision.action == Action::Refer {
            Phase::ReferredAwaitingPathology
        } else {
            Phase::NoReferAwaitingPathology
        };
        state.diagnostic = Some(StageRecord::new(decision, &neighbors));
        state.advance(next);
        Ok(state)
    }

    /// Records the confirmed outcome. In online mode the trajectory is
    /// appended to `bank` and carries its sequence number.
    pub fn confirm_outcome(
        &self,
        state: &mut CaseState,
        outcome: PathologyOutcome,
        bank: &MemoryBank,
    ) -> Result<Trajectory, CascadeError> {
        if state.phase == Phase::Finalized {
            return Err(CascadeError::AlreadyConfirmed(state.case_id.clone()));
        }
        let mut t = state.to_trajectory(outcome)?;
        if self.cfg.mode == RunMode::Online {
            t.recorded_at = bank.append(t.clone())?;
        }
        state.outcome = Some(outcome);
        state.advance(Phase::Finalized);
        Ok(t)
    }

    fn run_one(
        &self,
        case: &LabeledCase,
        snap: &BankSnapshot,
        bank: &MemoryBank,
    ) -> Result<Trajectory, CascadeError> {
        let mut state = self.process_case(&case.dataset, &case.observation, snap)?;
        let outcome = case.outcome.ok_or_else(|| CascadeError::MissingOutcome(case.case_id().to_string()))?;
        self.confirm_outcome(&mut state, outcome, bank)
    }

    /// Processes a whole stream. Per-case failures are collected in the
    /// report and never abort the run.
    pub fn run_stream(&self, cases: &[LabeledCase], bank: &MemoryBank) -> RunReport {
        let start = bank.snapshot();
        let results: Vec<Result<Trajectory, CascadeError>> = match self.cfg.mode {
            RunMode::Batch => cases.par_iter().map(|c| self.run_one(c, &start, bank)).collect(),
            RunMode::Online => cases.iter().map(|c| self.run_one(c, &bank.snapshot(), bank)).collect(),
        };
        let mut trajectories = Vec::with_capacity(cases.len());
        let mut errors = Vec::new();
        for (index, (case, r)) in cases.iter().zip(results).enumerate() {
            match r {
                Ok(t) => trajectories.push(t),
                Err(e) => errors.push(CaseError {
                    index,
                    case_id: case.case_id().to_string(),
                    error: e.to_string(),
                }),
            }
        }
        let end = bank.snapshot();
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            run_config: self.cfg.clone(),
            bank_header: start.header().clone(),
            bank_provenance: BankProvenance {
                path: bank.path().map(|p| p.display().to_string()),
                entries_at_start: start.len(),
                last_sequence_at_start: start.last_sequence(),
                entries_at_end: end.len(),
            },
            notes: RunNotes::for_mode(self.cfg.mode),
            metrics_stub: MetricsStub::from_trajectories(&trajectories),
            trajectories,
            errors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseError {
    pub index: usize,
    pub case_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankProvenance {
    pub path: Option<String>,
    pub entries_at_start: usize,
    pub last_sequence_at_start: u64,
    pub entries_at_end: usize,
}

/// Interpretation choices that affect how a report's numbers were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunNotes {
    pub bank_growth: String,
    pub diagnostic_search_scope: String,
    pub uncertainty_signal: String,
}

impl RunNotes {
    fn for_mode(mode: RunMode) -> Self {
        RunNotes {
            bank_growth: match mode {
                RunMode::Batch => "fixed: one snapshot for the whole run".into(),
                RunMode::Online => "online: each confirmed case is appended before the next".into(),
            },
            diagnostic_search_scope: "all bank entries with diagnostic features".into(),
            uncertainty_signal: "ensemble agreement fraction".into(),
        }
    }
}

/// Headline counts computable from the trajectories alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsStub {
    pub screened: usize,
    pub escalated: usize,
    pub referred: usize,
    pub escalation_rate: f64,
    pub biopsy_referral_rate: f64,
}

impl MetricsStub {
    pub fn from_trajectories(ts: &[Trajectory]) -> Self {
        let screened = ts.len();
        let escalated = ts.iter().filter(|t| t.screening_decision.action == Action::Escalate).count();
        let referred = ts
            .iter()
            .filter(|t| t.diagnostic_decision.as_ref().is_some_and(|d| d.action == Action::Refer))
            .count();
        let rate = |k: usize| if screened == 0 { 0.0 } else { k as f64 / screened as f64 };
        MetricsStub {
            screened,
            escalated,
            referred,
            escalation_rate: rate(escalated),
            biopsy_referral_rate: rate(referred),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub run_config: RunConfig,
    pub bank_header: BankHeader,
    pub bank_provenance: BankProvenance,
    pub notes: RunNotes,
    pub trajectories: Vec<Trajectory>,
    pub errors: Vec<CaseError>,
    pub metrics_stub: MetricsStub,
}
