//! Screening (clear/escalate) and diagnostic (refer/no-refer) decision
//! policies.
//!
//! Three families are provided:
//! - static rules over the current case only,
//! - experience-conditioned rules that reweight model trust and blend in a
//!   neighborhood prior computed from retrieved trajectories,
//! - an adapter for an external decision service, which falls back to the
//!   experience-conditioned decision on any failure.
//!
//! Every decision carries an [`Evidence`] record from which its score can be
//! recomputed offline with [`recompute_score`].

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CaseObservation, Category, DescriptorVocabulary, OutcomeLabel, RadiologicalFeatureSet};
use crate::panel::EnsembleSummary;
use crate::retrieval::{ScoredNeighbor, Stage};

/// Fixed cut for the rule-based diagnostic policy. Rule firings score 1.0
/// and the BIRADS 2/3 map tops out at 0.25, so this reproduces the rule.
pub const STATIC_DIAG_THRESHOLD: f64 = 0.5;

const BIRADS2_SCORE: f64 = 0.05;
const BIRADS3_SCORE: f64 = 0.25;

pub const POLICY_STATIC: &str = "static";
pub const POLICY_EXPERIENCE: &str = "experience";
pub const POLICY_EXTERNAL: &str = "external";
pub const POLICY_SEEDED: &str = "seeded";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("case `{0}` has no diagnostic features")]
    MissingDiagnosticFeatures(String),
    #[error("invalid policy config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Clear,
    Escalate,
    NoRefer,
    Refer,
    /// Marker for trajectories seeded from ground-truth data: no agent
    /// decision was ever made.
    Seeded,
}

impl Action {
    pub fn is_positive(self) -> bool {
        matches!(self, Action::Escalate | Action::Refer)
    }

    fn for_stage(stage: Stage, positive: bool) -> Action {
        match (stage, positive) {
            (Stage::Screening, true) => Action::Escalate,
            (Stage::Screening, false) => Action::Clear,
            (Stage::Diagnostic, true) => Action::Refer,
            (Stage::Diagnostic, false) => Action::NoRefer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub tau_screen: f64,
    pub theta_agree: f64,
    pub tau_diag: f64,
    pub beta: f64,
    pub alpha_smooth: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { tau_screen: 0.30, theta_agree: 0.70, tau_diag: 0.50, beta: 0.5, alpha_smooth: 1.0 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.tau_screen) || !unit(self.theta_agree) || !unit(self.tau_diag) {
            return Err(PolicyError::InvalidConfig("thresholds must lie in [0, 1]"));
        }
        if !unit(self.beta) {
            return Err(PolicyError::InvalidConfig("beta must lie in [0, 1]"));
        }
        if !(self.alpha_smooth > 0.0 && self.alpha_smooth.is_finite()) {
            return Err(PolicyError::InvalidConfig("alpha_smooth must be positive"));
        }
        Ok(())
    }
}

/// What a neighbor contributed to a decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborEvidence {
    pub case_id: String,
    pub similarity: f64,
    pub weight: f64,
    pub malignant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvidenceDetail {
    StaticScreen {
        summary: EnsembleSummary,
        theta_agree: f64,
        /// Ensemble benign/normal with enough agreement; only then may the
        /// case clear.
        clear_path: bool,
        /// True when the gating conditions forced escalation and the score
        /// was lifted to the threshold.
        gate_forced: bool,
    },
    ExperienceScreen {
        confidence_vector: Vec<f64>,
        neighbors: Vec<NeighborEvidence>,
        hits: Vec<u32>,
        alpha_smooth: f64,
        reliabilities: Vec<f64>,
        trust_weighted_malignancy: f64,
        neighborhood_prior: f64,
        beta: f64,
    },
    StaticDiag {
        birads: u8,
        conclusion: Option<String>,
        conclusion_malignant: bool,
        rule_fired: bool,
    },
    ExperienceDiag {
        static_score: f64,
        birads: u8,
        rule_fired: bool,
        neighbors: Vec<NeighborEvidence>,
        neighborhood_prior: f64,
        beta: f64,
    },
    External {
        stage: Stage,
        response_action: String,
        rationale: Option<String>,
    },
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    /// Threshold the score was compared against; absent for external and
    /// seeded decisions.
    pub threshold: Option<f64>,
    #[serde(default)]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
    pub detail: EvidenceDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDecision {
    pub action: Action,
    pub score: f64,
    pub policy_id: String,
    pub evidence: Evidence,
}

impl StageDecision {
    pub fn seeded() -> Self {
        StageDecision {
            action: Action::Seeded,
            score: 0.0,
            policy_id: POLICY_SEEDED.into(),
            evidence: Evidence {
                threshold: None,
                fallback: false,
                fallback_reason: None,
                detail: EvidenceDetail::Seeded,
            },
        }
    }

    fn marked_fallback(mut self, policy_id: &str, reason: impl Into<String>) -> Self {
        self.policy_id = policy_id.into();
        self.evidence.fallback = true;
        self.evidence.fallback_reason = Some(reason.into());
        self
    }
}

fn static_screen_score(summary: &EnsembleSummary, theta_agree: f64, tau: f64) -> (f64, bool, bool) {
    let clear_path =
        summary.ensemble_prediction != Category::Malignant && summary.agreement_fraction >= theta_agree;
    if clear_path {
        return (summary.mean_malignancy, true, false);
    }
    let raw = summary.mean_malignancy.max(1.0 - summary.agreement_fraction);
    if raw < tau {
        (tau, false, true)
    } else {
        (raw, false, false)
    }
}

/// Rule-based screening: clear only when the ensemble says benign or normal,
/// agreement reaches `theta_agree` and mean malignancy stays under
/// `tau_screen`.
pub fn static_screen(summary: &EnsembleSummary, cfg: &PolicyConfig) -> StageDecision {
    let (score, clear_path, gate_forced) = static_screen_score(summary, cfg.theta_agree, cfg.tau_screen);
    StageDecision {
        action: Action::for_stage(Stage::Screening, score >= cfg.tau_screen),
        score,
        policy_id: POLICY_STATIC.into(),
        evidence: Evidence {
            threshold: Some(cfg.tau_screen),
            fallback: false,
            fallback_reason: None,
            detail: EvidenceDetail::StaticScreen {
                summary: summary.clone(),
                theta_agree: cfg.theta_agree,
                clear_path,
                gate_forced,
            },
        },
    }
}

/// Laplace-smoothed per-model reliability.
pub fn reliabilities(hits: &[u32], n: usize, alpha: f64) -> Vec<f64> {
    let denom = n as f64 + 2.0 * alpha;
    hits.iter().map(|&h| (h as f64 + alpha) / denom).collect()
}

/// Reliability-weighted mean of the query's malignancy probabilities.
pub fn trust_weighted_malignancy(reliabilities: &[f64], confidence: &[f64]) -> f64 {
    let num: f64 = reliabilities.iter().zip(confidence).map(|(r, p)| r * p).sum();
    let den: f64 = reliabilities.iter().sum();
    num / den
}

/// Similarity-weighted malignant fraction among neighbors. Negative
/// similarities get zero weight; if every weight is zero the plain fraction
/// is used.
pub fn neighborhood_prior(neighbors: &[NeighborEvidence]) -> f64 {
    if neighbors.is_empty() {
        return 0.0;
    }
    let total: f64 = neighbors.iter().map(|n| n.weight).sum();
    if total > 0.0 {
        let mal: f64 = neighbors.iter().filter(|n| n.malignant).map(|n| n.weight).sum();
        mal / total
    } else {
        neighbors.iter().filter(|n| n.malignant).count() as f64 / neighbors.len() as f64
    }
}

fn blend(beta: f64, own: f64, prior: f64) -> f64 {
    beta * own + (1.0 - beta) * prior
}

pub fn neighbor_evidence(neighbors: &[ScoredNeighbor]) -> Vec<NeighborEvidence> {
    neighbors
        .iter()
        .map(|n| NeighborEvidence {
            case_id: n.case_id.clone(),
            similarity: n.similarity,
            weight: n.similarity.max(0.0),
            malignant: n.trajectory.outcome.is_malignant(),
        })
        .collect()
}

/// Count, for each model position, the neighbors whose stored prediction
/// agreed with the confirmed outcome on the malignant / not-malignant axis.
pub fn model_hits(m: usize, neighbors: &[ScoredNeighbor]) -> Vec<u32> {
    let mut hits = vec![0u32; m];
    for n in neighbors {
        let truth = n.trajectory.outcome.is_malignant();
        for (h, pred) in hits.iter_mut().zip(n.trajectory.observation.panel.entries()) {
            if pred.predicted().is_malignant() == truth {
                *h += 1;
            }
        }
    }
    hits
}

/// Experience-conditioned screening. Falls back to [`static_screen`] when no
/// neighbors were retrieved.
pub fn experience_screen(
    summary: &EnsembleSummary,
    neighbors: &[ScoredNeighbor],
    cfg: &PolicyConfig,
) -> StageDecision {
    if neighbors.is_empty() {
        return static_screen(summary, cfg).marked_fallback(POLICY_EXPERIENCE, "no_neighbors");
    }
    let confidence = summary.confidence_vector.clone();
    let hits = model_hits(confidence.len(), neighbors);
    let rel = reliabilities(&hits, neighbors.len(), cfg.alpha_smooth);
    let trust = trust_weighted_malignancy(&rel, &confidence);
    let evidence_neighbors = neighbor_evidence(neighbors);
    let prior = neighborhood_prior(&evidence_neighbors);
    let score = blend(cfg.beta, trust, prior);
    StageDecision {
        action: Action::for_stage(Stage::Screening, score >= cfg.tau_screen),
        score,
        policy_id: POLICY_EXPERIENCE.into(),
        evidence: Evidence {
            threshold: Some(cfg.tau_screen),
            fallback: false,
            fallback_reason: None,
            detail: EvidenceDetail::ExperienceScreen {
                confidence_vector: confidence,
                neighbors: evidence_neighbors,
                hits,
                alpha_smooth: cfg.alpha_smooth,
                reliabilities: rel,
                trust_weighted_malignancy: trust,
                neighborhood_prior: prior,
                beta: cfg.beta,
            },
        },
    }
}

fn static_diag_score(birads: u8, conclusion_malignant: bool) -> (f64, bool) {
    if birads >= 4 || conclusion_malignant {
        (1.0, true)
    } else if birads == 3 {
        (BIRADS3_SCORE, false)
    } else {
        (BIRADS2_SCORE, false)
    }
}

fn require_features(obs: &CaseObservation) -> Result<&RadiologicalFeatureSet, PolicyError> {
    obs.diag_features.as_ref().ok_or_else(|| PolicyError::MissingDiagnosticFeatures(obs.case_id.clone()))
}

/// Rule-based biopsy referral: refer on BIRADS 4/5 or a descriptor
/// conclusion in the vocabulary's malignant set.
pub fn static_diag(
    obs: &CaseObservation,
    vocab: &DescriptorVocabulary,
) -> Result<StageDecision, PolicyError> {
    let features = require_features(obs)?;
    let conclusion = obs.descriptor.as_ref().and_then(|d| d.conclusion.clone());
    let conclusion_malignant = conclusion.as_deref().is_some_and(|c| vocab.is_malignant_conclusion(c));
    let birads = features.birads.value();
    let (score, rule_fired) = static_diag_score(birads, conclusion_malignant);
    Ok(StageDecision {
        action: Action::for_stage(Stage::Diagnostic, score >= STATIC_DIAG_THRESHOLD),
        score,
        policy_id: POLICY_STATIC.into(),
        evidence: Evidence {
            threshold: Some(STATIC_DIAG_THRESHOLD),
            fallback: false,
            fallback_reason: None,
            detail: EvidenceDetail::StaticDiag { birads, conclusion, conclusion_malignant, rule_fired },
        },
    })
}

/// Experience-conditioned referral: blend of the rule score and the
/// neighborhood's malignant fraction, compared against `tau_diag`.
pub fn experience_diag(
    obs: &CaseObservation,
    neighbors: &[ScoredNeighbor],
    cfg: &PolicyConfig,
    vocab: &DescriptorVocabulary,
) -> Result<StageDecision, PolicyError> {
    let base = static_diag(obs, vocab)?;
    if neighbors.is_empty() {
        return Ok(base.marked_fallback(POLICY_EXPERIENCE, "no_neighbors"));
    }
    let (birads, rule_fired) = match &base.evidence.detail {
        EvidenceDetail::StaticDiag { birads, rule_fired, .. } => (*birads, *rule_fired),
        _ => unreachable!("static_diag always emits StaticDiag evidence"),
    };
    let evidence_neighbors = neighbor_evidence(neighbors);
    let prior = neighborhood_prior(&evidence_neighbors);
    let score = blend(cfg.beta, base.score, prior);
    Ok(StageDecision {
        action: Action::for_stage(Stage::Diagnostic, score >= cfg.tau_diag),
        score,
        policy_id: POLICY_EXPERIENCE.into(),
        evidence: Evidence {
            threshold: Some(cfg.tau_diag),
            fallback: false,
            fallback_reason: None,
            detail: EvidenceDetail::ExperienceDiag {
                static_score: base.score,
                birads,
                rule_fired,
                neighbors: evidence_neighbors,
                neighborhood_prior: prior,
                beta: cfg.beta,
            },
        },
    })
}

/// Recomputes a decision's score from its evidence alone. Returns `None` for
/// external and seeded decisions, whose scores are not derived locally.
pub fn recompute_score(evidence: &Evidence) -> Option<f64> {
    match &evidence.detail {
        EvidenceDetail::StaticScreen { summary, theta_agree, .. } => {
            let tau = evidence.threshold?;
            Some(static_screen_score(summary, *theta_agree, tau).0)
        }
        EvidenceDetail::ExperienceScreen {
            confidence_vector, neighbors, hits, alpha_smooth, beta, ..
        } => {
            let rel = reliabilities(hits, neighbors.len(), *alpha_smooth);
            let trust = trust_weighted_malignancy(&rel, confidence_vector);
            Some(blend(*beta, trust, neighborhood_prior(neighbors)))
        }
        EvidenceDetail::StaticDiag { birads, conclusion_malignant, .. } => {
            Some(static_diag_score(*birads, *conclusion_malignant).0)
        }
        EvidenceDetail::ExperienceDiag { static_score, neighbors, beta, .. } => {
            Some(blend(*beta, *static_score, neighborhood_prior(neighbors)))
        }
        EvidenceDetail::External { .. } | EvidenceDetail::Seeded => None,
    }
}

// ---------------------------------------------------------------------------
// External decision service
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExternalError {
    #[error("decision service timed out")]
    Timeout,
    #[error("malformed decision service response: {0}")]
    MalformedResponse(String),
    #[error("decision service unavailable: {0}")]
    ServiceUnavailable(String),
}

/// Compact view of a retrieved trajectory sent to the external service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDigest {
    pub case_id: String,
    pub similarity: f64,
    pub outcome: OutcomeLabel,
    pub confidence_vector: Vec<f64>,
    pub ensemble_prediction: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag_features: Option<RadiologicalFeatureSet>,
    pub screening_action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic_action: Option<Action>,
}

impl TrajectoryDigest {
    pub fn from_neighbor(n: &ScoredNeighbor) -> Self {
        let t = &n.trajectory;
        TrajectoryDigest {
            case_id: n.case_id.clone(),
            similarity: n.similarity,
            outcome: t.outcome.label,
            confidence_vector: crate::panel::confidence_vector(&t.observation.panel),
            ensemble_prediction: crate::panel::majority_vote(&t.observation.panel),
            diag_features: t.observation.diag_features,
            screening_action: t.screening_decision.action,
            diagnostic_action: t.diagnostic_decision.as_ref().map(|d| d.action),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRequest {
    pub stage: Stage,
    pub observation: CaseObservation,
    pub ensemble_summary: EnsembleSummary,
    pub neighbors: Vec<TrajectoryDigest>,
}

/// Response body. Unknown fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalResponse {
    pub action: String,
    pub score: f64,
    #[serde(default)]
    pub rationale: Option<String>,
}

/// Transport to an external decision service.
pub trait DecisionService: Send + Sync {
    fn decide(
        &self,
        request: &ExternalRequest,
        deadline: Duration,
    ) -> Result<ExternalResponse, ExternalError>;
}

/// Validates a service response against the stage's action vocabulary and
/// the unit score range.
pub fn parse_external_response(
    stage: Stage,
    resp: &ExternalResponse,
) -> Result<(Action, f64), ExternalError> {
    if !(resp.score.is_finite() && (0.0..=1.0).contains(&resp.score)) {
        return Err(ExternalError::MalformedResponse(format!("score {} outside [0, 1]", resp.score)));
    }
    let normalized = resp.action.trim().to_ascii_lowercase().replace('-', "_");
    let action = match (stage, normalized.as_str()) {
        (Stage::Screening, "clear") => Action::Clear,
        (Stage::Screening, "escalate") => Action::Escalate,
        (Stage::Diagnostic, "no_refer") => Action::NoRefer,
        (Stage::Diagnostic, "refer") => Action::Refer,
        _ => {
            return Err(ExternalError::MalformedResponse(format!(
                "action `{}` is not valid at the {:?} stage",
                resp.action, stage
            )))
        }
    };
    Ok((action, resp.score))
}

/// Asks the external service for a decision. Any failure (no service,
/// timeout, bad response) yields `fallback` with `evidence.fallback` set.
pub fn external_policy_call(
    service: Option<&dyn DecisionService>,
    request: &ExternalRequest,
    deadline: Duration,
    fallback: StageDecision,
) -> StageDecision {
    let fallback_id = fallback.policy_id.clone();
    let Some(service) = service else {
        let reason = ExternalError::ServiceUnavailable("not configured".into()).to_string();
        return fallback.marked_fallback(&fallback_id, reason);
    };
    let outcome = service
        .decide(request, deadline)
        .and_then(|resp| parse_external_response(request.stage, &resp).map(|ok| (ok, resp)));
    match outcome {
        Ok(((action, score), resp)) => StageDecision {
            action,
            score,
            policy_id: POLICY_EXTERNAL.into(),
            evidence: Evidence {
                threshold: None,
                fallback: false,
                fallback_reason: None,
                detail: EvidenceDetail::External {
                    stage: request.stage,
                    response_action: resp.action,
                    rationale: resp.rationale,
                },
            },
        },
        Err(e) => fallback.marked_fallback(&fallback_id, e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::Trajectory;
    use crate::domain::{
        validate_distribution, Birads, Boundary, Calcification, DescriptorRecord, Echo, Edge, Embedding,
        ModelPrediction, OutcomeSource, PathologyOutcome, PredictionPanel,
    };
    use crate::panel::summarize;
    use std::sync::Arc;

    fn summary(ensemble: Category, agreement: f64, mean: f64, cv: Vec<f64>) -> EnsembleSummary {
        EnsembleSummary {
            ensemble_prediction: ensemble,
            vote_counts: [0, 0, 0],
            agreement_fraction: agreement,
            mean_malignancy: mean,
            confidence_vector: cv,
        }
    }

    fn panel(preds: &[f64]) -> PredictionPanel {
        PredictionPanel::new(
            preds
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    ModelPrediction::new(format!("m{i}"), validate_distribution(&[1.0 - p, p, 0.0]).unwrap())
                })
                .collect(),
        )
        .unwrap()
    }

    fn observation(id: &str, pm: &[f64], birads: Option<u8>) -> CaseObservation {
        CaseObservation {
            case_id: id.into(),
            embedding: Embedding::new(vec![1.0, 0.0]).unwrap(),
            panel: panel(pm),
            diag_features: birads.map(|b| RadiologicalFeatureSet {
                birads: Birads::new(b).unwrap(),
                edge: Edge::Regular,
                boundary: Boundary::Clear,
                calcification: Calcification::No,
                echo: Echo::Low,
            }),
            descriptor: None,
        }
    }

    fn neighbor(id: &str, pm: &[f64], malignant: bool, sim: f64, seq: u64) -> ScoredNeighbor {
        let t = Trajectory {
            case_id: id.into(),
            dataset: "d".into(),
            observation: observation(id, pm, Some(3)),
            screening_decision: StageDecision::seeded(),
            diagnostic_decision: None,
            retrieved_ids_screening: vec![],
            retrieved_ids_diagnostic: None,
            outcome: PathologyOutcome {
                label: if malignant { OutcomeLabel::Malignant } else { OutcomeLabel::BenignConfirmed },
                source: OutcomeSource::Biopsy,
            },
            recorded_at: seq,
        };
        ScoredNeighbor { case_id: id.into(), similarity: sim, sequence: seq, trajectory: Arc::new(t) }
    }

    #[test]
    fn static_screen_examples() {
        let cfg = PolicyConfig::default();
        let d = static_screen(&summary(Category::Benign, 1.0, 0.05, vec![0.05; 14]), &cfg);
        assert_eq!(d.action, Action::Clear);
        assert_eq!(d.score, 0.05);

        let d = static_screen(&summary(Category::Malignant, 1.0, 0.9, vec![0.9; 3]), &cfg);
        assert_eq!(d.action, Action::Escalate);

        let d = static_screen(&summary(Category::Benign, 0.6, 0.1, vec![0.1; 5]), &cfg);
        assert_eq!(d.action, Action::Escalate);
        assert!((d.score - 0.4).abs() < 1e-12);
    }

    #[test]
    fn static_screen_gate_lifts_score_to_threshold() {
        let cfg = PolicyConfig { theta_agree: 0.9, ..Default::default() };
        // Agreement 0.8 misses theta 0.9 but 1 - 0.8 = 0.2 < tau 0.3.
        let d = static_screen(&summary(Category::Benign, 0.8, 0.1, vec![0.1; 5]), &cfg);
        assert_eq!(d.action, Action::Escalate);
        assert_eq!(d.score, cfg.tau_screen);
        assert!(matches!(d.evidence.detail, EvidenceDetail::StaticScreen { gate_forced: true, .. }));
        // Malignant ensemble with modest mean malignancy is still escalated.
        let d = static_screen(&summary(Category::Malignant, 1.0, 0.25, vec![0.25; 4]), &cfg);
        assert_eq!(d.action, Action::Escalate);
        assert_eq!(recompute_score(&d.evidence), Some(d.score));
    }

    #[test]
    fn experience_screen_pure_prior_endpoint() {
        let cfg = PolicyConfig { beta: 0.0, ..Default::default() };
        let neighbors: Vec<_> = (0..5).map(|i| neighbor(&format!("n{i}"), &[0.9], true, 1.0, i)).collect();
        let d = experience_screen(&summary(Category::Benign, 1.0, 0.0, vec![0.0]), &neighbors, &cfg);
        assert_eq!(d.score, 1.0);
        assert_eq!(d.action, Action::Escalate);
    }

    #[test]
    fn experience_screen_empty_neighbors_falls_back() {
        let cfg = PolicyConfig::default();
        let s = summary(Category::Benign, 1.0, 0.05, vec![0.05; 3]);
        let d = experience_screen(&s, &[], &cfg);
        let st = static_screen(&s, &cfg);
        assert_eq!(d.action, st.action);
        assert_eq!(d.score, st.score);
        assert!(d.evidence.fallback);
        assert_eq!(d.policy_id, POLICY_EXPERIENCE);
    }

    #[test]
    fn experience_screen_reliability_arithmetic() {
        // Model A (index 0) always right, model B always wrong, over 10
        // neighbors: 5 malignant, 5 benign.
        let mut neighbors = Vec::new();
        for i in 0..10u64 {
            let malignant = i < 5;
            let (a, b) = if malignant { (0.9, 0.1) } else { (0.1, 0.9) };
            neighbors.push(neighbor(&format!("n{i}"), &[a, b], malignant, 0.5, i));
        }
        let cfg = PolicyConfig::default();
        let (pa, pb) = (0.7, 0.2);
        let d = experience_screen(&summary(Category::Benign, 1.0, 0.45, vec![pa, pb]), &neighbors, &cfg);
        let EvidenceDetail::ExperienceScreen { reliabilities, trust_weighted_malignancy, hits, .. } =
            &d.evidence.detail
        else {
            panic!("wrong evidence kind");
        };
        assert_eq!(hits, &vec![10, 0]);
        assert!((reliabilities[0] - 11.0 / 12.0).abs() < 1e-15);
        assert!((reliabilities[1] - 1.0 / 12.0).abs() < 1e-15);
        let expected = (11.0 * pa + 1.0 * pb) / 12.0;
        assert!((trust_weighted_malignancy - expected).abs() < 1e-12);
        assert_eq!(recompute_score(&d.evidence), Some(d.score));
    }

    #[test]
    fn neighborhood_prior_weights() {
        let ev = |w: f64, m: bool| NeighborEvidence {
            case_id: "x".into(),
            similarity: w,
            weight: w.max(0.0),
            malignant: m,
        };
        assert_eq!(neighborhood_prior(&[ev(0.75, true), ev(0.25, false)]), 0.75);
        // All weights clipped to zero: plain fraction.
        assert_eq!(neighborhood_prior(&[ev(-0.5, true), ev(-0.1, false)]), 0.5);
        assert_eq!(neighborhood_prior(&[]), 0.0);
    }

    #[test]
    fn static_diag_examples() {
        let vocab = DescriptorVocabulary::default();
        let d = static_diag(&observation("a", &[0.5], Some(5)), &vocab).unwrap();
        assert_eq!(d.action, Action::Refer);
        assert_eq!(d.score, 1.0);

        let d = static_diag(&observation("a", &[0.5], Some(2)), &vocab).unwrap();
        assert_eq!(d.action, Action::NoRefer);
        assert_eq!(d.score, 0.05);

        let mut o = observation("a", &[0.5], Some(3));
        o.descriptor = Some(DescriptorRecord { conclusion: Some("malignant".into()), ..Default::default() });
        assert_eq!(static_diag(&o, &vocab).unwrap().action, Action::Refer);

        assert_eq!(
            static_diag(&observation("a", &[0.5], None), &vocab),
            Err(PolicyError::MissingDiagnosticFeatures("a".into()))
        );
    }

    #[test]
    fn experience_diag_examples() {
        let vocab = DescriptorVocabulary::default();
        let cfg = PolicyConfig::default();
        let benign: Vec<_> = (0..4).map(|i| neighbor(&format!("n{i}"), &[0.1], false, 0.8, i)).collect();

        let d = experience_diag(&observation("q", &[0.5], Some(4)), &benign, &cfg, &vocab).unwrap();
        assert_eq!(d.score, 0.5);
        assert_eq!(d.action, Action::Refer);

        let d = experience_diag(&observation("q", &[0.5], Some(2)), &benign, &cfg, &vocab).unwrap();
        assert!((d.score - 0.025).abs() < 1e-15);
        assert_eq!(d.action, Action::NoRefer);

        let o = observation("q", &[0.5], Some(3));
        let e = experience_diag(&o, &[], &cfg, &vocab).unwrap();
        let s = static_diag(&o, &vocab).unwrap();
        assert_eq!((e.action, e.score), (s.action, s.score));
        assert!(e.evidence.fallback);
    }

    struct Fixed(Result<ExternalResponse, ExternalError>);

    impl DecisionService for Fixed {
        fn decide(&self, _: &ExternalRequest, _: Duration) -> Result<ExternalResponse, ExternalError> {
            self.0.clone()
        }
    }

    fn request() -> (ExternalRequest, StageDecision) {
        let o = observation("q", &[0.2, 0.3], Some(3));
        let s = summarize(&o.panel);
        let fallback = experience_screen(&s, &[], &PolicyConfig::default());
        (
            ExternalRequest {
                stage: Stage::Screening,
                observation: o,
                ensemble_summary: s,
                neighbors: vec![],
            },
            fallback,
        )
    }

    #[test]
    fn external_passthrough() {
        let (req, fb) = request();
        let svc = Fixed(Ok(ExternalResponse {
            action: "escalate".into(),
            score: 0.9,
            rationale: Some("spiculated".into()),
        }));
        let d = external_policy_call(Some(&svc), &req, Duration::from_millis(10), fb);
        assert_eq!(d.action, Action::Escalate);
        assert_eq!(d.score, 0.9);
        assert_eq!(d.policy_id, POLICY_EXTERNAL);
        assert!(!d.evidence.fallback);
    }

    #[test]
    fn external_timeout_and_malformed_fall_back() {
        let (req, fb) = request();
        let d = external_policy_call(
            Some(&Fixed(Err(ExternalError::Timeout))),
            &req,
            Duration::from_millis(10),
            fb.clone(),
        );
        assert!(d.evidence.fallback);
        assert_eq!(d.action, fb.action);

        let svc = Fixed(Ok(ExternalResponse { action: "escalate".into(), score: 1.7, rationale: None }));
        let d = external_policy_call(Some(&svc), &req, Duration::from_millis(10), fb.clone());
        assert!(d.evidence.fallback);
        assert!(d.evidence.fallback_reason.unwrap().contains("outside"));

        let svc = Fixed(Ok(ExternalResponse { action: "refer".into(), score: 0.7, rationale: None }));
        let d = external_policy_call(Some(&svc), &req, Duration::from_millis(10), fb.clone());
        assert!(d.evidence.fallback);

        let d = external_policy_call(None, &req, Duration::from_millis(10), fb);
        assert!(d.evidence.fallback);
    }

    #[test]
    fn external_response_ignores_unknown_fields() {
        let r: ExternalResponse =
            serde_json::from_str(r#"{"action":"Clear","score":0.1,"tokens":42}"#).unwrap();
        assert_eq!(parse_external_response(Stage::Screening, &r).unwrap(), (Action::Clear, 0.1));
        let r: ExternalResponse = serde_json::from_str(r#"{"action":"no-refer","score":0.2}"#).unwrap();
        assert_eq!(parse_external_response(Stage::Diagnostic, &r).unwrap().0, Action::NoRefer);
    }

    #[test]
    fn config_validation() {
        assert!(PolicyConfig::default().validate().is_ok());
        assert!(PolicyConfig { alpha_smooth: 0.0, ..Default::default() }.validate().is_err());
        assert!(PolicyConfig { tau_screen: 1.2, ..Default::default() }.validate().is_err());
    }
}
