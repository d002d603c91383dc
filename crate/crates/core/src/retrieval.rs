//! Stage-specific similarity and exact top-K exemplar retrieval over a bank
//! snapshot.
//!
//! Screening similarity blends the cosine of image embeddings with the cosine
//! of the per-model malignancy confidence vectors. Diagnostic similarity
//! blends the embedding cosine with the cosine of the one-hot radiological
//! feature block (plus the descriptor block when both cases carry one).

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{BankSnapshot, Trajectory};
use crate::domain::{encode_features, CaseObservation, DescriptorVocabulary};
use crate::panel::confidence_vector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("vector contains a non-finite entry")]
    NonFinite,
    #[error("embedding dimensions differ ({query} vs {stored})")]
    DimensionMismatch { query: usize, stored: usize },
    #[error("prediction panels list different models")]
    PanelShapeMismatch,
    #[error("case `{0}` has no diagnostic features")]
    MissingDiagnosticFeatures(String),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Combined,
    ImageOnly,
    VectorOnly,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 3] =
        [RetrievalMode::Combined, RetrievalMode::ImageOnly, RetrievalMode::VectorOnly];

    /// The blend weight actually applied for a configured weight.
    pub fn effective_weight(self, configured: f64) -> f64 {
        match self {
            RetrievalMode::Combined => configured,
            RetrievalMode::ImageOnly => 1.0,
            RetrievalMode::VectorOnly => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::Combined => "combined",
            RetrievalMode::ImageOnly => "image_only",
            RetrievalMode::VectorOnly => "vector_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Screening,
    Diagnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub lambda: f64,
    pub k: usize,
    pub mode: RetrievalMode,
    pub diag_lambda: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { lambda: 0.5, k: 10, mode: RetrievalMode::Combined, diag_lambda: 0.5 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 {
            return Err(RetrievalError::InvalidConfig("k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RetrievalError::InvalidConfig("lambda must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.diag_lambda) {
            return Err(RetrievalError::InvalidConfig("diag_lambda must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A retrieved exemplar.
#[derive(Debug, Clone)]
pub struct ScoredNeighbor {
    pub case_id: String,
    pub similarity: f64,
    pub sequence: u64,
    pub trajectory: Arc<Trajectory>,
}

/// Ranking order: similarity descending, then older entries first.
pub fn neighbor_order(a_sim: f64, a_seq: u64, b_sim: f64, b_seq: u64) -> Ordering {
    b_sim.total_cmp(&a_sim).then(a_seq.cmp(&b_seq))
}

/// Cosine similarity. Zero-norm inputs yield 0. The result is clamped to
/// [-1, 1] to absorb rounding.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::LengthMismatch(a.len(), b.len()));
    }
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        if !x.is_finite() || !y.is_finite() {
            return Err(RetrievalError::NonFinite);
        }
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

fn embedding_cosine(q: &CaseObservation, s: &CaseObservation) -> Result<f64, RetrievalError> {
    let (qd, sd) = (q.embedding.dim(), s.embedding.dim());
    if qd != sd {
        return Err(RetrievalError::DimensionMismatch { query: qd, stored: sd });
    }
    cosine(q.embedding.values(), s.embedding.values())
}

fn blend(weight: f64, image: f64, vector: f64) -> f64 {
    weight * image + (1.0 - weight) * vector
}

/// `lambda * cos(embeddings) + (1 - lambda) * cos(confidence vectors)`.
pub fn screening_similarity(
    query: &CaseObservation,
    stored: &CaseObservation,
    lambda: f64,
) -> Result<f64, RetrievalError> {
    if !query.panel.same_shape(&stored.panel) {
        return Err(RetrievalError::PanelShapeMismatch);
    }
    let image = embedding_cosine(query, stored)?;
    let vector = cosine(&confidence_vector(&query.panel), &confidence_vector(&stored.panel))?;
    Ok(blend(lambda, image, vector))
}

/// Joint diagnostic feature vector: one-hot attribute block, followed by
/// the descriptor block when `with_descriptor` is set.
fn diagnostic_vector(
    obs: &CaseObservation,
    vocab: &DescriptorVocabulary,
    with_descriptor: bool,
) -> Result<Vec<f64>, RetrievalError> {
    let features = obs
        .diag_features
        .as_ref()
        .ok_or_else(|| RetrievalError::MissingDiagnosticFeatures(obs.case_id.clone()))?;
    let mut v = encode_features(features).to_vec();
    if with_descriptor {
        if let Some(d) = &obs.descriptor {
            v.extend(vocab.encode(d));
        }
    }
    Ok(v)
}

/// `diag_lambda * cos(embeddings) + (1 - diag_lambda) * cos(feature vectors)`.
/// The descriptor block participates only when both cases have a descriptor.
pub fn diagnostic_similarity(
    query: &CaseObservation,
    stored: &CaseObservation,
    diag_lambda: f64,
    vocab: &DescriptorVocabulary,
) -> Result<f64, RetrievalError> {
    let both = query.descriptor.is_some() && stored.descriptor.is_some();
    let qv = diagnostic_vector(query, vocab, both)?;
    let sv = diagnostic_vector(stored, vocab, both)?;
    let image = embedding_cosine(query, stored)?;
    let vector = cosine(&qv, &sv)?;
    Ok(blend(diag_lambda, image, vector))
}

/// Similarity of `query` to one stored observation under `cfg` for `stage`.
pub fn stage_similarity(
    query: &CaseObservation,
    stored: &CaseObservation,
    cfg: &RetrievalConfig,
    stage: Stage,
    vocab: &DescriptorVocabulary,
) -> Result<f64, RetrievalError> {
    match stage {
        Stage::Screening => screening_similarity(query, stored, cfg.mode.effective_weight(cfg.lambda)),
        Stage::Diagnostic => {
            diagnostic_similarity(query, stored, cfg.mode.effective_weight(cfg.diag_lambda), vocab)
        }
    }
}

/// Exact top-K scan. The query's own case id is never returned; at the
/// diagnostic stage, stored entries without diagnostic features are skipped.
pub fn top_k(
    query: &CaseObservation,
    bank: &BankSnapshot,
    cfg: &RetrievalConfig,
    stage: Stage,
    vocab: &DescriptorVocabulary,
) -> Result<Vec<ScoredNeighbor>, RetrievalError> {
    cfg.validate()?;
    if stage == Stage::Diagnostic && query.diag_features.is_none() {
        return Err(RetrievalError::MissingDiagnosticFeatures(query.case_id.clone()));
    }
    let mut scored: Vec<(f64, u64, &Arc<Trajectory>)> = Vec::with_capacity(bank.len());
    for t in bank.iter() {
        if t.case_id == query.case_id {
            continue;
        }
        if stage == Stage::Diagnostic && t.observation.diag_features.is_none() {
            continue;
        }
        let sim = stage_similarity(query, &t.observation, cfg, stage, vocab)?;
        scored.push((sim, t.recorded_at, t));
    }
    let cmp = |a: &(f64, u64, &Arc<Trajectory>), b: &(f64, u64, &Arc<Trajectory>)| {
        neighbor_order(a.0, a.1, b.0, b.1)
    };
    let k = cfg.k.min(scored.len());
    if k < scored.len() {
        if k > 0 {
            scored.select_nth_unstable_by(k - 1, cmp);
        }
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(similarity, sequence, t)| ScoredNeighbor {
            case_id: t.case_id.clone(),
            similarity,
            sequence,
            trajectory: Arc::clone(t),
        })
        .collect())
}
