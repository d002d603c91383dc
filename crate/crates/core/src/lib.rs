//! Experience-conditioned two-stage triage.
//!
//! A screening stage clears low-risk cases from a classifier panel; escalated
//! cases reach a diagnostic stage that decides biopsy referral. Both stages
//! can condition on similar past cases retrieved from a memory bank of
//! pathology-confirmed decision trajectories.
//!
//! Module map:
//! - [`domain`]: categories, predictions, panels, feature vocabularies
//! - [`panel`]: majority vote and confidence vectors
//! - [`bank`]: append-only trajectory store with snapshots and a JSONL log
//! - [`retrieval`]: similarity functions and exact top-K search
//! - [`policy`]: static, experience-conditioned and external decision policies
//! - [`cascade`]: the two-stage state machine and stream runner
//! - [`synth`]: seeded synthetic populations
//! - [`eval`]: metrics, ablations and policy comparison
//! - [`ingest`]: JSONL/CSV case ingestion
//! - [`replay`]: offline verification of run reports

pub mod bank;
pub mod cascade;
pub mod domain;
pub mod eval;
pub mod ingest;
pub mod panel;
pub mod policy;
pub mod replay;
pub mod retrieval;
pub mod synth;

pub use bank::{BankError, BankHeader, BankSnapshot, MemoryBank, SeedSplit, Trajectory};
pub use cascade::{Cascade, CascadeError, CaseState, Phase, PolicyKind, RunConfig, RunMode, RunReport};
pub use domain::{
    CaseObservation, Category, ClassDistribution, DescriptorRecord, DescriptorVocabulary, DomainError,
    Embedding, LabeledCase, ModelPrediction, OutcomeLabel, OutcomeSource, PathologyOutcome, PredictionPanel,
    RadiologicalFeatureSet,
};
pub use eval::{MetricsReport, StageMetrics};
pub use panel::EnsembleSummary;
pub use policy::{Action, DecisionService, PolicyConfig, StageDecision};
pub use retrieval::{RetrievalConfig, RetrievalMode, ScoredNeighbor, Stage};
pub use synth::SynthSpec;
