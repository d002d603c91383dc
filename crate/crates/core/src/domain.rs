//! Shared domain types: screening categories, per-model predictions, the
//! prediction panel, embeddings, the radiological feature vocabulary and the
//! descriptor record.
//!
//! Every type validates on construction and on deserialization, so a value
//! that exists is a value that satisfies its invariants.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on the sum of a class distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("distribution entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("distribution entry {index} is not finite")]
    NonFiniteEntry { index: usize },
    #[error("distribution sums to {sum}, outside 1 ± 1e-6")]
    SumOutOfTolerance { sum: f64 },
    #[error("distribution must have exactly 3 entries, got {0}")]
    WrongArity(usize),
    #[error("prediction panel is empty")]
    EmptyPanel,
    #[error("duplicate model id `{0}` in panel")]
    DuplicateModelId(String),
    #[error("stored prediction for `{model_id}` is inconsistent with its distribution")]
    InconsistentPrediction { model_id: String },
    #[error("embedding is empty")]
    EmptyEmbedding,
    #[error("embedding entry {0} is not finite")]
    NonFiniteEmbedding(usize),
    #[error("BIRADS category must be 2..=5, got {0}")]
    InvalidBirads(u8),
    #[error("descriptor field `{field}` has value `{value}` outside the configured vocabulary")]
    DescriptorValue { field: &'static str, value: String },
}

/// Screening category. The declaration order is the total order used for
/// argmax tie-breaking: `Benign < Malignant < Normal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Benign,
    Malignant,
    Normal,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Benign, Category::Malignant, Category::Normal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Self::ALL.get(i).copied()
    }

    pub fn is_malignant(self) -> bool {
        self == Category::Malignant
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Benign => "benign",
            Category::Malignant => "malignant",
            Category::Normal => "normal",
        })
    }
}

/// Argmax over a per-category score array; ties go to the category that
/// comes first in [`Category`] order.
pub fn argmax_category(scores: &[f64; 3]) -> Category {
    let mut best = 0;
    for i in 1..3 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Category::ALL[best]
}

/// Probability vector over {benign, malignant, normal}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "[f64; 3]")]
pub struct ClassDistribution([f64; 3]);

impl ClassDistribution {
    pub fn probs(&self) -> &[f64; 3] {
        &self.0
    }

    pub fn get(&self, c: Category) -> f64 {
        self.0[c.index()]
    }

    pub fn argmax(&self) -> Category {
        argmax_category(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ClassDistribution {
    type Error = DomainError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        validate_distribution(&v)
    }
}

impl TryFrom<[f64; 3]> for ClassDistribution {
    type Error = DomainError;

    fn try_from(v: [f64; 3]) -> Result<Self, Self::Error> {
        validate_distribution(&v)
    }
}

impl From<ClassDistribution> for [f64; 3] {
    fn from(d: ClassDistribution) -> Self {
        d.0
    }
}

/// Checks a raw probability vector. Invalid input is rejected, never
/// renormalized.
pub fn validate_distribution(probs: &[f64]) -> Result<ClassDistribution, DomainError> {
    if probs.len() != 3 {
        return Err(DomainError::WrongArity(probs.len()));
    }
    for (index, &value) in probs.iter().enumerate() {
        if !value.is_finite() {
            return Err(DomainError::NonFiniteEntry { index });
        }
        if value < 0.0 {
            return Err(DomainError::NegativeEntry { index, value });
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(DomainError::SumOutOfTolerance { sum });
    }
    Ok(ClassDistribution([probs[0], probs[1], probs[2]]))
}

/// One classifier's output for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelPrediction")]
pub struct ModelPrediction {
    model_id: String,
    predicted: Category,
    distribution: ClassDistribution,
    confidence: f64,
}

#[derive(Deserialize)]
struct RawModelPrediction {
    model_id: String,
    distribution: ClassDistribution,
    #[serde(default)]
    predicted: Option<Category>,
    #[serde(default)]
    confidence: Option<f64>,
}

impl TryFrom<RawModelPrediction> for ModelPrediction {
    type Error = DomainError;

    fn try_from(raw: RawModelPrediction) -> Result<Self, Self::Error> {
        let p = ModelPrediction::new(raw.model_id, raw.distribution);
        let predicted_ok = raw.predicted.is_none_or(|c| c == p.predicted);
        let confidence_ok = raw.confidence.is_none_or(|c| (c - p.confidence).abs() <= DISTRIBUTION_TOLERANCE);
        if predicted_ok && confidence_ok {
            Ok(p)
        } else {
            Err(DomainError::InconsistentPrediction { model_id: p.model_id })
        }
    }
}

impl ModelPrediction {
    pub fn new(model_id: impl Into<String>, distribution: ClassDistribution) -> Self {
        let predicted = distribution.argmax();
        ModelPrediction {
            model_id: model_id.into(),
            predicted,
            distribution,
            confidence: distribution.get(predicted),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn predicted(&self) -> Category {
        self.predicted
    }

    pub fn distribution(&self) -> &ClassDistribution {
        &self.distribution
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn malignancy(&self) -> f64 {
        self.distribution.get(Category::Malignant)
    }
}

/// Ordered outputs of the M screening classifiers for one case. The order is
/// part of the deployment: confidence vectors are compared position by
/// position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ModelPrediction>", into = "Vec<ModelPrediction>")]
pub struct PredictionPanel(Vec<ModelPrediction>);

impl PredictionPanel {
    pub fn new(entries: Vec<ModelPrediction>) -> Result<Self, DomainError> {
        if entries.is_empty() {
            return Err(DomainError::EmptyPanel);
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.model_id.as_str()) {
                return Err(DomainError::DuplicateModelId(e.model_id.clone()));
            }
        }
        Ok(PredictionPanel(entries))
    }

    pub fn entries(&self) -> &[ModelPrediction] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn model_ids(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|e| e.model_id.as_str())
    }

    /// True when both panels list the same models in the same order.
    pub fn same_shape(&self, other: &PredictionPanel) -> bool {
        self.len() == other.len() && self.model_ids().eq(other.model_ids())
    }
}

impl TryFrom<Vec<ModelPrediction>> for PredictionPanel {
    type Error = DomainError;

    fn try_from(v: Vec<ModelPrediction>) -> Result<Self, Self::Error> {
        PredictionPanel::new(v)
    }
}

impl From<PredictionPanel> for Vec<ModelPrediction> {
    fn from(p: PredictionPanel) -> Self {
        p.0
    }
}

/// Precomputed image embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, DomainError> {
        if values.is_empty() {
            return Err(DomainError::EmptyEmbedding);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DomainError::NonFiniteEmbedding(i));
        }
        Ok(Embedding(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn scaled(&self, factor: f64) -> Result<Embedding, DomainError> {
        Embedding::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = DomainError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Birads(u8);

impl Birads {
    pub const VALUES: [u8; 4] = [2, 3, 4, 5];

    pub fn new(v: u8) -> Result<Self, DomainError> {
        if (2..=5).contains(&v) {
            Ok(Birads(v))
        } else {
            Err(DomainError::InvalidBirads(v))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    fn slot(self) -> usize {
        (self.0 - 2) as usize
    }
}

impl TryFrom<u8> for Birads {
    type Error = DomainError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Birads::new(v)
    }
}

impl From<Birads> for u8 {
    fn from(b: Birads) -> Self {
        b.0
    }
}

macro_rules! vocab_enum {
    ($name:ident { $($variant:ident),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            fn slot(self) -> usize {
                self as usize
            }
        }
    };
}

vocab_enum!(Edge { Regular, Irregular, PartiallyRegular });
vocab_enum!(Boundary { Clear, Unclear, SomewhatUnclear, FairlyClear });
vocab_enum!(Calcification { No, Micro, Suspected, Multiple, MultipleClusteredMicro, Coarse });
vocab_enum!(Echo { Low, Heterogeneous, CysticSolidMixed, SlightlyLow });

/// Outputs of the five lesion-attribute heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiologicalFeatureSet {
    pub birads: Birads,
    pub edge: Edge,
    pub boundary: Boundary,
    pub calcification: Calcification,
    pub echo: Echo,
}

/// Length of [`encode_features`] output: 4 + 3 + 4 + 6 + 4.
pub const FEATURE_DIM: usize = 21;

const EDGE_OFFSET: usize = 4;
const BOUNDARY_OFFSET: usize = 7;
const CALCIFICATION_OFFSET: usize = 11;
const ECHO_OFFSET: usize = 17;

/// One-hot encoding in the fixed order birads | edge | boundary |
/// calcification | echo.
pub fn encode_features(f: &RadiologicalFeatureSet) -> [f64; FEATURE_DIM] {
    let mut v = [0.0; FEATURE_DIM];
    v[f.birads.slot()] = 1.0;
    v[EDGE_OFFSET + f.edge.slot()] = 1.0;
    v[BOUNDARY_OFFSET + f.boundary.slot()] = 1.0;
    v[CALCIFICATION_OFFSET + f.calcification.slot()] = 1.0;
    v[ECHO_OFFSET + f.echo.slot()] = 1.0;
    v
}

/// Structured report fields produced by the radiological description
/// generator. Each field is a categorical value from a [`DescriptorVocabulary`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margins: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echogenicity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calcification: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub birads: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histopathology: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conclusion: Option<String>,
}

impl DescriptorRecord {
    pub const FIELDS: [&'static str; 8] = [
        "orientation",
        "margins",
        "shape",
        "echogenicity",
        "calcification",
        "birads",
        "histopathology",
        "conclusion",
    ];

    fn values(&self) -> [Option<&str>; 8] {
        [
            self.orientation.as_deref(),
            self.margins.as_deref(),
            self.shape.as_deref(),
            self.echogenicity.as_deref(),
            self.calcification.as_deref(),
            self.birads.as_deref(),
            self.histopathology.as_deref(),
            self.conclusion.as_deref(),
        ]
    }
}

/// Allowed values for each descriptor field, plus the conclusions that count
/// as a malignancy finding for the rule-based referral policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorVocabulary {
    pub orientation: Vec<String>,
    pub margins: Vec<String>,
    pub shape: Vec<String>,
    pub echogenicity: Vec<String>,
    pub calcification: Vec<String>,
    pub birads: Vec<String>,
    pub histopathology: Vec<String>,
    pub conclusion: Vec<String>,
    pub malignant_conclusions: Vec<String>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for DescriptorVocabulary {
    fn default() -> Self {
        DescriptorVocabulary {
            orientation: strings(&["parallel", "not_parallel"]),
            margins: strings(&["circumscribed", "indistinct", "angular", "microlobulated", "spiculated"]),
            shape: strings(&["oval", "round", "irregular"]),
            echogenicity: strings(&[
                "anechoic",
                "hypoechoic",
                "isoechoic",
                "hyperechoic",
                "complex",
                "heterogeneous",
            ]),
            calcification: strings(&["none", "macro", "micro"]),
            birads: strings(&["2", "3", "4a", "4b", "4c", "5"]),
            histopathology: strings(&[
                "fibroadenoma",
                "cyst",
                "fibrocystic",
                "ductal_carcinoma",
                "lobular_carcinoma",
                "other",
            ]),
            conclusion: strings(&["benign", "probably_benign", "suspicious", "malignant"]),
            malignant_conclusions: strings(&["suspicious", "malignant"]),
        }
    }
}

impl DescriptorVocabulary {
    fn fields(&self) -> [&[String]; 8] {
        [
            &self.orientation,
            &self.margins,
            &self.shape,
            &self.echogenicity,
            &self.calcification,
            &self.birads,
            &self.histopathology,
            &self.conclusion,
        ]
    }

    /// Total length of the descriptor one-hot block.
    pub fn block_len(&self) -> usize {
        self.fields().iter().map(|f| f.len()).sum()
    }

    pub fn validate(&self, record: &DescriptorRecord) -> Result<(), DomainError> {
        for ((name, allowed), value) in
            DescriptorRecord::FIELDS.iter().zip(self.fields()).zip(record.values())
        {
            if let Some(v) = value {
                if !allowed.iter().any(|a| a == v) {
                    return Err(DomainError::DescriptorValue { field: name, value: v.to_string() });
                }
            }
        }
        Ok(())
    }

    /// One-hot block over all eight fields in declaration order. Absent
    /// fields (and values outside the vocabulary) contribute all zeros.
    pub fn encode(&self, record: &DescriptorRecord) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.block_len());
        for (allowed, value) in self.fields().iter().zip(record.values()) {
            let start = out.len();
            out.resize(start + allowed.len(), 0.0);
            if let Some(pos) = value.and_then(|v| allowed.iter().position(|a| a == v)) {
                out[start + pos] = 1.0;
            }
        }
        out
    }

    pub fn is_malignant_conclusion(&self, conclusion: &str) -> bool {
        self.malignant_conclusions.iter().any(|c| c == conclusion)
    }
}

/// Everything known about a case before its outcome is confirmed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseObservation {
    pub case_id: String,
    pub embedding: Embedding,
    pub panel: PredictionPanel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag_features: Option<RadiologicalFeatureSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<DescriptorRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLabel {
    Malignant,
    BenignConfirmed,
    NormalConfirmed,
}

impl OutcomeLabel {
    pub fn from_category(c: Category) -> Self {
        match c {
            Category::Benign => OutcomeLabel::BenignConfirmed,
            Category::Malignant => OutcomeLabel::Malignant,
            Category::Normal => OutcomeLabel::NormalConfirmed,
        }
    }

    pub fn is_malignant(self) -> bool {
        self == OutcomeLabel::Malignant
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeSource {
    Biopsy,
    GroundTruthDataset,
}

/// Confirmed pathology for a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathologyOutcome {
    pub label: OutcomeLabel,
    pub source: OutcomeSource,
}

impl PathologyOutcome {
    pub fn is_malignant(&self) -> bool {
        self.label.is_malignant()
    }
}

/// A case as it arrives from ingestion or the synthetic generator: the
/// observation, an optional ground-truth outcome and the dataset it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCase {
    pub dataset: String,
    pub observation: CaseObservation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<PathologyOutcome>,
}

impl LabeledCase {
    pub fn case_id(&self) -> &str {
        &self.observation.case_id
    }
}
