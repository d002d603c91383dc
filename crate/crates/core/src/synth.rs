//! Seeded synthetic populations standing in for real ultrasound datasets.
//!
//! The population is a mixture of lesion prototypes. Each prototype has a
//! dominant category, a center in embedding space and a look that every
//! classifier misreads the same way (a shared shift of the malignancy
//! probability). A case draws its true category from the class prevalence,
//! then a prototype: one of its own category with probability
//! `prototype_purity`, otherwise one of another category (an atypical
//! presentation). Model `m`'s malignancy probability is the category's base
//! level plus the prototype shift, a per-case shift, the model's
//! false-positive bias and its private noise.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_distribution, Birads, Boundary, Calcification, CaseObservation, Category, DescriptorRecord,
    Echo, Edge, Embedding, LabeledCase, ModelPrediction, OutcomeLabel, OutcomeSource, PathologyOutcome,
    PredictionPanel, RadiologicalFeatureSet,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    /// Added to the malignancy probability on every case.
    pub fp_bias: f64,
    /// Standard deviation of the model's private noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_cases: usize,
    /// Prevalence of benign, malignant, normal.
    pub class_prevalence: [f64; 3],
    pub models: Vec<ModelProfile>,
    pub embedding_dim: usize,
    pub n_prototypes: usize,
    /// Probability that a case comes from a prototype of its own category.
    pub prototype_purity: f64,
    /// Norm of the per-case embedding noise relative to unit prototype centers.
    pub cluster_spread: f64,
    pub malignant_level: f64,
    pub benign_level: f64,
    /// Standard deviation of the per-prototype shift shared by all models.
    pub prototype_ambiguity: f64,
    /// Standard deviation of the per-case shift shared by all models.
    pub case_ambiguity: f64,
    pub datasets: Vec<String>,
    pub with_descriptors: bool,
    pub seed: u64,
}

impl SynthSpec {
    /// The population used by the acceptance experiments: 2,000 cases,
    /// eight models of which three over-call malignancy by +0.35.
    pub fn acceptance(seed: u64) -> Self {
        let models = (0..8)
            .map(|i| ModelProfile {
                model_id: format!("model_{i}"),
                fp_bias: if i >= 5 { 0.35 } else { 0.0 },
                noise: 0.08,
            })
            .collect();
        SynthSpec {
            n_cases: 2000,
            class_prevalence: [0.45, 0.30, 0.25],
            models,
            embedding_dim: 16,
            n_prototypes: 20,
            prototype_purity: 0.95,
            cluster_spread: 0.6,
            malignant_level: 0.75,
            benign_level: 0.15,
            prototype_ambiguity: 0.2,
            case_ambiguity: 0.08,
            datasets: vec!["synth".into()],
            with_descriptors: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        let sum: f64 = self.class_prevalence.iter().sum();
        if self.class_prevalence.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return bad("class_prevalence must be non-negative and sum to 1");
        }
        if self.models.is_empty() {
            return bad("at least one model is required");
        }
        let mut ids = std::collections::HashSet::new();
        if !self.models.iter().all(|m| ids.insert(m.model_id.as_str())) {
            return bad("model ids must be unique");
        }
        if self.models.iter().any(|m| !(m.noise >= 0.0 && m.fp_bias.is_finite())) {
            return bad("model noise must be non-negative and bias finite");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if !(self.cluster_spread >= 0.0 && self.case_ambiguity >= 0.0 && self.prototype_ambiguity >= 0.0) {
            return bad("spreads must be non-negative");
        }
        let populated = self.class_prevalence.iter().filter(|p| **p > 0.0).count();
        if self.n_prototypes < populated {
            return bad("need at least one prototype per category with non-zero prevalence");
        }
        if !(0.0..=1.0).contains(&self.prototype_purity) {
            return bad("prototype_purity must lie in [0, 1]");
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.malignant_level) || !unit(self.benign_level) {
            return bad("base levels must lie in [0, 1]");
        }
        if self.datasets.is_empty() {
            return bad("at least one dataset tag is required");
        }
        Ok(())
    }
}

const P_FLOOR: f64 = 0.01;
const P_CEIL: f64 = 0.98;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, values: &[T], weights: &[f64]) -> T {
    let idx = WeightedIndex::new(weights).expect("static weights").sample(rng);
    values[idx]
}

struct Prototype {
    category: Category,
    center: Vec<f64>,
    shift: f64,
}

/// Prototype counts per category, proportional to prevalence (largest
/// remainder) with at least one for every category that occurs.
fn prototype_counts(spec: &SynthSpec) -> [usize; 3] {
    let n = spec.n_prototypes;
    let quota = spec.class_prevalence.map(|p| p * n as f64);
    let mut counts = [0usize; 3];
    for c in 0..3 {
        counts[c] = quota[c].floor() as usize;
        if spec.class_prevalence[c] > 0.0 {
            counts[c] = counts[c].max(1);
        }
    }
    while counts.iter().sum::<usize>() < n {
        let c = (0..3)
            .filter(|&c| spec.class_prevalence[c] > 0.0)
            .max_by(|&a, &b| {
                (quota[a] - counts[a] as f64).total_cmp(&(quota[b] - counts[b] as f64)).then(b.cmp(&a))
            })
            .expect("some category occurs");
        counts[c] += 1;
    }
    while counts.iter().sum::<usize>() > n {
        let c = (0..3).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).expect("non-empty");
        counts[c] -= 1;
    }
    counts
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

fn prototypes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Prototype> {
    let counts = prototype_counts(spec);
    let mut out = Vec::with_capacity(spec.n_prototypes);
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            out.push(Prototype {
                category: Category::ALL[c],
                center: unit_vector(spec.embedding_dim, rng),
                shift: spec.prototype_ambiguity * normal(rng),
            });
        }
    }
    out
}

fn embedding(center: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> Embedding {
    let scale = spread / (center.len() as f64).sqrt();
    let v = center.iter().map(|c| c + scale * normal(rng)).collect();
    Embedding::new(v).expect("finite by construction")
}

fn panel(spec: &SynthSpec, truth: Category, shift: f64, rng: &mut ChaCha8Rng) -> PredictionPanel {
    let base = if truth.is_malignant() { spec.malignant_level } else { spec.benign_level };
    let ambiguity = shift + spec.case_ambiguity * normal(rng);
    let entries = spec
        .models
        .iter()
        .map(|m| {
            let p_mal = (base + ambiguity + m.fp_bias + m.noise * normal(rng)).clamp(P_FLOOR, P_CEIL);
            let rest = 1.0 - p_mal;
            let benign_share = match truth {
                Category::Benign => (0.8 + 0.5 * m.noise * normal(rng)).clamp(0.55, 0.95),
                Category::Normal => 1.0 - (0.8 + 0.5 * m.noise * normal(rng)).clamp(0.55, 0.95),
                Category::Malignant => rng.sample(Uniform::new(0.3, 0.7).expect("valid range")),
            };
            let benign = rest * benign_share;
            let dist = validate_distribution(&[benign, p_mal, rest - benign])
                .expect("constructed distribution is valid");
            ModelPrediction::new(m.model_id.clone(), dist)
        })
        .collect();
    PredictionPanel::new(entries).expect("validated model ids")
}

/// Per-attribute category weights: BI-RADS, edge, boundary, calcification, echo.
type AttributeWeights = ([f64; 4], [f64; 3], [f64; 4], [f64; 6], [f64; 4]);

fn features(truth: Category, rng: &mut ChaCha8Rng) -> RadiologicalFeatureSet {
    let (birads_w, edge_w, boundary_w, calc_w, echo_w): AttributeWeights = match truth {
        Category::Malignant => (
            [0.02, 0.10, 0.43, 0.45],
            [0.15, 0.65, 0.20],
            [0.10, 0.45, 0.30, 0.15],
            [0.25, 0.30, 0.15, 0.10, 0.15, 0.05],
            [0.40, 0.35, 0.05, 0.20],
        ),
        Category::Benign => (
            [0.40, 0.35, 0.20, 0.05],
            [0.65, 0.10, 0.25],
            [0.50, 0.08, 0.12, 0.30],
            [0.70, 0.05, 0.07, 0.05, 0.03, 0.10],
            [0.30, 0.15, 0.35, 0.20],
        ),
        Category::Normal => (
            [0.70, 0.20, 0.08, 0.02],
            [0.80, 0.05, 0.15],
            [0.65, 0.05, 0.05, 0.25],
            [0.85, 0.02, 0.03, 0.03, 0.02, 0.05],
            [0.25, 0.10, 0.45, 0.20],
        ),
    };
    let birads = pick(rng, &Birads::VALUES, &birads_w);
    RadiologicalFeatureSet {
        birads: Birads::new(birads).expect("vocabulary value"),
        edge: pick(rng, Edge::ALL, &edge_w),
        boundary: pick(rng, Boundary::ALL, &boundary_w),
        calcification: pick(rng, Calcification::ALL, &calc_w),
        echo: pick(rng, Echo::ALL, &echo_w),
    }
}

fn descriptor(truth: Category, f: &RadiologicalFeatureSet, rng: &mut ChaCha8Rng) -> DescriptorRecord {
    let s = |v: &str| Some(v.to_string());
    let malignant = truth.is_malignant();
    let conclusion = match truth {
        Category::Malignant => {
            pick(rng, &["malignant", "suspicious", "probably_benign", "benign"], &[0.45, 0.30, 0.15, 0.10])
        }
        Category::Benign => {
            pick(rng, &["malignant", "suspicious", "probably_benign", "benign"], &[0.02, 0.08, 0.35, 0.55])
        }
        Category::Normal => {
            pick(rng, &["malignant", "suspicious", "probably_benign", "benign"], &[0.0, 0.03, 0.17, 0.80])
        }
    };
    let birads = match f.birads.value() {
        2 => "2",
        3 => "3",
        4 => pick(rng, &["4a", "4b", "4c"], &[0.5, 0.3, 0.2]),
        _ => "5",
    };
    DescriptorRecord {
        orientation: s(if malignant && rng.random_bool(0.6) { "not_parallel" } else { "parallel" }),
        margins: s(match f.edge {
            Edge::Regular => "circumscribed",
            Edge::Irregular => pick(rng, &["spiculated", "angular", "microlobulated"], &[0.4, 0.3, 0.3]),
            Edge::PartiallyRegular => "indistinct",
        }),
        shape: s(match f.edge {
            Edge::Regular => pick(rng, &["oval", "round"], &[0.7, 0.3]),
            _ => pick(rng, &["irregular", "oval"], &[0.8, 0.2]),
        }),
        echogenicity: s(match f.echo {
            Echo::Low | Echo::SlightlyLow => "hypoechoic",
            Echo::Heterogeneous => "heterogeneous",
            Echo::CysticSolidMixed => "complex",
        }),
        calcification: s(match f.calcification {
            Calcification::No => "none",
            Calcification::Coarse => "macro",
            _ => "micro",
        }),
        birads: s(birads),
        histopathology: None,
        conclusion: s(conclusion),
    }
}

/// Generates the population. Identical specs give identical streams.
pub fn generate(spec: &SynthSpec) -> Result<Vec<LabeledCase>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = prototypes(spec, &mut rng);
    let by_category: Vec<Vec<usize>> = Category::ALL
        .iter()
        .map(|&c| (0..protos.len()).filter(|&j| protos[j].category == c).collect())
        .collect();
    let others: Vec<Vec<usize>> = Category::ALL
        .iter()
        .map(|&c| (0..protos.len()).filter(|&j| protos[j].category != c).collect())
        .collect();
    let prevalence =
        WeightedIndex::new(spec.class_prevalence).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.n_cases);
    for i in 0..spec.n_cases {
        let truth = Category::ALL[prevalence.sample(&mut rng)];
        let atypical = &others[truth.index()];
        let pool = if !atypical.is_empty() && !rng.random_bool(spec.prototype_purity) {
            atypical
        } else {
            &by_category[truth.index()]
        };
        let proto = &protos[pool[rng.random_range(0..pool.len())]];
        let dataset = spec.datasets[i % spec.datasets.len()].clone();
        let embedding = embedding(&proto.center, spec.cluster_spread, &mut rng);
        let panel = panel(spec, truth, proto.shift, &mut rng);
        let diag = features(truth, &mut rng);
        let descriptor = spec.with_descriptors.then(|| descriptor(truth, &diag, &mut rng));
        out.push(LabeledCase {
            observation: CaseObservation {
                case_id: format!("{dataset}-{:05}", i),
                embedding,
                panel,
                diag_features: Some(diag),
                descriptor,
            },
            dataset,
            outcome: Some(PathologyOutcome {
                label: OutcomeLabel::from_category(truth),
                source: OutcomeSource::GroundTruthDataset,
            }),
        });
    }
    Ok(out)
}

/// True category of a generated case.
pub fn truth_category(case: &LabeledCase) -> Option<Category> {
    case.outcome.map(|o| match o.label {
        OutcomeLabel::Malignant => Category::Malignant,
        OutcomeLabel::BenignConfirmed => Category::Benign,
        OutcomeLabel::NormalConfirmed => Category::Normal,
    })
}
