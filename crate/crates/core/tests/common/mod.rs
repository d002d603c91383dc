#![allow(dead_code)]

use proptest::prelude::*;
use triage_core::bank::Trajectory;
use triage_core::domain::{
    validate_distribution, Birads, Boundary, Calcification, Echo, Edge, OutcomeSource, RadiologicalFeatureSet,
};
use triage_core::policy::StageDecision;
use triage_core::{
    CaseObservation, Category, Embedding, LabeledCase, ModelPrediction, OutcomeLabel, PathologyOutcome,
    PredictionPanel,
};

pub fn distribution_for(predicted: Category, margin: f64) -> [f64; 3] {
    let mut p = [(1.0 - margin) / 3.0; 3];
    p[predicted.index()] += margin;
    p
}

pub fn panel_from_probs(probs: &[[f64; 3]]) -> PredictionPanel {
    PredictionPanel::new(
        probs
            .iter()
            .enumerate()
            .map(|(i, p)| ModelPrediction::new(format!("m{i}"), validate_distribution(p).unwrap()))
            .collect(),
    )
    .unwrap()
}

/// A probability triple whose entries sum to one.
pub fn arb_probs() -> impl Strategy<Value = [f64; 3]> {
    (0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b)| {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        [lo, hi - lo, 1.0 - hi]
    })
}

pub fn arb_features() -> impl Strategy<Value = RadiologicalFeatureSet> {
    (0usize..4, 0usize..3, 0usize..4, 0usize..6, 0usize..4).prop_map(|(b, e, bo, c, ec)| {
        RadiologicalFeatureSet {
            birads: Birads::new(Birads::VALUES[b]).unwrap(),
            edge: Edge::ALL[e],
            boundary: Boundary::ALL[bo],
            calcification: Calcification::ALL[c],
            echo: Echo::ALL[ec],
        }
    })
}

pub fn arb_outcome() -> impl Strategy<Value = OutcomeLabel> {
    prop_oneof![
        Just(OutcomeLabel::Malignant),
        Just(OutcomeLabel::BenignConfirmed),
        Just(OutcomeLabel::NormalConfirmed)
    ]
}

/// Observation with a `dim`-dimensional embedding and an `m`-model panel.
/// Embedding entries come from a small integer grid so that exact ties occur.
pub fn arb_observation(dim: usize, m: usize) -> impl Strategy<Value = CaseObservation> {
    (
        prop::collection::vec(-3i32..=3, dim),
        prop::collection::vec(arb_probs(), m),
        prop::option::of(arb_features()),
    )
        .prop_map(|(emb, probs, features)| CaseObservation {
            case_id: String::new(),
            embedding: Embedding::new(emb.into_iter().map(f64::from).collect()).unwrap(),
            panel: panel_from_probs(&probs),
            diag_features: features,
            descriptor: None,
        })
}

pub fn seeded_trajectory(mut obs: CaseObservation, id: &str, label: OutcomeLabel) -> Trajectory {
    obs.case_id = id.to_string();
    Trajectory {
        case_id: id.to_string(),
        dataset: "prop".into(),
        observation: obs,
        screening_decision: StageDecision::seeded(),
        diagnostic_decision: None,
        retrieved_ids_screening: vec![],
        retrieved_ids_diagnostic: None,
        outcome: PathologyOutcome { label, source: OutcomeSource::Biopsy },
        recorded_at: 0,
    }
}

pub fn labeled(obs: CaseObservation, dataset: &str, label: OutcomeLabel) -> LabeledCase {
    LabeledCase {
        dataset: dataset.into(),
        observation: obs,
        outcome: Some(PathologyOutcome { label, source: OutcomeSource::GroundTruthDataset }),
    }
}

/// Reference cosine, written independently of the library.
pub fn ref_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}
