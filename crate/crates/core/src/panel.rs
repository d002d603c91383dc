//! Screening-stage aggregation of the classifier panel.

use serde::{Deserialize, Serialize};

use crate::domain::{Category, PredictionPanel};

/// Vote tie-break priority, highest risk first.
const RISK_ORDER: [Category; 3] = [Category::Malignant, Category::Benign, Category::Normal];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub ensemble_prediction: Category,
    /// Counts indexed in [`Category`] order (benign, malignant, normal).
    pub vote_counts: [u32; 3],
    pub agreement_fraction: f64,
    pub mean_malignancy: f64,
    pub confidence_vector: Vec<f64>,
}

impl EnsembleSummary {
    pub fn panel_size(&self) -> usize {
        self.confidence_vector.len()
    }
}

fn vote_counts(panel: &PredictionPanel) -> [u32; 3] {
    let mut counts = [0u32; 3];
    for e in panel.entries() {
        counts[e.predicted().index()] += 1;
    }
    counts
}

fn vote_winner(counts: &[u32; 3]) -> Category {
    let mut best = RISK_ORDER[0];
    for &c in &RISK_ORDER[1..] {
        if counts[c.index()] > counts[best.index()] {
            best = c;
        }
    }
    best
}

/// Plurality vote over the panel's predicted categories. Ties resolve toward
/// the higher-risk category (malignant, then benign, then normal).
pub fn majority_vote(panel: &PredictionPanel) -> Category {
    vote_winner(&vote_counts(panel))
}

/// Per-model malignancy probabilities in panel order.
pub fn confidence_vector(panel: &PredictionPanel) -> Vec<f64> {
    panel.entries().iter().map(|e| e.malignancy()).collect()
}

pub fn summarize(panel: &PredictionPanel) -> EnsembleSummary {
    let counts = vote_counts(panel);
    let m = panel.len() as f64;
    let confidence_vector = confidence_vector(panel);
    let mean_malignancy = confidence_vector.iter().sum::<f64>() / m;
    let max_votes = *counts.iter().max().expect("three categories");
    EnsembleSummary {
        ensemble_prediction: vote_winner(&counts),
        vote_counts: counts,
        agreement_fraction: max_votes as f64 / m,
        mean_malignancy,
        confidence_vector,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{validate_distribution, ModelPrediction};

    fn panel_of(preds: &[Category]) -> PredictionPanel {
        let entries = preds
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut p = [0.1, 0.1, 0.1];
                p[c.index()] = 0.8;
                ModelPrediction::new(format!("m{i}"), validate_distribution(&p).unwrap())
            })
            .collect();
        PredictionPanel::new(entries).unwrap()
    }

    fn panel_with_malignancy(ps: &[f64]) -> PredictionPanel {
        let entries = ps
            .iter()
            .enumerate()
            .map(|(i, &pm)| {
                let rest = (1.0 - pm) / 2.0;
                ModelPrediction::new(
                    format!("m{i}"),
                    validate_distribution(&[rest, pm, 1.0 - pm - rest]).unwrap(),
                )
            })
            .collect();
        PredictionPanel::new(entries).unwrap()
    }

    use Category::*;

    #[test]
    fn unanimous_vote() {
        assert_eq!(majority_vote(&panel_of(&[Benign; 14])), Benign);
    }

    #[test]
    fn plurality_vote() {
        let p = panel_of(&[Malignant, Malignant, Benign, Normal, Malignant]);
        assert_eq!(majority_vote(&p), Malignant);
        let s = summarize(&p);
        assert_eq!(s.vote_counts, [1, 3, 1]);
        assert_eq!(s.agreement_fraction, 0.6);
    }

    #[test]
    fn ties_resolve_toward_risk() {
        assert_eq!(majority_vote(&panel_of(&[Malignant, Benign])), Malignant);
        assert_eq!(majority_vote(&panel_of(&[Benign, Malignant])), Malignant);
        assert_eq!(majority_vote(&panel_of(&[Normal, Benign])), Benign);
        assert_eq!(majority_vote(&panel_of(&[Normal, Malignant, Benign])), Malignant);
    }

    #[test]
    fn confidence_vector_reads_malignant_column() {
        let p = panel_with_malignancy(&[0.9, 0.2, 0.5]);
        assert_eq!(confidence_vector(&p), vec![0.9, 0.2, 0.5]);

        let entries = (0..4)
            .map(|i| ModelPrediction::new(format!("m{i}"), validate_distribution(&[0.1, 0.8, 0.1]).unwrap()))
            .collect();
        let p = PredictionPanel::new(entries).unwrap();
        assert_eq!(confidence_vector(&p), vec![0.8; 4]);
    }

    #[test]
    fn summary_of_unanimous_low_risk_panel() {
        let entries = (0..14)
            .map(|i| {
                ModelPrediction::new(format!("m{i}"), validate_distribution(&[0.9, 0.05, 0.05]).unwrap())
            })
            .collect();
        let s = summarize(&PredictionPanel::new(entries).unwrap());
        assert_eq!(s.ensemble_prediction, Benign);
        assert_eq!(s.agreement_fraction, 1.0);
        assert!((s.mean_malignancy - 0.05).abs() < 1e-12);
        assert_eq!(s.panel_size(), 14);
    }

    #[test]
    fn singleton_panel() {
        let s = summarize(&panel_of(&[Normal]));
        assert_eq!(s.ensemble_prediction, Normal);
        assert_eq!(s.agreement_fraction, 1.0);
        assert_eq!(s.vote_counts, [0, 0, 1]);
    }
}
