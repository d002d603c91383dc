//! Metrics over run reports, ablation sweeps and paired policy comparison.
//!
//! All rates and percentages use malignant as the positive class and are
//! expressed in percent. Stages are scored as follows:
//!
//! | stage      | cases scored        | predicted positive |
//! |------------|---------------------|--------------------|
//! | screening  | all                 | `escalate`         |
//! | diagnostic | escalated only      | `refer`            |
//! | cascade    | all                 | `refer`            |

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{BankError, MemoryBank, SeedSplit, Trajectory};
use crate::cascade::{Cascade, CascadeError, PolicyKind, RunConfig, RunMode, RunReport};
use crate::domain::{LabeledCase, PathologyOutcome};
use crate::policy::Action;
use crate::retrieval::RetrievalMode;
use crate::synth::SynthSpec;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no truth record for case `{0}`")]
    MissingTruth(String),
    #[error("experiment requires the experience policy on both stages")]
    ExperiencePolicyRequired,
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("synthetic population: {0}")]
    Synth(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl Confusion {
    pub fn record(&mut self, truth_positive: bool, predicted_positive: bool) {
        match (truth_positive, predicted_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
        self.fp += o.fp;
    }
}

fn pct(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Mean of sensitivity and specificity, in the same units as its inputs.
pub fn balanced_accuracy(sensitivity: f64, specificity: f64) -> f64 {
    (sensitivity + specificity) / 2.0
}

/// Row-normalized confusion matrix in percent. Each present row sums to 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRows {
    /// `[tp, fn]` as a share of truly malignant cases.
    pub malignant: Option<[f64; 2]>,
    /// `[fp, tn]` as a share of truly non-malignant cases.
    pub non_malignant: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub counts: Confusion,
    pub rows_pct: ConfusionRows,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

impl StageMetrics {
    pub fn from_counts(c: Confusion) -> Self {
        let pos = c.tp + c.fn_;
        let neg = c.tn + c.fp;
        let sensitivity = pct(c.tp, pos);
        let specificity = pct(c.tn, neg);
        let rows_pct = ConfusionRows {
            malignant: sensitivity.map(|s| [s, pct(c.fn_, pos).unwrap_or(0.0)]),
            non_malignant: specificity.map(|s| [pct(c.fp, neg).unwrap_or(0.0), s]),
        };
        StageMetrics {
            counts: c,
            rows_pct,
            sensitivity,
            specificity,
            balanced_accuracy: match (sensitivity, specificity) {
                (Some(a), Some(b)) => Some(balanced_accuracy(a, b)),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryTriple {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

impl From<&StageMetrics> for SummaryTriple {
    fn from(m: &StageMetrics) -> Self {
        SummaryTriple {
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            balanced_accuracy: m.balanced_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub n_cases: usize,
    pub screening: StageMetrics,
    pub diagnostic: StageMetrics,
    pub cascade: StageMetrics,
    pub escalation_rate: f64,
    pub biopsy_referral_rate: f64,
}

/// Unweighted mean over datasets; datasets lacking a value are skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub screening: SummaryTriple,
    pub diagnostic: SummaryTriple,
    pub cascade: SummaryTriple,
    pub escalation_rate: Option<f64>,
    pub biopsy_referral_rate: Option<f64>,
}

/// Pooled metrics over every scored case, plus per-dataset and macro views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_cases: usize,
    pub screening: StageMetrics,
    pub diagnostic: StageMetrics,
    pub cascade: StageMetrics,
    /// Percent of screened cases escalated.
    pub escalation_rate: f64,
    /// Percent of screened cases referred for biopsy.
    pub biopsy_referral_rate: f64,
    pub per_dataset: BTreeMap<String, DatasetMetrics>,
    pub macro_average: MacroAverage,
}

#[derive(Default)]
struct Tally {
    n: usize,
    screening: Confusion,
    diagnostic: Confusion,
    cascade: Confusion,
    escalated: usize,
    referred: usize,
}

impl Tally {
    fn record(&mut self, t: &Trajectory, malignant: bool) {
        let escalated = t.screening_decision.action == Action::Escalate;
        let referred = t.diagnostic_decision.as_ref().is_some_and(|d| d.action == Action::Refer);
        self.n += 1;
        self.screening.record(malignant, escalated);
        if escalated {
            self.escalated += 1;
            self.diagnostic.record(malignant, referred);
        }
        if referred {
            self.referred += 1;
        }
        self.cascade.record(malignant, referred);
    }

    fn rate(&self, k: usize) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            100.0 * k as f64 / self.n as f64
        }
    }

    fn dataset_metrics(&self) -> DatasetMetrics {
        DatasetMetrics {
            n_cases: self.n,
            screening: StageMetrics::from_counts(self.screening),
            diagnostic: StageMetrics::from_counts(self.diagnostic),
            cascade: StageMetrics::from_counts(self.cascade),
            escalation_rate: self.rate(self.escalated),
            biopsy_referral_rate: self.rate(self.referred),
        }
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn macro_triple<'a>(stages: impl Iterator<Item = &'a StageMetrics> + Clone) -> SummaryTriple {
    SummaryTriple {
        sensitivity: mean_of(stages.clone().map(|s| s.sensitivity)),
        specificity: mean_of(stages.clone().map(|s| s.specificity)),
        balanced_accuracy: mean_of(stages.map(|s| s.balanced_accuracy)),
    }
}

/// Scores every trajectory of `report` against `truth`.
pub fn score_run(
    report: &RunReport,
    truth: &HashMap<String, PathologyOutcome>,
) -> Result<MetricsReport, EvalError> {
    score_trajectories(&report.trajectories, truth)
}

pub fn score_trajectories(
    trajectories: &[Trajectory],
    truth: &HashMap<String, PathologyOutcome>,
) -> Result<MetricsReport, EvalError> {
    let mut pooled = Tally::default();
    let mut by_dataset: BTreeMap<String, Tally> = BTreeMap::new();
    for t in trajectories {
        let outcome = truth.get(&t.case_id).ok_or_else(|| EvalError::MissingTruth(t.case_id.clone()))?;
        let malignant = outcome.is_malignant();
        pooled.record(t, malignant);
        by_dataset.entry(t.dataset.clone()).or_default().record(t, malignant);
    }
    let per_dataset: BTreeMap<String, DatasetMetrics> =
        by_dataset.iter().map(|(k, v)| (k.clone(), v.dataset_metrics())).collect();
    let ds = || per_dataset.values();
    let macro_average = MacroAverage {
        screening: macro_triple(ds().map(|d| &d.screening)),
        diagnostic: macro_triple(ds().map(|d| &d.diagnostic)),
        cascade: macro_triple(ds().map(|d| &d.cascade)),
        escalation_rate: mean_of(ds().map(|d| Some(d.escalation_rate))),
        biopsy_referral_rate: mean_of(ds().map(|d| Some(d.biopsy_referral_rate))),
    };
    let p = pooled.dataset_metrics();
    Ok(MetricsReport {
        n_cases: p.n_cases,
        screening: p.screening,
        diagnostic: p.diagnostic,
        cascade: p.cascade,
        escalation_rate: p.escalation_rate,
        biopsy_referral_rate: p.biopsy_referral_rate,
        per_dataset,
        macro_average,
    })
}

/// Truth table from labeled cases; unlabeled cases are omitted.
pub fn truth_table(cases: &[LabeledCase]) -> HashMap<String, PathologyOutcome> {
    cases.iter().filter_map(|c| c.outcome.map(|o| (c.case_id().to_string(), o))).collect()
}

/// Sum of confusion matrices, for pooled views over several reports.
pub fn pooled(counts: &[Confusion]) -> StageMetrics {
    let mut c = Confusion::default();
    for x in counts {
        c.add(x);
    }
    StageMetrics::from_counts(c)
}

/// Runs `cases` once in batch mode against `bank` and scores the result.
pub fn evaluate(
    cases: &[LabeledCase],
    bank: &MemoryBank,
    cfg: &RunConfig,
) -> Result<(RunReport, MetricsReport), EvalError> {
    let mut cfg = cfg.clone();
    cfg.mode = RunMode::Batch;
    let report = Cascade::new(cfg)?.run_stream(cases, bank);
    let metrics = score_run(&report, &truth_table(cases))?;
    Ok((report, metrics))
}

/// A bank seeded from a fraction of a synthetic population, plus the
/// held-out remainder in stream order.
#[derive(Debug)]
pub struct SeededWorld {
    pub bank: MemoryBank,
    pub held_out: Vec<LabeledCase>,
    pub split: SeedSplit,
}

pub fn seeded_world(spec: &SynthSpec, fraction: f64) -> Result<SeededWorld, EvalError> {
    let cases = crate::synth::generate(spec).map_err(|e| EvalError::Synth(e.to_string()))?;
    let bank = MemoryBank::in_memory(spec.seed);
    let split = bank.seed_from_dataset(&cases, fraction)?;
    let held_out = split.held_out.iter().map(|&i| cases[i].clone()).collect();
    Ok(SeededWorld { bank, held_out, split })
}

/// One cell of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub k: usize,
    pub mode: RetrievalMode,
    pub lambda: f64,
    pub metrics: MetricsReport,
}

fn require_experience(cfg: &RunConfig) -> Result<(), EvalError> {
    let k = cfg.policy_kind;
    if k.screening != PolicyKind::Experience || k.diagnostic != PolicyKind::Experience {
        return Err(EvalError::ExperiencePolicyRequired);
    }
    Ok(())
}

fn run_cells(
    cases: &[LabeledCase],
    bank: &MemoryBank,
    cells: Vec<(String, RunConfig)>,
) -> Result<Vec<AblationRow>, EvalError> {
    cells
        .into_par_iter()
        .map(|(label, cfg)| {
            let (_, metrics) = evaluate(cases, bank, &cfg)?;
            Ok(AblationRow {
                label,
                k: cfg.retrieval.k,
                mode: cfg.retrieval.mode,
                lambda: cfg.retrieval.lambda,
                metrics,
            })
        })
        .collect()
}

pub const DEFAULT_K_SWEEP: [usize; 5] = [2, 5, 10, 15, 20];

/// One batch run per distinct K, in first-seen order.
pub fn ablate_k(
    cases: &[LabeledCase],
    bank: &MemoryBank,
    base: &RunConfig,
    ks: &[usize],
) -> Result<Vec<AblationRow>, EvalError> {
    require_experience(base)?;
    let mut seen = std::collections::HashSet::new();
    let cells = ks
        .iter()
        .filter(|k| seen.insert(**k))
        .map(|&k| {
            let mut cfg = base.clone();
            cfg.retrieval.k = k;
            (format!("k={k}"), cfg)
        })
        .collect();
    run_cells(cases, bank, cells)
}

/// One batch run per retrieval mode.
pub fn ablate_retrieval_mode(
    cases: &[LabeledCase],
    bank: &MemoryBank,
    base: &RunConfig,
) -> Result<Vec<AblationRow>, EvalError> {
    require_experience(base)?;
    let cells = RetrievalMode::ALL
        .iter()
        .map(|&mode| {
            let mut cfg = base.clone();
            cfg.retrieval.mode = mode;
            (mode.as_str().to_string(), cfg)
        })
        .collect();
    run_cells(cases, bank, cells)
}

pub const ABLATION_CSV_HEADER: [&str; 14] = [
    "label",
    "k",
    "mode",
    "lambda",
    "n_cases",
    "screening_sensitivity",
    "screening_specificity",
    "screening_balanced_accuracy",
    "diagnostic_sensitivity",
    "diagnostic_specificity",
    "cascade_sensitivity",
    "cascade_specificity",
    "escalation_rate",
    "biopsy_referral_rate",
];

/// Plot-ready CSV, one row per cell. Missing values are empty fields.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String, EvalError> {
    let csv_err = |e: csv::Error| EvalError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ABLATION_CSV_HEADER).map_err(csv_err)?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.label.clone(),
            r.k.to_string(),
            r.mode.as_str().to_string(),
            r.lambda.to_string(),
            m.n_cases.to_string(),
            f(m.screening.sensitivity),
            f(m.screening.specificity),
            f(m.screening.balanced_accuracy),
            f(m.diagnostic.sensitivity),
            f(m.diagnostic.specificity),
            f(m.cascade.sensitivity),
            f(m.cascade.specificity),
            format!("{:.4}", m.escalation_rate),
            format!("{:.4}", m.biopsy_referral_rate),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Experience minus baseline, per metric. Positive specificity deltas and
/// negative rate deltas are improvements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TripleDelta {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

impl TripleDelta {
    fn between(base: SummaryTriple, exp: SummaryTriple) -> Self {
        TripleDelta {
            sensitivity: diff(base.sensitivity, exp.sensitivity),
            specificity: diff(base.specificity, exp.specificity),
            balanced_accuracy: diff(base.balanced_accuracy, exp.balanced_accuracy),
        }
    }
}

/// Relative change `(base - new) / base` in percent; `None` when the
/// baseline is zero.
pub fn relative_reduction(base: f64, new: f64) -> Option<f64> {
    (base != 0.0).then(|| 100.0 * (base - new) / base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDeltas {
    pub screening: TripleDelta,
    pub diagnostic: TripleDelta,
    pub cascade: TripleDelta,
    pub macro_screening: TripleDelta,
    pub macro_cascade: TripleDelta,
    /// Percentage-point change in escalation rate.
    pub escalation_rate: f64,
    pub biopsy_referral_rate: f64,
    /// Relative reductions in percent of the baseline rate.
    pub escalation_reduction_pct: Option<f64>,
    pub referral_reduction_pct: Option<f64>,
    /// Relative improvement of the cascade true-negative rate, pooled and
    /// averaged over datasets.
    pub tnr_improvement_pooled_pct: Option<f64>,
    pub tnr_improvement_macro_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub baseline: MetricsReport,
    pub experience: MetricsReport,
    pub deltas: ComparisonDeltas,
}

impl PolicyComparison {
    /// One line in the style of a headline result.
    pub fn headline(&self) -> String {
        let b = &self.baseline;
        let e = &self.experience;
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}%"));
        format!(
            "escalation {:.2}% -> {:.2}% ({} reduction); biopsy referrals {:.2}% -> {:.2}% ({} reduction); cascade specificity delta {}",
            b.escalation_rate,
            e.escalation_rate,
            opt(self.deltas.escalation_reduction_pct),
            b.biopsy_referral_rate,
            e.biopsy_referral_rate,
            opt(self.deltas.referral_reduction_pct),
            self.deltas.cascade.specificity.map_or("n/a".to_string(), |x| format!("{x:+.2} pts")),
        )
    }
}

pub fn compare_reports(baseline: MetricsReport, experience: MetricsReport) -> PolicyComparison {
    let t = |m: &StageMetrics| SummaryTriple::from(m);
    let tnr_rel = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => relative_reduction(a, b).map(|r| -r),
        _ => None,
    };
    let deltas = ComparisonDeltas {
        screening: TripleDelta::between(t(&baseline.screening), t(&experience.screening)),
        diagnostic: TripleDelta::between(t(&baseline.diagnostic), t(&experience.diagnostic)),
        cascade: TripleDelta::between(t(&baseline.cascade), t(&experience.cascade)),
        macro_screening: TripleDelta::between(
            baseline.macro_average.screening,
            experience.macro_average.screening,
        ),
        macro_cascade: TripleDelta::between(baseline.macro_average.cascade, experience.macro_average.cascade),
        escalation_rate: experience.escalation_rate - baseline.escalation_rate,
        biopsy_referral_rate: experience.biopsy_referral_rate - baseline.biopsy_referral_rate,
        escalation_reduction_pct: relative_reduction(baseline.escalation_rate, experience.escalation_rate),
        referral_reduction_pct: relative_reduction(
            baseline.biopsy_referral_rate,
            experience.biopsy_referral_rate,
        ),
        tnr_improvement_pooled_pct: tnr_rel(baseline.cascade.specificity, experience.cascade.specificity),
        tnr_improvement_macro_pct: tnr_rel(
            baseline.macro_average.cascade.specificity,
            experience.macro_average.cascade.specificity,
        ),
    };
    PolicyComparison { baseline, experience, deltas }
}

/// Runs both configurations on the same cases and bank and reports paired
/// deltas.
pub fn compare_policies(
    cases: &[LabeledCase],
    bank: &MemoryBank,
    cfg_static: &RunConfig,
    cfg_experience: &RunConfig,
) -> Result<PolicyComparison, EvalError> {
    let (a, b) = rayon::join(|| evaluate(cases, bank, cfg_static), || evaluate(cases, bank, cfg_experience));
    Ok(compare_reports(a?.1, b?.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fn_: u64, tn: u64, fp: u64) -> Confusion {
        Confusion { tp, fn_, tn, fp }
    }

    #[test]
    fn hand_arithmetic_confusion() {
        let m = StageMetrics::from_counts(counts(8, 2, 6, 4));
        assert_eq!(m.sensitivity, Some(80.0));
        assert_eq!(m.specificity, Some(60.0));
        assert_eq!(m.balanced_accuracy, Some(70.0));
        assert_eq!(m.rows_pct.malignant, Some([80.0, 20.0]));
        assert_eq!(m.rows_pct.non_malignant, Some([40.0, 60.0]));
    }

    #[test]
    fn balanced_accuracy_of_published_row() {
        assert!((balanced_accuracy(98.96, 98.38) - 98.67).abs() <= 0.01);
    }

    #[test]
    fn perfect_counts() {
        let m = StageMetrics::from_counts(counts(5, 0, 7, 0));
        assert_eq!(
            (m.sensitivity, m.specificity, m.balanced_accuracy),
            (Some(100.0), Some(100.0), Some(100.0))
        );
    }

    #[test]
    fn empty_rows_are_absent() {
        let m = StageMetrics::from_counts(counts(0, 0, 3, 1));
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.balanced_accuracy, None);
        assert_eq!(m.specificity, Some(75.0));
    }

    #[test]
    fn relative_reduction_handles_zero_base() {
        assert_eq!(relative_reduction(0.0, 1.0), None);
        assert_eq!(relative_reduction(50.0, 25.0), Some(50.0));
    }

    #[test]
    fn confusion_serializes_fn_field() {
        let v = serde_json::to_value(counts(1, 2, 3, 4)).unwrap();
        assert_eq!(v["fn"], 2);
    }
}
