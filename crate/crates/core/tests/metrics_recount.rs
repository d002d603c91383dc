mod common;

use std::collections::{BTreeMap, HashMap};

use common::*;
use proptest::prelude::*;
use triage_core::domain::OutcomeSource;
use triage_core::eval::{score_trajectories, StageMetrics};
use triage_core::policy::StageDecision;
use triage_core::{Action, OutcomeLabel, PathologyOutcome, Trajectory};

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: u64,
    fn_: u64,
    tn: u64,
    fp: u64,
}

fn count(items: impl Iterator<Item = (bool, bool)>) -> Counts {
    let mut c = Counts::default();
    for (truth, pred) in items {
        match (truth, pred) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
        }
    }
    c
}

fn check(m: &StageMetrics, c: Counts) {
    assert_eq!((m.counts.tp, m.counts.fn_, m.counts.tn, m.counts.fp), (c.tp, c.fn_, c.tn, c.fp));
    let sen = (c.tp + c.fn_ > 0).then(|| 100.0 * c.tp as f64 / (c.tp + c.fn_) as f64);
    let spec = (c.tn + c.fp > 0).then(|| 100.0 * c.tn as f64 / (c.tn + c.fp) as f64);
    assert_eq!(m.sensitivity, sen);
    assert_eq!(m.specificity, spec);
    if let (Some(a), Some(b)) = (sen, spec) {
        assert_eq!(m.balanced_accuracy, Some((a + b) / 2.0));
        let rows = m.rows_pct.malignant.unwrap();
        assert!((rows[0] + rows[1] - 100.0).abs() < 1e-9);
        let rows = m.rows_pct.non_malignant.unwrap();
        assert!((rows[0] + rows[1] - 100.0).abs() < 1e-9);
    }
}

/// (truth, dataset, escalated, referred)
type Row = (OutcomeLabel, usize, bool, bool);

fn trajectories(rows: &[Row], obs: &triage_core::CaseObservation) -> Vec<Trajectory> {
    rows.iter()
        .enumerate()
        .map(|(i, &(label, ds, escalated, referred))| {
            let id = format!("c{i}");
            let mut t = seeded_trajectory(obs.clone(), &id, label);
            t.dataset = format!("d{ds}");
            let mut s = StageDecision::seeded();
            s.action = if escalated { Action::Escalate } else { Action::Clear };
            t.screening_decision = s;
            t.diagnostic_decision = escalated.then(|| {
                let mut d = StageDecision::seeded();
                d.action = if referred { Action::Refer } else { Action::NoRefer };
                d
            });
            t
        })
        .collect()
}

fn arb_rows() -> impl Strategy<Value = Vec<Row>> {
    prop::collection::vec((arb_outcome(), 0usize..3, any::<bool>(), any::<bool>()), 0..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn score_matches_independent_recount(rows in arb_rows(), obs in arb_observation(2, 2)) {
        let ts = trajectories(&rows, &obs);
        let truth: HashMap<String, PathologyOutcome> = ts
            .iter()
            .map(|t| (t.case_id.clone(), PathologyOutcome { label: t.outcome.label, source: OutcomeSource::Biopsy }))
            .collect();
        let m = score_trajectories(&ts, &truth).unwrap();

        let mal = |r: &Row| r.0 == OutcomeLabel::Malignant;
        let referred = |r: &Row| r.2 && r.3;
        check(&m.screening, count(rows.iter().map(|r| (mal(r), r.2))));
        check(&m.diagnostic, count(rows.iter().filter(|r| r.2).map(|r| (mal(r), r.3))));
        check(&m.cascade, count(rows.iter().map(|r| (mal(r), referred(r)))));

        let n = rows.len();
        let rate = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
        prop_assert_eq!(m.n_cases, n);
        prop_assert_eq!(m.escalation_rate, rate(rows.iter().filter(|r| r.2).count()));
        prop_assert_eq!(m.biopsy_referral_rate, rate(rows.iter().filter(|r| referred(r)).count()));

        let mut by_ds: BTreeMap<String, Vec<Row>> = BTreeMap::new();
        for r in &rows {
            by_ds.entry(format!("d{}", r.1)).or_default().push(*r);
        }
        prop_assert_eq!(m.per_dataset.keys().collect::<Vec<_>>(), by_ds.keys().collect::<Vec<_>>());
        for (ds, rs) in &by_ds {
            let d = &m.per_dataset[ds];
            check(&d.screening, count(rs.iter().map(|r| (mal(r), r.2))));
            check(&d.cascade, count(rs.iter().map(|r| (mal(r), referred(r)))));
        }
        let sens: Vec<f64> = m.per_dataset.values().filter_map(|d| d.screening.sensitivity).collect();
        let expected = (!sens.is_empty()).then(|| sens.iter().sum::<f64>() / sens.len() as f64);
        prop_assert_eq!(m.macro_average.screening.sensitivity, expected);
    }
}

#[test]
fn missing_truth_is_an_error() {
    let obs = triage_core::synth::generate(&triage_core::SynthSpec {
        n_cases: 1,
        ..triage_core::SynthSpec::acceptance(0)
    })
    .unwrap()
    .pop()
    .unwrap()
    .observation;
    let ts = trajectories(&[(OutcomeLabel::Malignant, 0, true, true)], &obs);
    assert!(score_trajectories(&ts, &HashMap::new()).is_err());
}
