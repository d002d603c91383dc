//! Offline verification of run reports.
//!
//! [`verify_report`] checks a report against itself: every locally computed
//! score is recomputed from its evidence and must match bit-for-bit, every
//! action must agree with its score and threshold, and the headline counts
//! must match the trajectories. [`rerun_report`] additionally re-executes
//! the run against the bank as it stood when the run started.

use serde::{Deserialize, Serialize};

use crate::bank::{BankSnapshot, MemoryBank, Trajectory};
use crate::cascade::{Cascade, MetricsStub, PolicyKind, RunMode, RunReport};
use crate::policy::{
    recompute_score, Action, EvidenceDetail, StageDecision, POLICY_EXPERIENCE, POLICY_EXTERNAL, POLICY_STATIC,
};
use crate::retrieval::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub case_id: Option<String>,
    pub check: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub trajectories_checked: usize,
    pub decisions_checked: usize,
    pub scores_recomputed: usize,
    /// Number of trajectories re-executed against the bank, if requested.
    pub rerun: Option<usize>,
    pub notes: Vec<String>,
    pub mismatches: Vec<Mismatch>,
}

impl ReplayReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    fn fail(&mut self, case_id: Option<&str>, check: &str, detail: impl Into<String>) {
        self.mismatches.push(Mismatch {
            case_id: case_id.map(str::to_string),
            check: check.into(),
            detail: detail.into(),
        });
    }
}

fn allowed_policy_ids(kind: PolicyKind) -> &'static [&'static str] {
    match kind {
        PolicyKind::Static => &[POLICY_STATIC],
        PolicyKind::Experience => &[POLICY_EXPERIENCE],
        PolicyKind::External => &[POLICY_EXTERNAL, POLICY_EXPERIENCE],
    }
}

fn evidence_neighbor_ids(d: &StageDecision) -> Option<Vec<&str>> {
    match &d.evidence.detail {
        EvidenceDetail::ExperienceScreen { neighbors, .. }
        | EvidenceDetail::ExperienceDiag { neighbors, .. } => {
            Some(neighbors.iter().map(|n| n.case_id.as_str()).collect())
        }
        _ => None,
    }
}

fn check_decision(
    out: &mut ReplayReport,
    t: &Trajectory,
    stage: Stage,
    d: &StageDecision,
    kind: PolicyKind,
    retrieved: &[String],
) {
    let id = Some(t.case_id.as_str());
    out.decisions_checked += 1;
    if !allowed_policy_ids(kind).contains(&d.policy_id.as_str()) {
        out.fail(id, "policy_id", format!("{:?} stage decided by `{}` under {:?}", stage, d.policy_id, kind));
    }
    if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
        out.fail(id, "score_range", format!("score {}", d.score));
    }
    if let Some(recomputed) = recompute_score(&d.evidence) {
        out.scores_recomputed += 1;
        if recomputed.to_bits() != d.score.to_bits() {
            out.fail(id, "score_recompute", format!("stored {} recomputed {}", d.score, recomputed));
        }
    }
    if let Some(threshold) = d.evidence.threshold {
        let positive = d.score >= threshold;
        if positive != d.action.is_positive() {
            out.fail(
                id,
                "action_threshold",
                format!("{:?} with score {} and threshold {}", d.action, d.score, threshold),
            );
        }
    }
    if let Some(ids) = evidence_neighbor_ids(d) {
        if ids != retrieved.iter().map(String::as_str).collect::<Vec<_>>() {
            out.fail(id, "retrieved_ids", format!("{:?} stage evidence cites different neighbors", stage));
        }
    }
}

/// Self-consistency checks that need nothing but the report.
pub fn verify_report(report: &RunReport) -> ReplayReport {
    let mut out = ReplayReport::default();
    let cfg = &report.run_config;
    let mut last_seq = report.bank_provenance.last_sequence_at_start;
    for t in &report.trajectories {
        out.trajectories_checked += 1;
        let id = Some(t.case_id.as_str());
        if let Err(e) = t.validate() {
            out.fail(id, "trajectory", e.to_string());
            continue;
        }
        if t.screening_decision.action == Action::Seeded {
            out.fail(id, "trajectory", "run reports cannot contain seeded records");
            continue;
        }
        check_decision(
            &mut out,
            t,
            Stage::Screening,
            &t.screening_decision,
            cfg.policy_kind.screening,
            &t.retrieved_ids_screening,
        );
        if let Some(d) = &t.diagnostic_decision {
            let retrieved = t.retrieved_ids_diagnostic.clone().unwrap_or_default();
            check_decision(&mut out, t, Stage::Diagnostic, d, cfg.policy_kind.diagnostic, &retrieved);
        }
        match cfg.mode {
            RunMode::Batch if t.recorded_at != 0 => {
                out.fail(id, "recorded_at", "batch trajectories are never banked");
            }
            RunMode::Online => {
                if t.recorded_at <= last_seq {
                    out.fail(id, "recorded_at", format!("sequence {} after {}", t.recorded_at, last_seq));
                }
                last_seq = t.recorded_at;
            }
            _ => {}
        }
    }
    let stub = MetricsStub::from_trajectories(&report.trajectories);
    if stub != report.metrics_stub {
        out.fail(None, "metrics_stub", "headline counts do not match the trajectories");
    }
    out
}

/// [`verify_report`] plus a full re-execution against `bank`, which must
/// contain the bank state the run started from (later appends are ignored).
pub fn rerun_report(report: &RunReport, bank: &BankSnapshot) -> ReplayReport {
    let mut out = verify_report(report);
    let cfg = &report.run_config;
    if cfg.policy_kind.screening == PolicyKind::External || cfg.policy_kind.diagnostic == PolicyKind::External
    {
        out.notes.push("external decisions cannot be re-executed offline; rerun skipped".into());
        return out;
    }
    if bank.header().seed != report.bank_header.seed {
        out.fail(
            None,
            "bank_seed",
            format!("bank seed {} differs from report {}", bank.header().seed, report.bank_header.seed),
        );
        return out;
    }
    let start = bank.prefix(report.bank_provenance.last_sequence_at_start);
    if start.len() != report.bank_provenance.entries_at_start {
        out.fail(
            None,
            "bank_prefix",
            format!(
                "bank holds {} entries up to sequence {}, report started with {}",
                start.len(),
                report.bank_provenance.last_sequence_at_start,
                report.bank_provenance.entries_at_start
            ),
        );
        return out;
    }
    let cascade = match Cascade::new(cfg.clone()) {
        Ok(c) => c,
        Err(e) => {
            out.fail(None, "run_config", e.to_string());
            return out;
        }
    };
    let scratch = MemoryBank::from_snapshot(&start);
    let mut n = 0;
    for t in &report.trajectories {
        let snap = match cfg.mode {
            RunMode::Batch => start.clone(),
            RunMode::Online => scratch.snapshot(),
        };
        let id = Some(t.case_id.as_str());
        let rerun = cascade
            .process_case(&t.dataset, &t.observation, &snap)
            .and_then(|mut s| cascade.confirm_outcome(&mut s, t.outcome, &scratch));
        n += 1;
        match rerun {
            Ok(r) if r == *t => {}
            Ok(r) => {
                let what = if r.screening_decision != t.screening_decision {
                    "screening decision"
                } else if r.diagnostic_decision != t.diagnostic_decision {
                    "diagnostic decision"
                } else if r.retrieved_ids_screening != t.retrieved_ids_screening
                    || r.retrieved_ids_diagnostic != t.retrieved_ids_diagnostic
                {
                    "retrieved ids"
                } else {
                    "trajectory fields"
                };
                out.fail(id, "rerun", format!("{what} differs on re-execution"));
            }
            Err(e) => out.fail(id, "rerun", e.to_string()),
        }
    }
    out.rerun = Some(n);
    out
}
