//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use triage_core::bank::DEFAULT_SEED_FRACTION;
use triage_core::eval::{
    ablate_k, ablate_retrieval_mode, ablation_csv, compare_policies, score_run, truth_table, EvalError,
    DEFAULT_K_SWEEP,
};
use triage_core::ingest::{self, IngestFormat};
use triage_core::replay::{rerun_report, verify_report};
use triage_core::synth::{generate, SynthSpec};
use triage_core::{
    BankError, BankSnapshot, Cascade, LabeledCase, MemoryBank, PolicyKind, RunConfig, RunMode, RunReport,
};

use crate::external::HttpDecisionService;
use crate::{invalid, server};

#[derive(Debug, Parser)]
#[command(name = "triage", version, about = "Experience-conditioned screening and biopsy-referral cascade")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a bank log and seed it with a fraction of each dataset.
    SeedBank(SeedBankArgs),
    /// Run the cascade over a case stream and write a report plus metrics.
    Run(RunArgs),
    /// Sweep the number of retrieved neighbors.
    AblateK(AblateKArgs),
    /// Compare combined, image-only and vector-only retrieval.
    AblateMode(AblateArgs),
    /// Static policies against experience-conditioned policies.
    Compare(AblateArgs),
    /// Emit a synthetic population.
    Synth(SynthArgs),
    /// Serve the online cascade over HTTP.
    Serve(ServeArgs),
    /// Verify a run report and re-execute it against its bank.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Batch,
    Online,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Batch => RunMode::Batch,
            ModeArg::Online => RunMode::Online,
        }
    }
}

/// Where configuration, bank and cases come from. Without `--cases`, the
/// stream is the synthetic population for the configured seed, minus any
/// case already in the bank. Without `--bank`, an in-memory bank is seeded
/// from that population.
#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// JSON file mirroring the run configuration; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the bank split and the synthetic population.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bank log (JSONL).
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Case file (JSONL, or CSV by extension).
    #[arg(long)]
    pub cases: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SeedBankArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Fraction of each dataset reserved for the bank.
    #[arg(long, default_value_t = DEFAULT_SEED_FRACTION)]
    pub fraction: f64,
    /// Where to write the held-out cases.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Report path; metrics go to `<stem>.metrics.json` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Output file; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateKArgs {
    #[command(flatten)]
    pub common: AblateArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_SWEEP.to_vec())]
    pub ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Population size; overrides the spec.
    #[arg(long)]
    pub n: Option<usize>,
    /// JSON population spec; defaults to the acceptance world.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// JSONL or CSV by extension; JSONL on stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_enum, default_value = "online")]
    pub mode: ModeArg,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// The report to check.
    #[arg(long)]
    pub out: PathBuf,
    /// Bank to re-execute against; defaults to the path recorded in the report.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SeedBank(a) => seed_bank(a),
        Command::Run(a) => run_cases(a),
        Command::AblateK(a) => ablate_k_cmd(a),
        Command::AblateMode(a) => ablate_mode_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Replay(a) => replay_cmd(a),
    }
}

pub fn load_config(inputs: &Inputs, mode: Option<RunMode>) -> Result<RunConfig> {
    let mut cfg = match &inputs.config {
        Some(path) => {
            let text = read_input(path)?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| invalid(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = inputs.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(cfg)
}

pub fn cascade_for(cfg: &RunConfig) -> Result<Cascade> {
    let mut cascade = Cascade::new(cfg.clone()).map_err(|e| invalid(e.to_string()))?;
    if let Some(ext) = &cfg.external {
        cascade = cascade.with_service(Arc::new(HttpDecisionService::new(ext.url.clone())));
    }
    Ok(cascade)
}

fn read_cases(path: &Path, cfg: &RunConfig) -> Result<Vec<LabeledCase>> {
    let loaded = ingest::ingest(path, IngestFormat::from_path(path), &cfg.vocabulary)
        .map_err(|e| invalid(e.to_string()))?;
    for w in &loaded.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    if !loaded.errors.is_empty() {
        let shown: Vec<String> = loaded.errors.iter().take(10).map(|e| e.to_string()).collect();
        return Err(invalid(format!(
            "{}: {} invalid record(s)\n  {}",
            path.display(),
            loaded.errors.len(),
            shown.join("\n  ")
        )));
    }
    Ok(loaded.cases)
}

/// Reads a user-supplied file; a missing file is an input error.
fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => invalid(format!("{} does not exist", path.display())),
        _ => anyhow::Error::new(e).context(format!("reading {}", path.display())),
    })
}

fn population(seed: u64) -> Result<Vec<LabeledCase>> {
    generate(&SynthSpec::acceptance(seed)).map_err(|e| invalid(e.to_string()))
}

fn bank_error(e: BankError) -> anyhow::Error {
    match e {
        BankError::Io(_) => anyhow::Error::new(e),
        other => invalid(other.to_string()),
    }
}

fn open_bank(path: &Path) -> Result<MemoryBank> {
    if !path.exists() {
        return Err(invalid(format!("bank {} does not exist; create it with seed-bank", path.display())));
    }
    MemoryBank::open(path).map_err(bank_error)
}

/// The bank and case stream a command works on.
pub struct World {
    pub bank: MemoryBank,
    pub cases: Vec<LabeledCase>,
}

pub fn resolve_world(inputs: &Inputs, cfg: &RunConfig) -> Result<World> {
    let explicit = match &inputs.cases {
        Some(p) => Some(read_cases(p, cfg)?),
        None => None,
    };
    let bank = match &inputs.bank {
        Some(p) => open_bank(p)?,
        None => {
            let bank = MemoryBank::in_memory(cfg.seed);
            let source = match &explicit {
                Some(c) => c.clone(),
                None => population(cfg.seed)?,
            };
            bank.seed_from_dataset(&source, DEFAULT_SEED_FRACTION).map_err(bank_error)?;
            bank
        }
    };
    let cases = match explicit {
        Some(c) if inputs.bank.is_some() => c,
        Some(c) => c.into_iter().filter(|c| !bank.contains(c.case_id())).collect(),
        None => population(cfg.seed)?.into_iter().filter(|c| !bank.contains(c.case_id())).collect(),
    };
    Ok(World { bank, cases })
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn write_cases(path: &Path, cases: &[LabeledCase]) -> Result<()> {
    let text = match IngestFormat::from_path(path) {
        IngestFormat::Jsonl => ingest::to_jsonl(cases),
        IngestFormat::Csv => ingest::to_csv(cases)?,
    };
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn seed_bank(a: SeedBankArgs) -> Result<()> {
    let cfg = load_config(&a.inputs, None)?;
    let path = a.inputs.bank.as_deref().ok_or_else(|| invalid("seed-bank requires --bank"))?;
    if path.exists() {
        return Err(invalid(format!("bank {} already exists", path.display())));
    }
    let cases = match &a.inputs.cases {
        Some(p) => read_cases(p, &cfg)?,
        None => population(cfg.seed)?,
    };
    let dim = cases.first().map(|c| c.observation.embedding.dim());
    let bank = MemoryBank::create(path, cfg.seed, dim).map_err(bank_error)?;
    bank.set_sync(false);
    let split = bank.seed_from_dataset(&cases, a.fraction).map_err(bank_error)?;
    if let Some(out) = &a.out {
        let held: Vec<LabeledCase> = split.held_out.iter().map(|&i| cases[i].clone()).collect();
        write_cases(out, &held)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "bank": path.display().to_string(),
            "seed": cfg.seed,
            "seeded": split.selected.len(),
            "held_out": split.held_out.len(),
        })
    );
    Ok(())
}

pub fn metrics_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    report.with_file_name(format!("{stem}.metrics.json"))
}

fn run_cases(a: RunArgs) -> Result<()> {
    let cfg = load_config(&a.inputs, a.mode.map(Into::into))?;
    let world = resolve_world(&a.inputs, &cfg)?;
    let cascade = cascade_for(&cfg)?;
    let report = cascade.run_stream(&world.cases, &world.bank);
    fs::write(&a.out, to_json(&report)).with_context(|| format!("writing {}", a.out.display()))?;
    for e in &report.errors {
        eprintln!("warning: case {} (#{}): {}", e.case_id, e.index, e.error);
    }
    match score_run(&report, &truth_table(&world.cases)) {
        Ok(m) => {
            fs::write(metrics_path(&a.out), to_json(&m))?;
            eprintln!(
                "{} cases: escalation {:.2}%, biopsy referral {:.2}%, cascade specificity {}",
                m.n_cases,
                m.escalation_rate,
                m.biopsy_referral_rate,
                m.cascade.specificity.map_or("n/a".into(), |s| format!("{s:.2}%")),
            );
        }
        Err(EvalError::MissingTruth(id)) => {
            eprintln!("note: no metrics written; case {id} has no ground truth");
        }
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn eval_error(e: EvalError) -> anyhow::Error {
    match e {
        EvalError::ExperiencePolicyRequired | EvalError::MissingTruth(_) => invalid(e.to_string()),
        other => other.into(),
    }
}

fn ablate_k_cmd(a: AblateKArgs) -> Result<()> {
    let cfg = load_config(&a.common.inputs, Some(RunMode::Batch))?;
    let world = resolve_world(&a.common.inputs, &cfg)?;
    let rows = ablate_k(&world.cases, &world.bank, &cfg, &a.ks).map_err(eval_error)?;
    write_output(a.common.out.as_deref(), &ablation_csv(&rows)?)
}

fn ablate_mode_cmd(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.inputs, Some(RunMode::Batch))?;
    let world = resolve_world(&a.inputs, &cfg)?;
    let rows = ablate_retrieval_mode(&world.cases, &world.bank, &cfg).map_err(eval_error)?;
    write_output(a.out.as_deref(), &ablation_csv(&rows)?)
}

fn compare_cmd(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.inputs, Some(RunMode::Batch))?;
    let world = resolve_world(&a.inputs, &cfg)?;
    let baseline = cfg.clone().with_policies(PolicyKind::Static);
    let cmp = compare_policies(&world.cases, &world.bank, &baseline, &cfg).map_err(eval_error)?;
    eprintln!("{}", cmp.headline());
    write_output(a.out.as_deref(), &to_json(&cmp))
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = read_input(p)?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| invalid(format!("spec {}: {e}", p.display())))?
        }
        None => SynthSpec::acceptance(a.seed),
    };
    if a.spec.is_none() || a.seed != 0 {
        spec.seed = a.seed;
    }
    if let Some(n) = a.n {
        spec.n_cases = n;
    }
    let cases = generate(&spec).map_err(|e| invalid(e.to_string()))?;
    match &a.out {
        Some(p) => write_cases(p, &cases),
        None => write_output(None, &ingest::to_jsonl(&cases)),
    }
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let cfg = load_config(&a.inputs, Some(a.mode.into()))?;
    if a.inputs.bank.is_none() {
        return Err(invalid("serve requires --bank"));
    }
    let world = resolve_world(&a.inputs, &cfg)?;
    let cascade = cascade_for(&cfg)?;
    let state = server::AppState::new(cascade, world.bank, world.cases);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(&a.bind).await.with_context(|| format!("binding {}", a.bind))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, server::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn replay_cmd(a: ReplayArgs) -> Result<()> {
    let text = read_input(&a.out)?;
    let report: RunReport =
        serde_json::from_str(&text).map_err(|e| invalid(format!("report {}: {e}", a.out.display())))?;
    let bank_path = a
        .bank
        .clone()
        .or_else(|| report.bank_provenance.path.as_ref().map(PathBuf::from))
        .filter(|p| p.exists());
    let result = match bank_path {
        Some(p) => {
            let snap: BankSnapshot = open_bank(&p)?.snapshot();
            rerun_report(&report, &snap)
        }
        None => rebuild_and_rerun(&report),
    };
    println!("{}", to_json(&result));
    if result.is_ok() {
        Ok(())
    } else {
        Err(invalid(format!("{} replay mismatch(es)", result.mismatches.len())))
    }
}

/// Reports from runs without a bank file used the synthetic world for their
/// seed; rebuild it when the provenance matches, otherwise verify only.
fn rebuild_and_rerun(report: &RunReport) -> triage_core::replay::ReplayReport {
    let seed = report.bank_header.seed;
    let bank = MemoryBank::in_memory(seed);
    let held: Option<Vec<String>> = population(seed).ok().and_then(|cases| {
        let split = bank.seed_from_dataset(&cases, DEFAULT_SEED_FRACTION).ok()?;
        Some(split.held_out.iter().map(|&i| cases[i].case_id().to_string()).collect())
    });
    // Errors carry their stream index; trajectories fill the other slots in order.
    let n = report.trajectories.len() + report.errors.len();
    let mut streamed: Vec<Option<&str>> = vec![None; n];
    for e in report.errors.iter().filter(|e| e.index < n) {
        streamed[e.index] = Some(e.case_id.as_str());
    }
    let mut ts = report.trajectories.iter();
    for slot in streamed.iter_mut().filter(|s| s.is_none()) {
        *slot = ts.next().map(|t| t.case_id.as_str());
    }
    let snap = bank.snapshot();
    let plausible = report.bank_provenance.path.is_none()
        && snap.len() == report.bank_provenance.entries_at_start
        && held.is_some_and(|h| h.len() == n && h.iter().zip(&streamed).all(|(a, b)| Some(a.as_str()) == *b));
    if plausible {
        let mut r = rerun_report(report, &snap);
        r.notes.push(format!("bank rebuilt from the synthetic population for seed {seed}"));
        r
    } else {
        let mut r = verify_report(report);
        r.notes.push("no bank available; report verified without re-execution".into());
        r
    }
}
