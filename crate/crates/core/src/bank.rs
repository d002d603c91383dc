//! Append-only memory bank of pathology-confirmed decision trajectories.
//!
//! A single writer appends under a mutex; readers take immutable
//! [`BankSnapshot`]s that never observe later appends. File-backed banks
//! persist to a JSONL log whose first line is a [`BankHeader`] and whose
//! remaining lines are trajectories in sequence order. Reopening a log
//! replays it; a torn final line (a crash mid-write) is truncated away.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CaseObservation, LabeledCase, PathologyOutcome};
use crate::policy::{Action, StageDecision};

pub const BANK_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BANK_SEED: u64 = 0x5eed_2024;
pub const DEFAULT_SEED_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("case `{0}` is already in the bank")]
    DuplicateCaseId(String),
    #[error("embedding dimension {got} does not match bank dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("case `{0}` has no confirmed outcome")]
    MissingOutcome(String),
    #[error("invalid trajectory `{case_id}`: {reason}")]
    InvalidTrajectory { case_id: String, reason: String },
    #[error("seed selection is empty ({records} records at fraction {fraction})")]
    InsufficientRecords { records: usize, fraction: f64 },
    #[error("seed fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("bank log line {line} is corrupt: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("unsupported bank schema version {0}")]
    SchemaVersion(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// First line of a bank log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankHeader {
    pub schema_version: u32,
    /// Known once the first trajectory is appended; `null` in logs created
    /// empty.
    pub embedding_dim: Option<usize>,
    pub seed: u64,
}

/// One completed case's decision record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub case_id: String,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub observation: CaseObservation,
    pub screening_decision: StageDecision,
    #[serde(default)]
    pub diagnostic_decision: Option<StageDecision>,
    #[serde(default)]
    pub retrieved_ids_screening: Vec<String>,
    #[serde(default)]
    pub retrieved_ids_diagnostic: Option<Vec<String>>,
    pub outcome: PathologyOutcome,
    /// Bank sequence number; 0 for trajectories that were never banked.
    #[serde(default)]
    pub recorded_at: u64,
}

fn default_dataset() -> String {
    "default".into()
}

impl Trajectory {
    /// A ground-truth record with no agent decisions.
    pub fn seeded(case: &LabeledCase) -> Result<Trajectory, BankError> {
        let outcome = case.outcome.ok_or_else(|| BankError::MissingOutcome(case.case_id().to_string()))?;
        Ok(Trajectory {
            case_id: case.case_id().to_string(),
            dataset: case.dataset.clone(),
            observation: case.observation.clone(),
            screening_decision: StageDecision::seeded(),
            diagnostic_decision: None,
            retrieved_ids_screening: Vec::new(),
            retrieved_ids_diagnostic: None,
            outcome,
            recorded_at: 0,
        })
    }

    pub fn is_seeded(&self) -> bool {
        self.screening_decision.action == Action::Seeded
    }

    /// Structural invariants of a trajectory.
    pub fn validate(&self) -> Result<(), BankError> {
        let invalid = |reason: &str| BankError::InvalidTrajectory {
            case_id: self.case_id.clone(),
            reason: reason.into(),
        };
        if self.case_id != self.observation.case_id {
            return Err(invalid("case_id differs from observation.case_id"));
        }
        let escalated = self.screening_decision.action == Action::Escalate;
        if escalated != self.diagnostic_decision.is_some() {
            return Err(invalid("diagnostic decision present iff screening escalated"));
        }
        if !matches!(self.screening_decision.action, Action::Clear | Action::Escalate | Action::Seeded) {
            return Err(invalid("screening decision must be clear, escalate or seeded"));
        }
        if let Some(d) = &self.diagnostic_decision {
            if !matches!(d.action, Action::Refer | Action::NoRefer) {
                return Err(invalid("diagnostic decision must be refer or no_refer"));
            }
        }
        let own = |ids: &[String]| ids.contains(&self.case_id);
        if own(&self.retrieved_ids_screening) || self.retrieved_ids_diagnostic.as_deref().is_some_and(own) {
            return Err(invalid("retrieved ids contain the case itself"));
        }
        Ok(())
    }
}

/// Immutable view of the bank as of one point in its history.
#[derive(Debug, Clone)]
pub struct BankSnapshot {
    header: BankHeader,
    entries: Arc<[Arc<Trajectory>]>,
}

impl BankSnapshot {
    pub fn empty(seed: u64) -> Self {
        BankSnapshot {
            header: BankHeader { schema_version: BANK_SCHEMA_VERSION, embedding_dim: None, seed },
            entries: Arc::from(Vec::new()),
        }
    }

    /// Builds a detached snapshot from trajectories, assigning sequence
    /// numbers in order. Used for tests and in-memory experiments.
    pub fn from_trajectories(seed: u64, trajectories: Vec<Trajectory>) -> Result<Self, BankError> {
        let bank = MemoryBank::in_memory(seed);
        for t in trajectories {
            bank.append(t)?;
        }
        Ok(bank.snapshot())
    }

    pub fn header(&self) -> &BankHeader {
        &self.header
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.header.embedding_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_sequence(&self) -> u64 {
        self.entries.last().map_or(0, |t| t.recorded_at)
    }

    /// Entries in sequence order.
    pub fn iter(&self) -> impl Iterator<Item = &Arc<Trajectory>> {
        self.entries.iter()
    }

    /// The bank as it stood after sequence number `last`.
    pub fn prefix(&self, last: u64) -> BankSnapshot {
        let n = self.entries.partition_point(|t| t.recorded_at <= last);
        BankSnapshot { header: self.header.clone(), entries: Arc::from(&self.entries[..n]) }
    }

    pub fn get(&self, case_id: &str) -> Option<&Arc<Trajectory>> {
        self.entries.iter().find(|t| t.case_id == case_id)
    }

    /// Outcome label histogram, keyed by label name.
    pub fn outcome_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for t in self.iter() {
            let key = serde_json::to_value(t.outcome.label)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            *h.entry(key).or_insert(0) += 1;
        }
        h
    }
}

struct Writer {
    log: Option<File>,
    path: Option<PathBuf>,
    sync: bool,
    header: BankHeader,
    ids: HashSet<String>,
    entries: Vec<Arc<Trajectory>>,
    next_seq: u64,
}

/// The trajectory store. Appends are serialized; snapshots are cheap.
pub struct MemoryBank {
    writer: Mutex<Writer>,
    current: RwLock<Arc<BankSnapshot>>,
}

impl std::fmt::Debug for MemoryBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let snap = self.snapshot();
        f.debug_struct("MemoryBank").field("entries", &snap.len()).field("header", snap.header()).finish()
    }
}

fn write_line<T: Serialize>(file: &mut File, value: &T) -> Result<(), BankError> {
    let mut line = serde_json::to_vec(value).map_err(io::Error::other)?;
    line.push(b'\n');
    file.write_all(&line)?;
    Ok(())
}

impl MemoryBank {
    fn from_writer(writer: Writer) -> Self {
        let snap = BankSnapshot { header: writer.header.clone(), entries: Arc::from(writer.entries.clone()) };
        MemoryBank { writer: Mutex::new(writer), current: RwLock::new(Arc::new(snap)) }
    }

    /// A bank with no persistence.
    pub fn in_memory(seed: u64) -> Self {
        MemoryBank::from_writer(Writer {
            log: None,
            path: None,
            sync: false,
            header: BankHeader { schema_version: BANK_SCHEMA_VERSION, embedding_dim: None, seed },
            ids: HashSet::new(),
            entries: Vec::new(),
            next_seq: 1,
        })
    }

    /// An unpersisted bank holding a copy of `snap`; later appends continue
    /// its sequence numbering.
    pub fn from_snapshot(snap: &BankSnapshot) -> Self {
        MemoryBank::from_writer(Writer {
            log: None,
            path: None,
            sync: false,
            header: snap.header.clone(),
            ids: snap.iter().map(|t| t.case_id.clone()).collect(),
            entries: snap.entries.to_vec(),
            next_seq: snap.last_sequence() + 1,
        })
    }

    /// Creates a new log at `path`. Fails if the file already exists.
    pub fn create(
        path: impl AsRef<Path>,
        seed: u64,
        embedding_dim: Option<usize>,
    ) -> Result<Self, BankError> {
        let path = path.as_ref();
        let mut file = OpenOptions::new().write(true).create_new(true).open(path)?;
        let header = BankHeader { schema_version: BANK_SCHEMA_VERSION, embedding_dim, seed };
        write_line(&mut file, &header)?;
        file.sync_data()?;
        Ok(MemoryBank::from_writer(Writer {
            log: Some(file),
            path: Some(path.to_path_buf()),
            sync: true,
            header,
            ids: HashSet::new(),
            entries: Vec::new(),
            next_seq: 1,
        }))
    }

    /// Replays an existing log. A final line that does not parse is treated
    /// as a torn write and truncated; any earlier bad line is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BankError> {
        let path = path.as_ref();
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut reader = BufReader::new(&mut file);
        let mut lines: Vec<(u64, Vec<u8>, bool)> = Vec::new();
        let mut offset = 0u64;
        loop {
            let mut buf = Vec::new();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                break;
            }
            let complete = buf.last() == Some(&b'\n');
            if complete {
                buf.pop();
            }
            lines.push((offset, buf, complete));
            offset += n as u64;
        }
        drop(reader);

        let Some((_, header_bytes, _)) = lines.first() else {
            return Err(BankError::Corrupt { line: 1, reason: "missing header".into() });
        };
        let mut header: BankHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| BankError::Corrupt { line: 1, reason: e.to_string() })?;
        if header.schema_version != BANK_SCHEMA_VERSION {
            return Err(BankError::SchemaVersion(header.schema_version));
        }

        let bank = MemoryBank::in_memory(header.seed);
        let last = lines.len() - 1;
        let mut truncate_at = None;
        for (i, (start, bytes, complete)) in lines.iter().enumerate().skip(1) {
            let parsed =
                serde_json::from_slice::<Trajectory>(bytes).map_err(|e| e.to_string()).and_then(|t| {
                    let expected = bank.snapshot().last_sequence() + 1;
                    if t.recorded_at != expected {
                        return Err(format!("sequence {} where {} was expected", t.recorded_at, expected));
                    }
                    Ok(t)
                });
            if i == last && (!complete || parsed.is_err()) {
                truncate_at = Some(*start);
                continue;
            }
            match parsed {
                Ok(t) => {
                    bank.append_validated(t, false)?;
                }
                Err(reason) => return Err(BankError::Corrupt { line: i + 1, reason }),
            }
        }
        if let Some(at) = truncate_at {
            file.set_len(at)?;
            file.sync_data()?;
        }
        file.seek(SeekFrom::End(0))?;

        let mut w = bank.writer.into_inner().expect("unshared");
        if header.embedding_dim.is_none() {
            header.embedding_dim = w.header.embedding_dim;
        } else if let (Some(h), Some(d)) = (header.embedding_dim, w.header.embedding_dim) {
            if h != d {
                return Err(BankError::DimensionMismatch { expected: h, got: d });
            }
        }
        w.header = header;
        w.log = Some(file);
        w.path = Some(path.to_path_buf());
        w.sync = true;
        Ok(MemoryBank::from_writer(w))
    }

    pub fn open_or_create(path: impl AsRef<Path>, seed: u64) -> Result<Self, BankError> {
        if path.as_ref().exists() {
            MemoryBank::open(path)
        } else {
            MemoryBank::create(path, seed, None)
        }
    }

    /// Whether each append is followed by `fsync`. On by default for
    /// file-backed banks.
    pub fn set_sync(&self, sync: bool) {
        self.writer.lock().expect("bank writer poisoned").sync = sync;
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.writer.lock().expect("bank writer poisoned").path.clone()
    }

    pub fn seed(&self) -> u64 {
        self.snapshot().header.seed
    }

    pub fn contains(&self, case_id: &str) -> bool {
        self.writer.lock().expect("bank writer poisoned").ids.contains(case_id)
    }

    /// Current contents as an immutable view.
    pub fn snapshot(&self) -> BankSnapshot {
        (**self.current.read().expect("bank snapshot poisoned")).clone()
    }

    /// Appends a trajectory, assigning the next sequence number. The record
    /// is written (and synced, for file-backed banks) before this returns.
    pub fn append(&self, t: Trajectory) -> Result<u64, BankError> {
        self.append_validated(t, true)
    }

    fn append_validated(&self, mut t: Trajectory, persist: bool) -> Result<u64, BankError> {
        t.validate()?;
        let mut w = self.writer.lock().expect("bank writer poisoned");
        if w.ids.contains(&t.case_id) {
            return Err(BankError::DuplicateCaseId(t.case_id));
        }
        let dim = t.observation.embedding.dim();
        if let Some(expected) = w.header.embedding_dim {
            if expected != dim {
                return Err(BankError::DimensionMismatch { expected, got: dim });
            }
        }
        let seq = w.next_seq;
        t.recorded_at = seq;
        if persist {
            let sync = w.sync;
            if let Some(log) = w.log.as_mut() {
                write_line(log, &t)?;
                if sync {
                    log.sync_data()?;
                }
            }
        }
        w.header.embedding_dim = Some(dim);
        w.next_seq += 1;
        w.ids.insert(t.case_id.clone());
        w.entries.push(Arc::new(t));
        let snap = BankSnapshot { header: w.header.clone(), entries: Arc::from(w.entries.clone()) };
        *self.current.write().expect("bank snapshot poisoned") = Arc::new(snap);
        Ok(seq)
    }

    /// Reserves a fraction of each dataset as ground-truth trajectories,
    /// using the bank's header seed. Returns the split that was applied.
    pub fn seed_from_dataset(&self, records: &[LabeledCase], fraction: f64) -> Result<SeedSplit, BankError> {
        let split = select_seed_split(records, fraction, self.seed())?;
        for &i in &split.selected {
            self.append(Trajectory::seeded(&records[i])?)?;
        }
        Ok(split)
    }
}

/// Indices into the input stream: the bank seed set and the held-out rest,
/// each in original stream order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSplit {
    pub selected: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Deterministic per-dataset selection of `floor(fraction * n)` records via
/// a seeded shuffle. Datasets are visited in sorted tag order.
pub fn select_seed_split(records: &[LabeledCase], fraction: f64, seed: u64) -> Result<SeedSplit, BankError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(BankError::InvalidFraction(fraction));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.dataset.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; records.len()];
    for idx in groups.values_mut() {
        // Guard against products like 0.29 * 100 = 28.999999999999996.
        let take = (fraction * idx.len() as f64 + 1e-9).floor() as usize;
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(take) {
            chosen[i] = true;
        }
    }
    let selected: Vec<usize> = (0..records.len()).filter(|&i| chosen[i]).collect();
    if selected.is_empty() {
        return Err(BankError::InsufficientRecords { records: records.len(), fraction });
    }
    let held_out = (0..records.len()).filter(|&i| !chosen[i]).collect();
    Ok(SeedSplit { selected, held_out })
}
