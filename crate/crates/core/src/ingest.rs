//! Case ingestion from JSONL or wide CSV.
//!
//! JSONL: one [`IngestRecord`] per line.
//!
//! CSV: a header row with `case_id`, optional `dataset` and `outcome`,
//! embedding columns `emb_0 .. emb_{D-1}`, per-model probability columns
//! `p_<model>_benign`, `p_<model>_malignant`, `p_<model>_normal`, optional
//! attribute columns `birads, edge, boundary, calcification, echo`, and
//! optional descriptor columns `desc_<field>`. Empty cells are absent values.
//!
//! Bad lines are reported with their 1-based line number (the CSV header is
//! line 1) and skipped; the rest of the file still loads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_distribution, Birads, CaseObservation, Category, DescriptorRecord, DescriptorVocabulary,
    Embedding, LabeledCase, ModelPrediction, OutcomeLabel, OutcomeSource, PathologyOutcome, PredictionPanel,
    RadiologicalFeatureSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestFormat {
    Jsonl,
    Csv,
}

impl IngestFormat {
    /// Guesses from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => IngestFormat::Csv,
            _ => IngestFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
pub enum LineError {
    #[error("line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("line {line}: embedding has {got} values, file uses {expected}")]
    EmbeddingDimDrift { line: usize, expected: usize, got: usize },
}

impl LineError {
    pub fn line(&self) -> usize {
        match self {
            LineError::SchemaError { line, .. } | LineError::EmbeddingDimDrift { line, .. } => *line,
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid csv header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelEntry {
    pub model_id: String,
    /// Probabilities for benign, malignant, normal.
    pub probs: Vec<f64>,
}

/// Flat, externalized form of a labeled case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRecord {
    pub case_id: String,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub embedding: Vec<f64>,
    pub panel: Vec<PanelEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag_features: Option<RadiologicalFeatureSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<DescriptorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<OutcomeLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_source: Option<OutcomeSource>,
}

fn default_dataset() -> String {
    "default".into()
}

impl IngestRecord {
    pub fn into_case(self, vocab: &DescriptorVocabulary) -> Result<LabeledCase, String> {
        if self.case_id.trim().is_empty() {
            return Err("case_id is empty".into());
        }
        let embedding = Embedding::new(self.embedding).map_err(|e| e.to_string())?;
        let entries = self
            .panel
            .into_iter()
            .map(|e| {
                validate_distribution(&e.probs)
                    .map(|d| ModelPrediction::new(e.model_id.clone(), d))
                    .map_err(|err| format!("model `{}`: {err}", e.model_id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let panel = PredictionPanel::new(entries).map_err(|e| e.to_string())?;
        if let Some(d) = &self.descriptor {
            vocab.validate(d).map_err(|e| e.to_string())?;
        }
        let outcome = self.outcome.map(|label| PathologyOutcome {
            label,
            source: self.outcome_source.unwrap_or(OutcomeSource::GroundTruthDataset),
        });
        Ok(LabeledCase {
            dataset: self.dataset,
            observation: CaseObservation {
                case_id: self.case_id,
                embedding,
                panel,
                diag_features: self.diag_features,
                descriptor: self.descriptor,
            },
            outcome,
        })
    }

    pub fn from_case(case: &LabeledCase) -> Self {
        let o = &case.observation;
        IngestRecord {
            case_id: o.case_id.clone(),
            dataset: case.dataset.clone(),
            embedding: o.embedding.values().to_vec(),
            panel: o
                .panel
                .entries()
                .iter()
                .map(|e| PanelEntry {
                    model_id: e.model_id().to_string(),
                    probs: e.distribution().probs().to_vec(),
                })
                .collect(),
            diag_features: o.diag_features,
            descriptor: o.descriptor.clone(),
            outcome: case.outcome.map(|x| x.label),
            outcome_source: case.outcome.map(|x| x.source),
        }
    }
}

/// Loaded cases plus everything that was rejected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ingested {
    pub cases: Vec<LabeledCase>,
    pub errors: Vec<LineError>,
    pub warnings: Vec<String>,
}

struct DimTracker(Option<usize>);

impl DimTracker {
    fn check(&mut self, line: usize, case: &LabeledCase) -> Result<(), LineError> {
        let got = case.observation.embedding.dim();
        match self.0 {
            Some(expected) if expected != got => Err(LineError::EmbeddingDimDrift { line, expected, got }),
            _ => {
                self.0 = Some(got);
                Ok(())
            }
        }
    }
}

fn finish(out: &mut Ingested) {
    if out.cases.is_empty() && out.errors.is_empty() {
        out.warnings.push("input contains no cases".into());
    }
    let mut seen = std::collections::HashSet::new();
    for c in &out.cases {
        if !seen.insert(c.case_id()) {
            out.warnings.push(format!("case id `{}` appears more than once", c.case_id()));
        }
    }
}

pub fn parse_jsonl(text: &str, vocab: &DescriptorVocabulary) -> Ingested {
    let mut out = Ingested::default();
    let mut dims = DimTracker(None);
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<IngestRecord>(raw)
            .map_err(|e| e.to_string())
            .and_then(|r| r.into_case(vocab));
        match parsed {
            Ok(case) => match dims.check(line, &case) {
                Ok(()) => out.cases.push(case),
                Err(e) => out.errors.push(e),
            },
            Err(message) => out.errors.push(LineError::SchemaError { line, message }),
        }
    }
    finish(&mut out);
    out
}

/// Column layout resolved from a CSV header.
struct CsvLayout {
    case_id: usize,
    dataset: Option<usize>,
    outcome: Option<usize>,
    embedding: Vec<usize>,
    models: Vec<(String, [usize; 3])>,
    attributes: Option<[usize; 5]>,
    descriptor: Vec<(usize, usize)>,
}

const ATTRIBUTE_COLUMNS: [&str; 5] = ["birads", "edge", "boundary", "calcification", "echo"];
const CLASS_SUFFIXES: [&str; 3] = ["_benign", "_malignant", "_normal"];

impl CsvLayout {
    fn from_header(h: &csv::StringRecord) -> Result<Self, IngestError> {
        let find = |name: &str| h.iter().position(|c| c == name);
        let case_id = find("case_id").ok_or_else(|| IngestError::Header("missing case_id".into()))?;

        let mut embedding = Vec::new();
        while let Some(i) = find(&format!("emb_{}", embedding.len())) {
            embedding.push(i);
        }
        if embedding.is_empty() {
            return Err(IngestError::Header("no emb_0.. columns".into()));
        }

        let mut models: Vec<(String, [Option<usize>; 3])> = Vec::new();
        for (i, col) in h.iter().enumerate() {
            let Some(rest) = col.strip_prefix("p_") else { continue };
            let Some((slot, suffix)) = CLASS_SUFFIXES.iter().enumerate().find(|(_, s)| rest.ends_with(*s))
            else {
                return Err(IngestError::Header(format!("column `{col}` has no class suffix")));
            };
            let model = &rest[..rest.len() - suffix.len()];
            let idx = match models.iter().position(|(m, _)| m == model) {
                Some(j) => j,
                None => {
                    models.push((model.to_string(), [None; 3]));
                    models.len() - 1
                }
            };
            models[idx].1[slot] = Some(i);
        }
        if models.is_empty() {
            return Err(IngestError::Header("no p_<model>_<class> columns".into()));
        }
        let models = models
            .into_iter()
            .map(|(m, cols)| match cols {
                [Some(a), Some(b), Some(c)] => Ok((m, [a, b, c])),
                _ => Err(IngestError::Header(format!("model `{m}` lacks a probability column"))),
            })
            .collect::<Result<Vec<_>, _>>()?;

        let attrs: Vec<Option<usize>> = ATTRIBUTE_COLUMNS.iter().map(|c| find(c)).collect();
        let attributes = if attrs.iter().all(Option::is_some) {
            Some([0, 1, 2, 3, 4].map(|i| attrs[i].expect("checked")))
        } else if attrs.iter().any(Option::is_some) {
            return Err(IngestError::Header("attribute columns must appear together".into()));
        } else {
            None
        };

        let descriptor = DescriptorRecord::FIELDS
            .iter()
            .enumerate()
            .filter_map(|(f, name)| find(&format!("desc_{name}")).map(|i| (f, i)))
            .collect();

        Ok(CsvLayout {
            case_id,
            dataset: find("dataset"),
            outcome: find("outcome"),
            embedding,
            models,
            attributes,
            descriptor,
        })
    }

    fn record(&self, row: &csv::StringRecord) -> Result<IngestRecord, String> {
        let cell = |i: usize| row.get(i).map(str::trim).filter(|s| !s.is_empty());
        let number = |i: usize| -> Result<f64, String> {
            let s = cell(i).ok_or_else(|| format!("column {} is empty", i + 1))?;
            s.parse::<f64>().map_err(|e| format!("column {}: {e}", i + 1))
        };
        let embedding = self.embedding.iter().map(|&i| number(i)).collect::<Result<_, _>>()?;
        let panel = self
            .models
            .iter()
            .map(|(m, cols)| {
                Ok(PanelEntry {
                    model_id: m.clone(),
                    probs: cols.iter().map(|&i| number(i)).collect::<Result<_, String>>()?,
                })
            })
            .collect::<Result<_, String>>()?;
        let diag_features = match self.attributes {
            Some(cols) if cols.iter().any(|&i| cell(i).is_some()) => {
                let birads: u8 =
                    cell(cols[0]).ok_or("birads is empty")?.parse().map_err(|e| format!("birads: {e}"))?;
                Some(RadiologicalFeatureSet {
                    birads: Birads::new(birads).map_err(|e| e.to_string())?,
                    edge: vocab_value(cell(cols[1]), "edge")?,
                    boundary: vocab_value(cell(cols[2]), "boundary")?,
                    calcification: vocab_value(cell(cols[3]), "calcification")?,
                    echo: vocab_value(cell(cols[4]), "echo")?,
                })
            }
            _ => None,
        };
        let mut desc = DescriptorRecord::default();
        let mut any = false;
        for &(field, i) in &self.descriptor {
            if let Some(v) = cell(i) {
                any = true;
                *descriptor_slot(&mut desc, field) = Some(v.to_string());
            }
        }
        let outcome = match self.outcome.and_then(cell) {
            Some(s) => Some(vocab_value::<OutcomeLabel>(Some(s), "outcome")?),
            None => None,
        };
        Ok(IngestRecord {
            case_id: cell(self.case_id).unwrap_or_default().to_string(),
            dataset: self.dataset.and_then(cell).map_or_else(default_dataset, str::to_string),
            embedding,
            panel,
            diag_features,
            descriptor: any.then_some(desc),
            outcome,
            outcome_source: None,
        })
    }
}

fn vocab_value<T: DeserializeOwned>(s: Option<&str>, field: &str) -> Result<T, String> {
    let s = s.ok_or_else(|| format!("{field} is empty"))?;
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("{field}: unknown value `{s}`"))
}

fn descriptor_slot(d: &mut DescriptorRecord, field: usize) -> &mut Option<String> {
    match field {
        0 => &mut d.orientation,
        1 => &mut d.margins,
        2 => &mut d.shape,
        3 => &mut d.echogenicity,
        4 => &mut d.calcification,
        5 => &mut d.birads,
        6 => &mut d.histopathology,
        _ => &mut d.conclusion,
    }
}

pub fn parse_csv(text: &str, vocab: &DescriptorVocabulary) -> Result<Ingested, IngestError> {
    let mut out = Ingested::default();
    if text.trim().is_empty() {
        finish(&mut out);
        return Ok(out);
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| IngestError::Header(e.to_string()))?.clone();
    let layout = CsvLayout::from_header(&header)?;
    let mut dims = DimTracker(None);
    for (i, row) in reader.records().enumerate() {
        let fallback_line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(LineError::SchemaError { line: fallback_line, message: e.to_string() });
                continue;
            }
        };
        let line = row.position().map_or(fallback_line, |p| p.line() as usize);
        if row.len() != header.len() {
            out.errors.push(LineError::SchemaError {
                line,
                message: format!("{} fields, header has {}", row.len(), header.len()),
            });
            continue;
        }
        match layout.record(&row).and_then(|r| r.into_case(vocab)) {
            Ok(case) => match dims.check(line, &case) {
                Ok(()) => out.cases.push(case),
                Err(e) => out.errors.push(e),
            },
            Err(message) => out.errors.push(LineError::SchemaError { line, message }),
        }
    }
    finish(&mut out);
    Ok(out)
}

pub fn ingest(
    path: &Path,
    format: IngestFormat,
    vocab: &DescriptorVocabulary,
) -> Result<Ingested, IngestError> {
    let text = fs::read_to_string(path)
        .map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    match format {
        IngestFormat::Jsonl => Ok(parse_jsonl(&text, vocab)),
        IngestFormat::Csv => parse_csv(&text, vocab),
    }
}

pub fn to_jsonl(cases: &[LabeledCase]) -> String {
    let mut s = String::new();
    for c in cases {
        s.push_str(&serde_json::to_string(&IngestRecord::from_case(c)).expect("serializable"));
        s.push('\n');
    }
    s
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Wide CSV with the layout described in the module docs. Model columns
/// follow the first case's panel order.
pub fn to_csv(cases: &[LabeledCase]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let Some(first) = cases.first() else {
        return Ok(String::new());
    };
    let dim = first.observation.embedding.dim();
    let models: Vec<String> = first.observation.panel.model_ids().map(str::to_string).collect();
    let mut header: Vec<String> = vec!["case_id".into(), "dataset".into(), "outcome".into()];
    header.extend((0..dim).map(|i| format!("emb_{i}")));
    for m in &models {
        header.extend(CLASS_SUFFIXES.iter().map(|s| format!("p_{m}{s}")));
    }
    header.extend(ATTRIBUTE_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(DescriptorRecord::FIELDS.iter().map(|f| format!("desc_{f}")));
    w.write_record(&header)?;
    for c in cases {
        let o = &c.observation;
        let mut row: Vec<String> = vec![
            o.case_id.clone(),
            c.dataset.clone(),
            c.outcome.map(|x| enum_name(&x.label)).unwrap_or_default(),
        ];
        row.extend(o.embedding.values().iter().map(|v| v.to_string()));
        let by_id: BTreeMap<&str, &ModelPrediction> =
            o.panel.entries().iter().map(|e| (e.model_id(), e)).collect();
        for m in &models {
            match by_id.get(m.as_str()) {
                Some(e) => row.extend(Category::ALL.iter().map(|&k| e.distribution().get(k).to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 3)),
            }
        }
        match &o.diag_features {
            Some(f) => {
                row.push(f.birads.value().to_string());
                row.push(enum_name(&f.edge));
                row.push(enum_name(&f.boundary));
                row.push(enum_name(&f.calcification));
                row.push(enum_name(&f.echo));
            }
            None => row.extend(std::iter::repeat_n(String::new(), 5)),
        }
        let mut d = o.descriptor.clone().unwrap_or_default();
        for f in 0..DescriptorRecord::FIELDS.len() {
            row.push(descriptor_slot(&mut d, f).clone().unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
