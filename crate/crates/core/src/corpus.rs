//! Email datasets: ingestion from CSV/JSONL, validation and seeded sampling.
//!
//! Every record carries a subject, a body and a binary ground-truth label.
//! Record ids are `<dataset-name>:<row-index>` and record order always
//! follows file order.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on stored body length, in unicode scalar values.
pub const DEFAULT_MAX_BODY_CHARS: usize = 32_768;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unknown label value {0:?}")]
    UnknownLabelValue(String),
    #[error("sample of {requested} requested from a dataset of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("stratified sampling needs both classes, dataset has {phishing} phishing and {safe} safe")]
    DegenerateClass { phishing: usize, safe: usize },
    #[error("sample size must be positive")]
    EmptySample,
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ground-truth class. Phishing is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Phishing,
    Safe,
}

impl Label {
    pub fn is_positive(self) -> bool {
        matches!(self, Label::Phishing)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Phishing => "phishing",
            Label::Safe => "safe",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Phishing => Label::Safe,
            Label::Safe => Label::Phishing,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmailRecord {
    pub id: String,
    pub subject: String,
    pub body: String,
    pub label: Label,
    /// Set when the body was cut at the configured length cap.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl EmailRecord {
    /// Builds a record, trimming the subject and enforcing the non-empty rule.
    pub fn new(
        id: impl Into<String>,
        subject: &str,
        body: &str,
        label: Label,
    ) -> Result<Self, CorpusError> {
        let subject = subject.trim().to_string();
        if subject.is_empty() && body.trim().is_empty() {
            return Err(CorpusError::MalformedRow {
                row: 0,
                reason: "subject and body are both empty".into(),
            });
        }
        Ok(Self {
            id: id.into(),
            subject,
            body: body.to_string(),
            label,
            truncated: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json" => Ok(Format::Jsonl),
            other => Err(format!("unknown dataset format {other:?} (expected csv or jsonl)")),
        }
    }
}

/// Column names and label vocabulary used to interpret a source file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub subject: String,
    pub body: String,
    pub label: String,
    /// Label values (case-insensitive) read as phishing.
    pub positive: Vec<String>,
    /// Label values (case-insensitive) read as safe.
    pub negative: Vec<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            subject: "subject".into(),
            body: "body".into(),
            label: "label".into(),
            positive: vec!["1".into(), "phishing".into(), "spam".into()],
            negative: vec!["0".into(), "safe".into(), "ham".into()],
        }
    }
}

impl ColumnMapping {
    /// Parses `subject=col,body=col,label=col`; omitted keys keep their defaults.
    pub fn parse_map(text: &str) -> Result<Self, String> {
        let mut mapping = Self::default();
        for pair in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected key=column, got {pair:?}"))?;
            let value = value.trim().to_string();
            match key.trim() {
                "subject" => mapping.subject = value,
                "body" => mapping.body = value,
                "label" => mapping.label = value,
                other => return Err(format!("unknown mapping key {other:?}")),
            }
        }
        Ok(mapping)
    }

    pub fn interpret_label(&self, raw: &str) -> Result<Label, CorpusError> {
        let value = raw.trim();
        if self.positive.iter().any(|p| p.eq_ignore_ascii_case(value)) {
            Ok(Label::Phishing)
        } else if self.negative.iter().any(|n| n.eq_ignore_ascii_case(value)) {
            Ok(Label::Safe)
        } else {
            Err(CorpusError::UnknownLabelValue(value.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub format: Format,
    pub mapping: ColumnMapping,
    pub max_body_chars: usize,
}

impl LoadOptions {
    pub fn new(format: Format, mapping: ColumnMapping) -> Self {
        Self {
            format,
            mapping,
            max_body_chars: DEFAULT_MAX_BODY_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub options: LoadOptions,
    /// Present when the dataset is a sample of another dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub n: usize,
    pub seed: u64,
    pub stratified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<EmailRecord>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub phishing: usize,
    pub safe: usize,
}

impl Dataset {
    /// Builds an in-memory dataset, checking id uniqueness.
    pub fn from_records(
        name: impl Into<String>,
        records: Vec<EmailRecord>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            records,
            provenance: Provenance {
                source: "<memory>".into(),
                options: LoadOptions::new(Format::Jsonl, ColumnMapping::default()),
                sample: None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> ClassCounts {
        let phishing = self.records.iter().filter(|r| r.label.is_positive()).count();
        ClassCounts {
            phishing,
            safe: self.records.len() - phishing,
        }
    }

    pub fn get(&self, id: &str) -> Option<&EmailRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Reads a file written by [`Dataset::write_jsonl`], keeping its ids.
    pub fn read_jsonl(path: &Path, name: &str) -> Result<Self, CorpusError> {
        if !path.is_file() {
            return Err(CorpusError::FileNotFound(path.to_path_buf()));
        }
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (row, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: EmailRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRow {
                row,
                reason: e.to_string(),
            })?;
            records.push(record);
        }
        let mut dataset = Self::from_records(name, records)?;
        dataset.provenance.source = path.display().to_string();
        dataset.provenance.options.format = Format::Jsonl;
        Ok(dataset)
    }

    /// Writes the normalized records, one JSON object per line.
    pub fn write_jsonl(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Loads a dataset from a CSV (header row required) or JSONL file.
pub fn load_dataset(
    path: &Path,
    name: &str,
    options: &LoadOptions,
) -> Result<Dataset, CorpusError> {
    if !path.is_file() {
        return Err(CorpusError::FileNotFound(path.to_path_buf()));
    }
    let rows = match options.format {
        Format::Csv => read_csv_rows(path, &options.mapping)?,
        Format::Jsonl => read_jsonl_rows(path, &options.mapping)?,
    };

    let mut records = Vec::with_capacity(rows.len());
    for (index, row) in rows.into_iter().enumerate() {
        records.push(build_record(name, index, row, options)?);
    }

    Ok(Dataset {
        name: name.to_string(),
        records,
        provenance: Provenance {
            source: path.display().to_string(),
            options: options.clone(),
            sample: None,
        },
    })
}

struct RawRow {
    subject: Option<String>,
    body: Option<String>,
    label: Option<String>,
}

fn build_record(
    name: &str,
    index: usize,
    row: RawRow,
    options: &LoadOptions,
) -> Result<EmailRecord, CorpusError> {
    let malformed = |reason: &str| CorpusError::MalformedRow {
        row: index,
        reason: reason.to_string(),
    };
    let raw_label = row
        .label
        .filter(|l| !l.trim().is_empty())
        .ok_or_else(|| malformed("missing label"))?;
    let label = options.mapping.interpret_label(&raw_label)?;

    let subject = row.subject.unwrap_or_default().trim().to_string();
    let mut body = row.body.unwrap_or_default();
    if subject.is_empty() && body.trim().is_empty() {
        return Err(malformed("subject and body are both empty"));
    }
    let mut truncated = false;
    if let Some((cut, _)) = body.char_indices().nth(options.max_body_chars) {
        body.truncate(cut);
        truncated = true;
    }

    Ok(EmailRecord {
        id: format!("{name}:{index}"),
        subject,
        body,
        label,
        truncated,
    })
}

fn read_csv_rows(path: &Path, mapping: &ColumnMapping) -> Result<Vec<RawRow>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(e, 0))?;
    let headers = reader.headers().map_err(|e| csv_error(e, 0))?.clone();
    let column = |name: &str| -> Result<usize, CorpusError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CorpusError::MalformedRow {
                row: 0,
                reason: format!("header has no column {name:?}"),
            })
    };
    let subject_col = column(&mapping.subject)?;
    let body_col = column(&mapping.body)?;
    let label_col = column(&mapping.label)?;

    let mut rows = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(e, index))?;
        rows.push(RawRow {
            subject: record.get(subject_col).map(str::to_string),
            body: record.get(body_col).map(str::to_string),
            label: record.get(label_col).map(str::to_string),
        });
    }
    Ok(rows)
}

fn csv_error(err: csv::Error, row: usize) -> CorpusError {
    if err.is_io_error() {
        return CorpusError::Io(err.into());
    }
    CorpusError::MalformedRow {
        row,
        reason: err.to_string(),
    }
}

fn read_jsonl_rows(path: &Path, mapping: &ColumnMapping) -> Result<Vec<RawRow>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let index = rows.len();
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRow {
                row: index,
                reason: e.to_string(),
            })?;
        let object = value.as_object().ok_or_else(|| CorpusError::MalformedRow {
            row: index,
            reason: "line is not a JSON object".into(),
        })?;
        let field = |key: &str| object.get(key).and_then(json_scalar_to_string);
        rows.push(RawRow {
            subject: field(&mapping.subject),
            body: field(&mapping.body),
            label: field(&mapping.label),
        });
    }
    Ok(rows)
}

fn json_scalar_to_string(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(if *b { "1" } else { "0" }.to_string()),
        _ => None,
    }
}

/// Per-class sizes for a stratified sample of `n` records.
///
/// Each class gets `n * class_fraction` rounded to nearest; an exact half
/// goes to the majority class (phishing when the classes are balanced).
pub fn stratified_counts(counts: ClassCounts, n: usize) -> (usize, usize) {
    let total = counts.phishing + counts.safe;
    if total == 0 {
        return (0, 0);
    }
    let scaled = n * counts.phishing;
    let mut phishing = scaled / total;
    let remainder = scaled % total;
    if 2 * remainder > total || (2 * remainder == total && counts.phishing >= counts.safe) {
        phishing += 1;
    }
    (phishing, n - phishing)
}

/// Draws `n` records with per-class counts proportional to the source.
pub fn stratified_sample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset, CorpusError> {
    sample(dataset, n, seed, true)
}

/// Seeded sample of `n` records, stratified by label or uniform.
///
/// The result is shuffled by `seed`; the same inputs always give the same
/// records in the same order.
pub fn sample(
    dataset: &Dataset,
    n: usize,
    seed: u64,
    stratified: bool,
) -> Result<Dataset, CorpusError> {
    if n == 0 {
        return Err(CorpusError::EmptySample);
    }
    if n > dataset.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: dataset.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut picked: Vec<&EmailRecord> = if stratified {
        let counts = dataset.class_counts();
        if n >= 2 && (counts.phishing == 0 || counts.safe == 0) {
            return Err(CorpusError::DegenerateClass {
                phishing: counts.phishing,
                safe: counts.safe,
            });
        }
        let (n_phishing, n_safe) = stratified_counts(counts, n);
        let mut phishing: Vec<&EmailRecord> =
            dataset.records.iter().filter(|r| r.label.is_positive()).collect();
        let mut safe: Vec<&EmailRecord> =
            dataset.records.iter().filter(|r| !r.label.is_positive()).collect();
        phishing.shuffle(&mut rng);
        safe.shuffle(&mut rng);
        phishing.truncate(n_phishing);
        safe.truncate(n_safe);
        phishing.into_iter().chain(safe).collect()
    } else {
        let mut all: Vec<&EmailRecord> = dataset.records.iter().collect();
        all.shuffle(&mut rng);
        all.truncate(n);
        all
    };
    picked.shuffle(&mut rng);

    let mut provenance = dataset.provenance.clone();
    provenance.sample = Some(SampleInfo {
        n,
        seed,
        stratified,
    });
    Ok(Dataset {
        name: dataset.name.clone(),
        records: picked.into_iter().cloned().collect(),
        provenance,
    })
}
