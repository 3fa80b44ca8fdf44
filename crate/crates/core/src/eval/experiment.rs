//! Experiment runs: endpoints × datasets grids, ensembles and ablations.
//!
//! A run writes into one output directory:
//!
//! ```text
//! judgments/<cell>.jsonl   raw judgments, one per email
//! decisions/<cell>.jsonl   ensemble decisions (ensemble mode)
//! cells/<cell>.csv         metrics for one cell
//! summary.csv              every cell in one table
//! summary.txt              the same table, aligned for reading
//! ```
//!
//! Nothing time- or path-dependent is written, so repeated runs against
//! deterministic endpoints produce identical files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{csv_field, score, MetricsReport, Prediction, UnparseablePolicy};
use crate::corpus::{load_dataset, sample, ColumnMapping, CorpusError, Dataset, Format, LoadOptions};
use crate::ensemble::{Ensemble, EnsembleDecision, Method};
use crate::judgment::{judge_batch, ConfidenceScope, Judgment, Verdict};
use crate::llm_client::{LlmClient, ModelEndpoint};
use crate::prompting::{PromptError, PromptTemplate, TemplateKind, DEFAULT_DETECTION_TEMPLATE};

pub const DEFAULT_SEED: u64 = 1069;
pub const DEFAULT_PARALLELISM: usize = 8;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset {name:?}: {source}")]
    Dataset {
        name: String,
        #[source]
        source: CorpusError,
    },
    #[error(transparent)]
    Template(#[from] PromptError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Configuration and input problems, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, ExperimentError::Io { .. })
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    Finetuned,
    Ensemble,
    Ablation,
    Transfer,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "finetuned" => Ok(Mode::Finetuned),
            "ensemble" => Ok(Mode::Ensemble),
            "ablation" => Ok(Mode::Ablation),
            "transfer" => Ok(Mode::Transfer),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Vanilla => "vanilla",
            Mode::Finetuned => "finetuned",
            Mode::Ensemble => "ensemble",
            Mode::Ablation => "ablation",
            Mode::Transfer => "transfer",
        };
        f.write_str(s)
    }
}

/// Training variant of a fine-tuned endpoint, for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Explained,
    LabelOnly,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Explained => "explained",
            Variant::LabelOnly => "label_only",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    #[serde(flatten)]
    pub endpoint: ModelEndpoint,
    #[serde(default)]
    pub variant: Option<Variant>,
    /// Dataset the endpoint's model was fine-tuned on.
    #[serde(default)]
    pub trained_on: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<Format>,
    /// `subject=col,body=col,label=col`
    #[serde(default)]
    pub map: Option<String>,
    #[serde(default)]
    pub positive: Option<Vec<String>>,
    #[serde(default)]
    pub negative: Option<Vec<String>>,
    #[serde(default)]
    pub max_body_chars: Option<usize>,
    /// Evaluate a seeded sample of this many records.
    #[serde(default)]
    pub sample: Option<usize>,
    #[serde(default = "default_true")]
    pub stratified: bool,
    /// Overrides the run seed for this dataset's sample.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_true() -> bool {
    true
}
fn default_template() -> String {
    DEFAULT_DETECTION_TEMPLATE.into()
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}
fn default_methods() -> Vec<Method> {
    vec![Method::Majority, Method::Confidence]
}

impl DatasetConfig {
    fn load_options(&self) -> Result<LoadOptions, ExperimentError> {
        let format = match self.format {
            Some(f) => f,
            None => match self.path.extension().and_then(|e| e.to_str()) {
                Some("jsonl") | Some("json") => Format::Jsonl,
                _ => Format::Csv,
            },
        };
        let mut mapping = match &self.map {
            Some(mapping) => ColumnMapping::parse_map(mapping)
                .map_err(|e| ExperimentError::Config(format!("dataset {:?}: {e}", self.name)))?,
            None => ColumnMapping::default(),
        };
        if let Some(p) = &self.positive {
            mapping.positive = p.clone();
        }
        if let Some(n) = &self.negative {
            mapping.negative = n.clone();
        }
        let mut options = LoadOptions::new(format, mapping);
        if let Some(max) = self.max_body_chars {
            options.max_body_chars = max;
        }
        Ok(options)
    }

    /// Loads (and samples, if configured) the dataset.
    pub fn load(&self, run_seed: u64) -> Result<Dataset, ExperimentError> {
        let wrap = |source| ExperimentError::Dataset {
            name: self.name.clone(),
            source,
        };
        let full = load_dataset(&self.path, &self.name, &self.load_options()?).map_err(wrap)?;
        match self.sample {
            Some(n) => sample(&full, n, self.seed.unwrap_or(run_seed), self.stratified).map_err(wrap),
            None => Ok(full),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub confidence_scope: ConfidenceScope,
    #[serde(default)]
    pub unparseable: UnparseablePolicy,
    /// Fusion methods for ensemble mode.
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub endpoints: Vec<EndpointConfig>,
    pub datasets: Vec<DatasetConfig>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.starts_with('.')
}

impl ExperimentConfig {
    /// Parses a TOML config. Relative dataset and template paths resolve
    /// against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let mut config: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.message().to_string()))?;
        for d in &mut config.datasets {
            if d.path.is_relative() {
                d.path = base_dir.join(&d.path);
            }
        }
        if PromptTemplate::builtin(&config.template).is_err() {
            let candidate = base_dir.join(&config.template);
            if candidate.is_file() {
                config.template = candidate.to_string_lossy().into_owned();
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.endpoints.is_empty() {
            return bad("no endpoints configured".into());
        }
        if self.datasets.is_empty() {
            return bad("no datasets configured".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        let mut names = HashSet::new();
        for e in &self.endpoints {
            if !valid_name(&e.name) {
                return bad(format!("endpoint name {:?} must match [A-Za-z0-9._-]+", e.name));
            }
            if !names.insert(e.name.as_str()) {
                return bad(format!("duplicate endpoint name {:?}", e.name));
            }
            e.endpoint
                .validate()
                .map_err(|err| ExperimentError::Config(format!("endpoint {:?}: {err}", e.name)))?;
        }
        let mut names = HashSet::new();
        for d in &self.datasets {
            if !valid_name(&d.name) {
                return bad(format!("dataset name {:?} must match [A-Za-z0-9._-]+", d.name));
            }
            if !names.insert(d.name.as_str()) {
                return bad(format!("duplicate dataset name {:?}", d.name));
            }
        }
        match self.mode {
            Mode::Ensemble => {
                if self.endpoints.len() < 2 {
                    return bad("ensemble mode needs at least 2 endpoints".into());
                }
                if self.methods.is_empty() {
                    return bad("ensemble mode needs at least one method".into());
                }
            }
            Mode::Ablation => {
                if let Some(e) = self.endpoints.iter().find(|e| e.variant.is_none()) {
                    return bad(format!("ablation mode: endpoint {:?} has no variant", e.name));
                }
                for v in [Variant::Explained, Variant::LabelOnly] {
                    if !self.endpoints.iter().any(|e| e.variant == Some(v)) {
                        return bad(format!("ablation mode needs an endpoint with variant {:?}", v.as_str()));
                    }
                }
            }
            Mode::Transfer => {
                if self.datasets.len() < 2 {
                    return bad("transfer mode needs at least 2 datasets".into());
                }
            }
            Mode::Vanilla | Mode::Finetuned => {}
        }
        let template = PromptTemplate::resolve(&self.template)?;
        if template.kind != TemplateKind::Detection {
            return bad(format!("template {:?} is not a detection template", template.name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    /// File stem shared by the cell's outputs.
    pub id: String,
    /// Endpoint name, or `ensemble-<method>`.
    pub system: String,
    /// Endpoint fingerprint, or the method name for ensembles.
    pub model: String,
    pub dataset: String,
    pub variant: Option<Variant>,
    pub in_domain: Option<bool>,
    pub status: CellStatus,
    pub error: Option<String>,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub mode: Mode,
    pub cells: Vec<CellReport>,
}

impl ReportBundle {
    pub fn failed_cells(&self) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed)
    }

    pub const SUMMARY_HEADER: &'static str =
        "cell,system,model,dataset,variant,in_domain,status,accuracy,precision,recall,f1,tp,fp,tn,fn,unparseable,error";

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(Self::SUMMARY_HEADER);
        out.push('\n');
        let m = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        for c in &self.cells {
            let metrics = match &c.metrics {
                Some(r) => format!(
                    "{},{},{},{},{},{},{},{},{}",
                    m(r.accuracy),
                    m(r.precision),
                    m(r.recall),
                    m(r.f1),
                    r.counts.tp,
                    r.counts.fp,
                    r.counts.tn,
                    r.counts.fn_,
                    r.unparseable_count
                ),
                None => ",,,,,,,,".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                csv_field(&c.id),
                csv_field(&c.system),
                csv_field(&c.model),
                csv_field(&c.dataset),
                c.variant.map_or("", |v| v.as_str()),
                c.in_domain.map_or(String::new(), |b| b.to_string()),
                if c.status == CellStatus::Ok { "ok" } else { "failed" },
                metrics,
                csv_field(c.error.as_deref().unwrap_or("")),
            ));
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let m = |v: Option<f64>| v.map_or_else(|| "undef".to_string(), |x| format!("{x:.3}"));
        let width = self.cells.iter().map(|c| c.system.len()).max().unwrap_or(6).max(6);
        let dwidth = self.cells.iter().map(|c| c.dataset.len()).max().unwrap_or(7).max(7);
        let mut out = format!(
            "{:<width$}  {:<dwidth$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>5}  extra\n",
            "system", "dataset", "acc", "prec", "recall", "f1", "unp."
        );
        for c in &self.cells {
            let mut extra = Vec::new();
            if let Some(v) = c.variant {
                extra.push(v.as_str().to_string());
            }
            match c.in_domain {
                Some(true) => extra.push("in-domain".into()),
                Some(false) => extra.push("transfer".into()),
                None => {}
            }
            match (&c.metrics, c.status) {
                (Some(r), CellStatus::Ok) => out.push_str(&format!(
                    "{:<width$}  {:<dwidth$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>5}  {}\n",
                    c.system,
                    c.dataset,
                    m(r.accuracy),
                    m(r.precision),
                    m(r.recall),
                    m(r.f1),
                    r.unparseable_count,
                    extra.join(" ")
                )),
                _ => out.push_str(&format!(
                    "{:<width$}  {:<dwidth$}  FAILED: {}\n",
                    c.system,
                    c.dataset,
                    c.error.as_deref().unwrap_or("unknown error")
                )),
            }
        }
        out
    }
}

struct Cell {
    report: CellReport,
    judgments: Vec<Judgment>,
}

fn cell_id(system: &str, dataset: &str) -> String {
    format!("{system}__{dataset}")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(io_error(path))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("serializable");
        out.push(b'\n');
    }
    out
}

async fn run_cell(
    client: &LlmClient,
    config: &ExperimentConfig,
    endpoint: &EndpointConfig,
    dataset: &Dataset,
    template: &PromptTemplate,
) -> Cell {
    let judgments = judge_batch(
        client,
        &dataset.records,
        &endpoint.endpoint,
        template,
        config.confidence_scope,
        config.parallelism,
    )
    .await;
    let fingerprint = endpoint.endpoint.fingerprint();
    let mut report = CellReport {
        id: cell_id(&endpoint.name, &dataset.name),
        system: endpoint.name.clone(),
        model: fingerprint.clone(),
        dataset: dataset.name.clone(),
        variant: endpoint.variant,
        in_domain: endpoint.trained_on.as_ref().map(|t| t == &dataset.name),
        status: CellStatus::Ok,
        error: None,
        metrics: None,
    };
    // a cell whose every request failed measured the endpoint, not the model
    if !judgments.is_empty() && judgments.iter().all(|j| j.error.is_some()) {
        report.status = CellStatus::Failed;
        report.error = judgments[0].error.clone();
    } else {
        let predictions: Vec<Prediction> = judgments.iter().map(Prediction::from).collect();
        match score(&predictions, dataset, &fingerprint, config.unparseable) {
            Ok(m) => report.metrics = Some(m),
            Err(e) => {
                report.status = CellStatus::Failed;
                report.error = Some(e.to_string());
            }
        }
    }
    Cell { report, judgments }
}

/// One ensemble decision line: the decision, or the reason none was made.
#[derive(Serialize)]
#[serde(untagged)]
enum DecisionLine<'a> {
    Decided(&'a EnsembleDecision),
    Undecided {
        email_id: &'a str,
        method: Method,
        verdict: Verdict,
        error: String,
    },
}

fn run_ensemble_cell(
    config: &ExperimentConfig,
    method: Method,
    dataset: &Dataset,
    members: &[&Cell],
) -> (CellReport, Vec<u8>) {
    let ensemble = Ensemble::new(members.iter().map(|c| c.report.model.clone()));
    let system = format!("ensemble-{}", method.as_str());
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut lines = Vec::new();
    for (i, email) in dataset.records.iter().enumerate() {
        let judgments: Vec<Judgment> = members.iter().map(|c| c.judgments[i].clone()).collect();
        match ensemble.decide(method, &judgments) {
            Ok(d) => {
                predictions.push(Prediction::from(&d));
                serde_json::to_writer(&mut lines, &DecisionLine::Decided(&d)).expect("serializable");
            }
            Err(e) => {
                predictions.push(Prediction {
                    email_id: email.id.clone(),
                    verdict: Verdict::Unparseable,
                });
                let line = DecisionLine::Undecided {
                    email_id: &email.id,
                    method,
                    verdict: Verdict::Unparseable,
                    error: e.to_string(),
                };
                serde_json::to_writer(&mut lines, &line).expect("serializable");
            }
        }
        lines.push(b'\n');
    }
    let mut report = CellReport {
        id: cell_id(&system, &dataset.name),
        model: system.clone(),
        system,
        dataset: dataset.name.clone(),
        variant: None,
        in_domain: None,
        status: CellStatus::Ok,
        error: None,
        metrics: None,
    };
    match score(&predictions, dataset, &report.model, config.unparseable) {
        Ok(m) => report.metrics = Some(m),
        Err(e) => {
            report.status = CellStatus::Failed;
            report.error = Some(e.to_string());
        }
    }
    (report, lines)
}

fn cell_csv(report: &CellReport) -> String {
    match &report.metrics {
        Some(m) => format!("{}\n{}\n", MetricsReport::CSV_HEADER, m.csv_row()),
        None => format!(
            "status,error\nfailed,{}\n",
            csv_field(report.error.as_deref().unwrap_or(""))
        ),
    }
}

/// Loads every configured dataset. Any failure is a validation error.
pub fn load_datasets(config: &ExperimentConfig) -> Result<Vec<Dataset>, ExperimentError> {
    config.datasets.iter().map(|d| d.load(config.seed)).collect()
}

/// Runs the configured protocol and writes its reports under `out_dir`.
/// Per-cell failures are recorded in the bundle; only configuration,
/// input and output errors abort the run.
pub async fn run_experiment(
    config: &ExperimentConfig,
    client: &LlmClient,
    out_dir: &Path,
) -> Result<ReportBundle, ExperimentError> {
    config.validate()?;
    let template = PromptTemplate::resolve(&config.template)?;
    let datasets = load_datasets(config)?;

    for sub in ["judgments", "cells"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    }

    // every (endpoint, dataset) pair runs concurrently; the client's
    // in-flight limit bounds the total load
    let mut jobs = Vec::new();
    for dataset in &datasets {
        for endpoint in &config.endpoints {
            jobs.push(run_cell(client, config, endpoint, dataset, &template));
        }
    }
    let cells = join_all(jobs).await;

    let mut reports = Vec::new();
    for cell in &cells {
        let stem = &cell.report.id;
        write_file(&out_dir.join("judgments").join(format!("{stem}.jsonl")), &jsonl(&cell.judgments))?;
        write_file(&out_dir.join("cells").join(format!("{stem}.csv")), cell_csv(&cell.report).as_bytes())?;
        reports.push(cell.report.clone());
    }

    if config.mode == Mode::Ensemble {
        let dir = out_dir.join("decisions");
        std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
        let per_dataset = config.endpoints.len();
        for (d, dataset) in datasets.iter().enumerate() {
            let members: Vec<&Cell> = cells[d * per_dataset..(d + 1) * per_dataset].iter().collect();
            for &method in &config.methods {
                let (report, lines) = run_ensemble_cell(config, method, dataset, &members);
                write_file(&dir.join(format!("{}.jsonl", report.id)), &lines)?;
                write_file(&out_dir.join("cells").join(format!("{}.csv", report.id)), cell_csv(&report).as_bytes())?;
                reports.push(report);
            }
        }
    }

    let bundle = ReportBundle {
        mode: config.mode,
        cells: reports,
    };
    write_file(&out_dir.join("summary.csv"), bundle.summary_csv().as_bytes())?;
    write_file(&out_dir.join("summary.txt"), bundle.summary_text().as_bytes())?;
    Ok(bundle)
}

/// Per-email fusion outcome; failures carry (email id, error).
pub type FusedDecision = Result<EnsembleDecision, (String, String)>;

/// Fuses judgment files produced by separate runs. Every file must cover
/// the same email ids; the first file fixes the order.
pub fn fuse_judgment_files(
    files: &[Vec<Judgment>],
    priority: &[String],
    method: Method,
) -> Result<Vec<FusedDecision>, ExperimentError> {
    if files.len() < 2 {
        return Err(ExperimentError::Config(format!(
            "fusion needs at least 2 judgment files, got {}",
            files.len()
        )));
    }
    let mut by_id: Vec<BTreeMap<&str, &Judgment>> = Vec::new();
    for file in files {
        by_id.push(file.iter().map(|j| (j.email_id.as_str(), j)).collect());
    }
    let ensemble = Ensemble::new(priority.iter().cloned());
    let mut out = Vec::with_capacity(files[0].len());
    for j in &files[0] {
        let mut members = Vec::with_capacity(files.len());
        for (i, map) in by_id.iter().enumerate() {
            let m = map.get(j.email_id.as_str()).ok_or_else(|| {
                ExperimentError::Config(format!("judgment file {} has no entry for {}", i + 1, j.email_id))
            })?;
            members.push((*m).clone());
        }
        out.push(
            ensemble
                .decide(method, &members)
                .map_err(|e| (j.email_id.clone(), e.to_string())),
        );
    }
    Ok(out)
}

/// Writes a JSONL file in one step, creating parent directories.
pub fn write_jsonl_file<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_error(path))?);
    for item in items {
        serde_json::to_writer(&mut f, item).expect("serializable");
        f.write_all(b"\n").map_err(io_error(path))?;
    }
    f.flush().map_err(io_error(path))
}
