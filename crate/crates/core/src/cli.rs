//! `phishbench` command line.
//!
//! Exit codes: 0 success, 1 invalid input or configuration (one-line
//! diagnostic on stderr), 2 failure while running. Every parsed command
//! writes `manifest.json` into its output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::augment::{build_sft_file, AugmentOptions, DEFAULT_TEACHER_TEMPERATURE, MAX_EXPLANATION_CHARS};
use crate::corpus::{load_dataset, sample, ColumnMapping, Format, LoadOptions};
use crate::ensemble::Method;
use crate::eval::audit::{consistency_audit, read_rows, BUNDLED_TABLES, F1_TOLERANCE};
use crate::eval::experiment::{
    fuse_judgment_files, run_experiment, write_jsonl_file, CellStatus, ExperimentConfig, ExperimentError, Mode,
    DEFAULT_SEED,
};
use crate::eval::metrics::{score, MetricsReport, Prediction, UnparseablePolicy};
use crate::judgment::{Judgment, Verdict};
use crate::llm_client::{LlmClient, ModelEndpoint, ResponseCache};
use crate::lora;
use crate::prompting::{PromptTemplate, DEFAULT_AUGMENTATION_TEMPLATE, DEFAULT_DETECTION_TEMPLATE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "phishbench", version, about = "Phishing-email detection benchmark for chat-completions models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOptions,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct GlobalOptions {
    /// Experiment config (TOML) for eval and transfer.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for sampling and synthetic data.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Maximum concurrent requests across the whole process.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    #[serde(skip)]
    pub verbose: u8,
    /// Output directory for this run.
    #[arg(long, global = true, default_value = "phishbench-out")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Directory for cached completions.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Normalize a CSV or JSONL corpus into the record format.
    Ingest(IngestArgs),
    /// Build an SFT file with teacher-written explanations.
    Augment(AugmentArgs),
    /// Run an experiment from a config file.
    Eval(EvalArgs),
    /// Fuse judgment files from separate runs.
    Ensemble(EnsembleArgs),
    /// Run the endpoints × datasets transfer grid from a config file.
    Transfer,
    /// Recompute F1 from published precision and recall.
    AuditTables(AuditArgs),
    /// Numerical checks on a LoRA layer.
    LoraDemo(LoraArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Augment(_) => "augment",
            Command::Eval(_) => "eval",
            Command::Ensemble(_) => "ensemble",
            Command::Transfer => "transfer",
            Command::AuditTables(_) => "audit-tables",
            Command::LoraDemo(_) => "lora-demo",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SourceArgs {
    /// Corpus file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "csv")]
    pub format: Format,
    /// Column mapping, e.g. subject=subject,body=body,label=label.
    #[arg(long, default_value = "")]
    pub map: String,
    /// Label values read as phishing (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub positive: Option<Vec<String>>,
    /// Label values read as safe (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub negative: Option<Vec<String>>,
    /// Dataset name; record ids are `<name>:<row>`.
    #[arg(long)]
    pub name: String,
    /// Keep a seeded sample of this many records.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Sample uniformly instead of per class.
    #[arg(long)]
    pub uniform: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[command(flatten)]
    pub source: SourceArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Teacher base URL, e.g. http://localhost:8000/v1.
    #[arg(long)]
    pub teacher_url: String,
    #[arg(long)]
    pub teacher_model: String,
    #[arg(long, default_value_t = DEFAULT_TEACHER_TEMPERATURE)]
    pub teacher_temperature: f64,
    /// Attempts beyond the first for refusals and transient errors.
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    #[arg(long, default_value = DEFAULT_AUGMENTATION_TEMPLATE)]
    pub template: String,
    /// Detection template that forms the training prompt.
    #[arg(long, default_value = DEFAULT_DETECTION_TEMPLATE)]
    pub detection_template: String,
    #[arg(long, default_value_t = MAX_EXPLANATION_CHARS)]
    pub max_explanation_chars: usize,
    /// File name of the SFT output inside the output directory.
    #[arg(long, default_value = "sft.jsonl")]
    pub output_name: String,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Overrides the mode in the config.
    #[arg(long)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Args, Serialize)]
pub struct EnsembleArgs {
    /// Judgment JSONL files, one per model.
    #[arg(long = "judgments", num_args = 2.., required = true)]
    pub judgments: Vec<PathBuf>,
    #[arg(long, default_value = "majority")]
    pub method: Method,
    /// Model fingerprints in tie-break order (comma-separated); defaults
    /// to file order.
    #[arg(long, value_delimiter = ',')]
    pub priority: Option<Vec<String>>,
    /// Records file from `ingest`, to score the fused verdicts.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub exclude_unparseable: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AuditArgs {
    /// CSV with table,model,dataset,accuracy,f1,precision,recall columns;
    /// defaults to the bundled tables.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long, default_value_t = F1_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct LoraArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub r: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
}

/// Error carrying its exit class.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> String {
        let e = match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        };
        // thiserror messages often repeat their source; print each cause once
        let mut msg = String::new();
        for cause in e.chain() {
            let text = cause.to_string().replace('\n', " ");
            if !msg.contains(&text) {
                if !msg.is_empty() {
                    msg.push_str(": ");
                }
                msg.push_str(&text);
            }
        }
        msg
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: &'static str,
    version: &'static str,
    seed: u64,
    /// sha256 of the config file, or of the command's options when the
    /// command takes no config.
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<Mode>,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    outputs: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn list_outputs(root: &Path) -> Vec<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
        let Ok(entries) = std::fs::read_dir(dir) else { return };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if let Ok(rel) = path.strip_prefix(root) {
                let rel = rel.to_string_lossy().replace('\\', "/");
                if rel != "manifest.json" {
                    out.push(rel);
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                return EXIT_VALIDATION;
            }
            let rendered = e.render().to_string();
            let line = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{line}");
            return EXIT_VALIDATION;
        }
    };

    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();

    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let out = &cli.global.out;
    let mut mode = None;
    let config_hash = match (&cli.command, &cli.global.config) {
        (Command::Eval(_) | Command::Transfer, Some(path)) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("cannot read config {}", path.display()))
                .map_err(invalid)?;
            sha256_hex(&bytes)
        }
        (Command::Eval(_) | Command::Transfer, None) => {
            return Err(invalid(anyhow!("{} needs --config <file>", cli.command.name())));
        }
        (command, _) => {
            let options = serde_json::json!({ "command": command, "global": &cli.global });
            sha256_hex(options.to_string().as_bytes())
        }
    };
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))
        .map_err(runtime)?;

    let result = execute(cli, &mut mode);
    let manifest = Manifest {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cli.global.seed,
        config_hash,
        mode,
        status: if result.is_ok() { "ok" } else { "failed" },
        error: result.as_ref().err().map(Failure::message),
        outputs: list_outputs(out),
    };
    let path = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("serializable");
    text.push('\n');
    std::fs::write(&path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)?;
    result
}

fn tokio_runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("cannot start async runtime")
        .map_err(runtime)
}

fn client(global: &GlobalOptions, parallelism: usize) -> Result<LlmClient, Failure> {
    let mut client = LlmClient::new().with_max_in_flight(parallelism);
    if let Some(dir) = &global.cache {
        let cache = ResponseCache::new(dir)
            .with_context(|| format!("cannot create cache directory {}", dir.display()))
            .map_err(runtime)?;
        client = client.with_cache(cache);
    }
    Ok(client)
}

fn execute(cli: &Cli, mode: &mut Option<Mode>) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest(args) => ingest(g, args),
        Command::Augment(args) => augment(g, args),
        Command::Eval(args) => eval(g, args.mode, mode),
        Command::Transfer => eval(g, Some(Mode::Transfer), mode),
        Command::Ensemble(args) => ensemble(g, args),
        Command::AuditTables(args) => audit(g, args),
        Command::LoraDemo(args) => lora_demo(g, args),
    }
}

fn load_source(g: &GlobalOptions, s: &SourceArgs) -> Result<crate::corpus::Dataset, Failure> {
    let mut mapping = ColumnMapping::parse_map(&s.map).map_err(|e| invalid(anyhow!(e)))?;
    if let Some(p) = &s.positive {
        mapping.positive = p.clone();
    }
    if let Some(n) = &s.negative {
        mapping.negative = n.clone();
    }
    let dataset = load_dataset(&s.input, &s.name, &LoadOptions::new(s.format, mapping)).map_err(invalid)?;
    match s.sample {
        Some(n) => sample(&dataset, n, g.seed, !s.uniform).map_err(invalid),
        None => Ok(dataset),
    }
}

fn ingest(g: &GlobalOptions, args: &IngestArgs) -> Result<(), Failure> {
    let dataset = load_source(g, &args.source)?;
    let path = g.out.join(format!("{}.jsonl", dataset.name));
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(&path)
            .with_context(|| format!("cannot create {}", path.display()))
            .map_err(runtime)?,
    );
    dataset
        .write_jsonl(&mut file)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)?;
    let counts = dataset.class_counts();
    let truncated = dataset.records.iter().filter(|r| r.truncated).count();
    println!(
        "{}: {} records ({} phishing, {} safe, {} truncated) -> {}",
        dataset.name,
        dataset.len(),
        counts.phishing,
        counts.safe,
        truncated,
        path.display()
    );
    Ok(())
}

fn augment(g: &GlobalOptions, args: &AugmentArgs) -> Result<(), Failure> {
    let dataset = load_source(g, &args.source)?;
    let augmentation = PromptTemplate::resolve(&args.template).map_err(invalid)?;
    let detection = PromptTemplate::resolve(&args.detection_template).map_err(invalid)?;
    let mut teacher = ModelEndpoint::new(&args.teacher_url, &args.teacher_model);
    teacher.temperature = args.teacher_temperature;
    teacher.max_retries = args.max_retries;
    teacher.validate().map_err(invalid)?;
    if args.output_name.contains(['/', '\\']) {
        return Err(invalid(anyhow!("--output-name must be a plain file name")));
    }

    let parallelism = g.parallelism.unwrap_or(4).max(1);
    let client = client(g, parallelism)?;
    let out = g.out.join(&args.output_name);
    let options = AugmentOptions {
        parallelism,
        max_explanation_chars: args.max_explanation_chars,
    };
    let stats = tokio_runtime()?
        .block_on(build_sft_file(&client, &dataset, &teacher, &augmentation, &detection, &out, &options))
        .map_err(runtime)?;
    let stats_path = g.out.join("augment_stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats).expect("serializable") + "\n")
        .with_context(|| format!("cannot write {}", stats_path.display()))
        .map_err(runtime)?;
    println!(
        "wrote {} examples ({} phishing, {} safe), skipped {}, {} teacher disagreements, mean explanation {:.0} chars",
        stats.written, stats.phishing, stats.safe, stats.skipped, stats.disagreements, stats.mean_explanation_chars
    );
    Ok(())
}

fn eval(g: &GlobalOptions, mode_override: Option<Mode>, mode: &mut Option<Mode>) -> Result<(), Failure> {
    let path = g.config.as_ref().expect("checked by run");
    let mut config = ExperimentConfig::load(path)?;
    if let Some(m) = mode_override {
        config.mode = m;
    }
    if let Some(p) = g.parallelism {
        config.parallelism = p;
    }
    *mode = Some(config.mode);
    config.validate()?;
    let client = client(g, config.parallelism.max(1))?;
    let bundle = tokio_runtime()?.block_on(run_experiment(&config, &client, &g.out))?;
    print!("{}", bundle.summary_text());
    let failed: Vec<&str> = bundle.failed_cells().map(|c| c.id.as_str()).collect();
    if failed.len() == bundle.cells.len() {
        return Err(runtime(anyhow!("every cell failed: {}", failed.join(", "))));
    }
    for c in bundle.cells.iter().filter(|c| c.status == CellStatus::Failed) {
        log::warn!("cell {} failed: {}", c.id, c.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn read_judgments(path: &Path) -> Result<Vec<Judgment>, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(invalid)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{}: line {}", path.display(), i + 1))
                .map_err(invalid)
        })
        .collect()
}

fn ensemble(g: &GlobalOptions, args: &EnsembleArgs) -> Result<(), Failure> {
    let files = args
        .judgments
        .iter()
        .map(|p| read_judgments(p))
        .collect::<Result<Vec<_>, _>>()?;
    let priority = match &args.priority {
        Some(p) => p.clone(),
        None => files
            .iter()
            .filter_map(|f| f.first().map(|j| j.source_model.clone()))
            .collect(),
    };
    let fused = fuse_judgment_files(&files, &priority, args.method)?;

    let mut lines = Vec::with_capacity(fused.len());
    let mut predictions = Vec::with_capacity(fused.len());
    for d in &fused {
        match d {
            Ok(decision) => {
                predictions.push(Prediction::from(decision));
                lines.push(serde_json::to_value(decision).expect("serializable"));
            }
            Err((id, error)) => {
                predictions.push(Prediction {
                    email_id: id.clone(),
                    verdict: Verdict::Unparseable,
                });
                lines.push(serde_json::json!({
                    "email_id": id, "method": args.method, "verdict": Verdict::Unparseable, "error": error,
                }));
            }
        }
    }
    write_jsonl_file(&g.out.join("decisions.jsonl"), &lines)?;

    if let Some(path) = &args.dataset {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string();
        let dataset = crate::corpus::Dataset::read_jsonl(path, &name).map_err(invalid)?;
        let policy = if args.exclude_unparseable {
            UnparseablePolicy::Exclude
        } else {
            UnparseablePolicy::ScoreAsError
        };
        let report = score(&predictions, &dataset, &format!("ensemble-{}", args.method.as_str()), policy)
            .map_err(invalid)?;
        let csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row());
        let path = g.out.join("metrics.csv");
        std::fs::write(&path, &csv)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(runtime)?;
        print!("{csv}");
    } else {
        println!("fused {} emails -> {}", fused.len(), g.out.join("decisions.jsonl").display());
    }
    Ok(())
}

fn audit(g: &GlobalOptions, args: &AuditArgs) -> Result<(), Failure> {
    let rows = match &args.fixture {
        Some(path) => {
            let file = std::fs::File::open(path)
                .with_context(|| format!("cannot open fixture {}", path.display()))
                .map_err(invalid)?;
            read_rows(file)
        }
        None => read_rows(BUNDLED_TABLES.as_bytes()),
    }
    .context("malformed fixture")
    .map_err(invalid)?;
    let report = consistency_audit(&rows, args.tolerance);
    let text = report.render();
    print!("{text}");
    let path = g.out.join("audit.txt");
    std::fs::write(&path, &text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)?;
    let failed = report.failures().count();
    if failed > 0 {
        return Err(invalid(anyhow!("{failed} row(s) deviate by more than {}", args.tolerance)));
    }
    Ok(())
}

fn lora_demo(g: &GlobalOptions, args: &LoraArgs) -> Result<(), Failure> {
    let report = lora::demo(args.d, args.k, args.r, g.seed, args.steps).map_err(invalid)?;
    println!("layer            d={} k={} r={} alpha={}", report.d, report.k, report.r, report.alpha);
    println!("merge rel error  {:.3e}", report.merge_rel_error);
    println!(
        "grad check       {:.3e} max relative error over {} entries",
        report.grad_check.max_rel_error, report.grad_check.entries
    );
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        println!("training loss    {first:.6} -> {last:.6} over {} steps", report.losses.len());
    }
    println!("frozen W         {} ({})", if report.base_unchanged { "unchanged" } else { "CHANGED" }, &report.base_checksum[..16]);
    println!();
    println!("{:<12} {:>10}", "parameters", "count");
    println!("{:<12} {:>10}", "full d*k", report.savings.full_count);
    println!("{:<12} {:>10}", "lora r(d+k)", report.savings.lora_count);
    println!("{:<12} {:>10.4}", "ratio", report.savings.ratio);
    let path = g.out.join("lora_demo.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).expect("serializable") + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)?;
    Ok(())
}
