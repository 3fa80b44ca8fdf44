//! Teacher-written explanations and the SFT JSONL export.
//!
//! Each line of an SFT file is
//! `{"messages":[...],"meta":{"email_id":..,"label":..,"teacher":..}}`
//! where `messages` is the detection prompt followed by an assistant turn
//! holding the explanation and the delimited ground-truth verdict.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EmailRecord, Label};
use crate::judgment::{extract_verdict, ParseMode, Verdict};
use crate::prompting::{ChatMessage, PromptError, PromptTemplate, Role};

/// Explanations longer than this are cut at a word boundary.
pub const MAX_EXPLANATION_CHARS: usize = 1200;

/// Teachers sample at a small positive temperature so retries can differ.
pub const DEFAULT_TEACHER_TEMPERATURE: f64 = 0.3;

const REFUSAL_PREFIXES: &[&str] = &[
    "i can't",
    "i cannot",
    "i can not",
    "i won't",
    "i will not",
    "i'm sorry",
    "i am sorry",
    "sorry, i",
    "i'm unable",
    "i am unable",
    "as an ai",
    "i'm not able",
    "i am not able",
];

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("teacher refused or returned nothing for {email_id} after {attempts} attempt(s)")]
    TeacherRefusal { email_id: String, attempts: u32 },
    #[cfg(feature = "runtime")]
    #[error("teacher request failed for {email_id}: {source}")]
    Teacher {
        email_id: String,
        #[source]
        source: crate::llm_client::ClientError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: line {line}: {reason}")]
    InvalidSftLine { path: PathBuf, line: usize, reason: String },
    #[error("dataset has no records")]
    EmptyDataset,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedExample {
    pub email_id: String,
    pub subject: String,
    pub body: String,
    pub label: Label,
    pub explanation: String,
    pub teacher_fingerprint: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl AugmentedExample {
    pub fn new(email: &EmailRecord, explanation: &str, teacher: &str) -> Self {
        Self {
            email_id: email.id.clone(),
            subject: email.subject.clone(),
            body: email.body.clone(),
            label: email.label,
            explanation: explanation.to_string(),
            teacher_fingerprint: teacher.to_string(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn as_email(&self) -> EmailRecord {
        EmailRecord {
            id: self.email_id.clone(),
            subject: self.subject.clone(),
            body: self.body.clone(),
            label: self.label,
            truncated: false,
        }
    }
}

/// Result of cleaning one teacher completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Sanitized {
    pub text: String,
    /// Delimited verdict the teacher wrote, if any.
    pub teacher_verdict: Option<Verdict>,
    /// Delimited fragments or stray delimiters were removed.
    pub stripped: bool,
    pub truncated: bool,
}

fn remove_ignore_ascii_case(haystack: &str, needle: &str) -> (String, bool) {
    if needle.is_empty() {
        return (haystack.to_string(), false);
    }
    let lower = haystack.to_ascii_lowercase();
    let needle = needle.to_ascii_lowercase();
    let mut out = String::with_capacity(haystack.len());
    let mut last = 0;
    let mut found = false;
    for (start, _) in lower.match_indices(&needle) {
        if start < last {
            continue;
        }
        out.push_str(&haystack[last..start]);
        last = start + needle.len();
        found = true;
    }
    out.push_str(&haystack[last..]);
    (out, found)
}

/// Cuts `text` to at most `max_chars` characters, preferring the last
/// whitespace boundary.
fn cap_chars(text: &str, max_chars: usize) -> (String, bool) {
    let Some((cut, _)) = text.char_indices().nth(max_chars) else {
        return (text.to_string(), false);
    };
    let head = &text[..cut];
    let head = match head.rfind(char::is_whitespace) {
        Some(ws) if ws > 0 => &head[..ws],
        _ => head,
    };
    (head.trim_end().to_string(), true)
}

/// Removes every delimited verdict and any leftover delimiter, then trims
/// and caps the explanation. The returned text never contains the
/// delimiter.
pub fn sanitize_explanation(raw: &str, template: &PromptTemplate, max_chars: usize) -> Sanitized {
    let parsed = extract_verdict(raw, &template.delimiter, &template.vocabulary);
    let teacher_verdict = (parsed.mode == ParseMode::Delimited).then_some(parsed.verdict);

    let mut text = raw.to_string();
    let mut stripped = false;
    for word in [&template.vocabulary.0, &template.vocabulary.1] {
        let fragment = format!("{0}{word}{0}", template.delimiter);
        let (t, found) = remove_ignore_ascii_case(&text, &fragment);
        text = t;
        stripped |= found;
    }
    // removing a delimiter can join two halves into a new one
    while text.contains(&template.delimiter) {
        text = text.replace(&template.delimiter, "");
        stripped = true;
    }
    let (text, truncated) = cap_chars(text.trim(), max_chars);
    Sanitized {
        text: text.trim().to_string(),
        teacher_verdict,
        stripped,
        truncated,
    }
}

pub fn is_refusal(text: &str) -> bool {
    let t = text.trim_start().to_lowercase().replace('\u{2019}', "'");
    t.is_empty() || REFUSAL_PREFIXES.iter().any(|p| t.starts_with(p))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub email_id: String,
    pub label: Label,
    pub teacher: String,
}

/// One line of an SFT JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftLine {
    pub messages: Vec<ChatMessage>,
    pub meta: SftMeta,
}

impl SftLine {
    pub fn new(messages: Vec<ChatMessage>, example: &AugmentedExample) -> Self {
        Self {
            messages,
            meta: SftMeta {
                email_id: example.email_id.clone(),
                label: example.label,
                teacher: example.teacher_fingerprint.clone(),
            },
        }
    }

    /// Role order is valid and the assistant target parses, via the
    /// delimited path, to the recorded label.
    pub fn check(&self, template: &PromptTemplate) -> Result<(), String> {
        let transcript = crate::prompting::ChatTranscript {
            messages: self.messages.clone(),
        };
        transcript.validate_training().map_err(|e| e.to_string())?;
        let target = transcript.assistant().unwrap_or_default();
        let parsed = extract_verdict(target, &template.delimiter, &template.vocabulary);
        if parsed.mode != ParseMode::Delimited {
            return Err("assistant target has no delimited verdict".into());
        }
        if parsed.verdict != Verdict::from_label(self.meta.label) {
            return Err(format!(
                "assistant verdict {} disagrees with label {}",
                parsed.verdict,
                self.meta.label.as_str()
            ));
        }
        Ok(())
    }

    pub fn explanation(&self) -> Option<&str> {
        let target = self.messages.iter().rev().find(|m| m.role == Role::Assistant)?;
        target.content.rsplit_once('\n').map(|(e, _)| e)
    }
}

/// Reads and checks every line of an SFT file.
pub fn read_sft_file(path: &Path, template: &PromptTemplate) -> Result<Vec<SftLine>, AugmentError> {
    let io = |source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |reason: String| AugmentError::InvalidSftLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let parsed: SftLine = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        parsed.check(template).map_err(invalid)?;
        lines.push(parsed);
    }
    Ok(lines)
}

/// `out.jsonl` -> `out.no_explanation.jsonl`, next to the main file.
pub fn ablation_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("sft");
    out.with_file_name(format!("{stem}.no_explanation.jsonl"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationStats {
    pub total: usize,
    pub written: usize,
    pub phishing: usize,
    pub safe: usize,
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
    /// Teacher wrote a delimited verdict opposite to the label.
    pub disagreements: usize,
    pub sanitized: usize,
    pub truncated: usize,
    pub mean_explanation_chars: f64,
}

/// Writes `lines` to `path` through a sibling temporary file.
fn write_jsonl_atomic(path: &Path, lines: &[SftLine]) -> Result<(), AugmentError> {
    let io = |source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("jsonl.partial");
    let result = (|| -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        for line in lines {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n")?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io)
}

/// Writes the main SFT file and its label-only companion. Neither file is
/// left behind half-written.
pub fn write_sft_files(
    examples: &[AugmentedExample],
    detection: &PromptTemplate,
    out: &Path,
) -> Result<PathBuf, AugmentError> {
    let mut main = Vec::with_capacity(examples.len());
    let mut ablation = Vec::with_capacity(examples.len());
    for ex in examples {
        main.push(SftLine::new(crate::prompting::render_sft_example(ex, detection)?.messages, ex));
        ablation.push(SftLine::new(
            crate::prompting::render_label_only_example(ex, detection)?.messages,
            ex,
        ));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| AugmentError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let companion = ablation_path(out);
    write_jsonl_atomic(out, &main)?;
    if let Err(e) = write_jsonl_atomic(&companion, &ablation) {
        let _ = std::fs::remove_file(out);
        return Err(e);
    }
    Ok(companion)
}

#[cfg(feature = "runtime")]
pub use runtime::*;

#[cfg(feature = "runtime")]
mod runtime {
    use super::*;
    use crate::corpus::Dataset;
    use crate::llm_client::{LlmClient, ModelEndpoint};
    use crate::prompting::render_augmentation_prompt;
    use futures::stream::{self, StreamExt};

    #[derive(Debug, Clone)]
    pub struct AugmentOptions {
        pub parallelism: usize,
        pub max_explanation_chars: usize,
    }

    impl Default for AugmentOptions {
        fn default() -> Self {
            Self {
                parallelism: 4,
                max_explanation_chars: MAX_EXPLANATION_CHARS,
            }
        }
    }

    #[derive(Debug, Clone)]
    pub struct Augmented {
        pub example: AugmentedExample,
        pub sanitized: bool,
        pub truncated: bool,
        pub disagreement: bool,
    }

    /// Asks the teacher to explain the known label. Refusals and empty
    /// outputs are retried `teacher.max_retries` more times.
    pub async fn augment_record(
        client: &LlmClient,
        email: &EmailRecord,
        teacher: &ModelEndpoint,
        augmentation: &PromptTemplate,
        max_chars: usize,
    ) -> Result<Augmented, AugmentError> {
        let prompt = render_augmentation_prompt(email, augmentation)?;
        let attempts = 1 + teacher.max_retries;
        for _ in 0..attempts {
            let completion = client
                .complete(teacher, &prompt)
                .await
                .map_err(|source| AugmentError::Teacher {
                    email_id: email.id.clone(),
                    source,
                })?;
            if is_refusal(&completion.text) {
                continue;
            }
            let clean = sanitize_explanation(&completion.text, augmentation, max_chars);
            if clean.text.is_empty() || is_refusal(&clean.text) {
                continue;
            }
            let disagreement = clean
                .teacher_verdict
                .is_some_and(|v| v.is_parseable() && v != Verdict::from_label(email.label));
            if disagreement {
                log::warn!("{}: teacher verdict contradicts label {}", email.id, email.label.as_str());
            }
            return Ok(Augmented {
                example: AugmentedExample::new(email, &clean.text, &teacher.fingerprint()),
                sanitized: clean.stripped,
                truncated: clean.truncated,
                disagreement,
            });
        }
        Err(AugmentError::TeacherRefusal {
            email_id: email.id.clone(),
            attempts,
        })
    }

    /// Augments every record and writes the SFT file plus its label-only
    /// companion. Records the teacher refuses are skipped and counted.
    pub async fn build_sft_file(
        client: &LlmClient,
        dataset: &Dataset,
        teacher: &ModelEndpoint,
        augmentation: &PromptTemplate,
        detection: &PromptTemplate,
        out: &Path,
        options: &AugmentOptions,
    ) -> Result<AugmentationStats, AugmentError> {
        if dataset.is_empty() {
            return Err(AugmentError::EmptyDataset);
        }
        let results: Vec<_> = stream::iter(&dataset.records)
            .map(|email| augment_record(client, email, teacher, augmentation, options.max_explanation_chars))
            .buffered(options.parallelism.max(1))
            .collect()
            .await;

        let mut stats = AugmentationStats {
            total: dataset.len(),
            ..Default::default()
        };
        let mut examples = Vec::new();
        let mut chars = 0usize;
        for (email, result) in dataset.records.iter().zip(results) {
            match result {
                Ok(a) => {
                    stats.sanitized += a.sanitized as usize;
                    stats.truncated += a.truncated as usize;
                    stats.disagreements += a.disagreement as usize;
                    match a.example.label {
                        Label::Phishing => stats.phishing += 1,
                        Label::Safe => stats.safe += 1,
                    }
                    chars += a.example.explanation.chars().count();
                    examples.push(a.example);
                }
                Err(e @ AugmentError::Prompt(_)) => return Err(e),
                Err(e) => {
                    log::warn!("skipping {}: {e}", email.id);
                    stats.skipped += 1;
                    stats.skipped_ids.push(email.id.clone());
                }
            }
        }
        stats.written = examples.len();
        if !examples.is_empty() {
            stats.mean_explanation_chars = chars as f64 / examples.len() as f64;
        }
        write_sft_files(&examples, detection, out)?;
        Ok(stats)
    }
}
