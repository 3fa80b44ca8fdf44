//! Prompt templates and chat transcripts.
//!
//! Templates are plain-text assets with a small front-matter block:
//!
//! ```text
//! ---
//! name: detect-v1
//! kind: detection
//! delimiter: ###
//! vocabulary: Phishing, Safe
//! ---
//! [system]
//! ...
//! [user]
//! Subject: {subject}
//! ...
//! ```
//!
//! Placeholders are `{subject}`, `{body}`, `{label}`, `{delimiter}`,
//! `{positive}` and `{negative}`. Substituted values are never re-scanned,
//! so braces inside an email cannot trigger further substitution.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentedExample;
use crate::corpus::{EmailRecord, Label};
use crate::judgment::contains_standalone_word;

/// Marker substituted for an empty subject line.
pub const NO_SUBJECT: &str = "(no subject)";

const BUILTIN_TEMPLATES: &[(&str, &str)] = &[
    ("detect-v1", include_str!("../templates/detect-v1.txt")),
    (
        "detect-user-only-v1",
        include_str!("../templates/detect-user-only-v1.txt"),
    ),
    ("augment-v1", include_str!("../templates/augment-v1.txt")),
];

pub const DEFAULT_DETECTION_TEMPLATE: &str = "detect-v1";
pub const DEFAULT_AUGMENTATION_TEMPLATE: &str = "augment-v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template placeholder {{{0}}} cannot be filled")]
    TemplateHoleUnfilled(String),
    #[error("explanation is empty")]
    EmptyExplanation,
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("template {name:?} is a {actual} template, expected {expected}")]
    WrongKind {
        name: String,
        expected: TemplateKind,
        actual: TemplateKind,
    },
    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Detection,
    Augmentation,
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::Detection => "detection",
            TemplateKind::Augmentation => "augmentation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub kind: TemplateKind,
    pub system_text: Option<String>,
    pub user_text: String,
    pub delimiter: String,
    /// (positive word, negative word).
    pub vocabulary: (String, String),
}

impl PromptTemplate {
    /// One of the templates bundled with the crate.
    pub fn builtin(name: &str) -> Result<Self, PromptError> {
        let (_, text) = BUILTIN_TEMPLATES
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))?;
        Self::parse(text)
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_TEMPLATES.iter().map(|(n, _)| *n)
    }

    /// Resolves a bundled template name, or reads a template file from disk.
    pub fn resolve(name_or_path: &str) -> Result<Self, PromptError> {
        match Self::builtin(name_or_path) {
            Err(PromptError::UnknownTemplate(_)) if Path::new(name_or_path).is_file() => {
                let text = std::fs::read_to_string(name_or_path)
                    .map_err(|e| PromptError::InvalidTemplate(e.to_string()))?;
                Self::parse(&text)
            }
            other => other,
        }
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let invalid = |m: &str| PromptError::InvalidTemplate(m.to_string());
        let text = text.replace("\r\n", "\n");
        let rest = text
            .strip_prefix("---\n")
            .ok_or_else(|| invalid("missing front-matter"))?;
        let (front, content) = rest
            .split_once("\n---\n")
            .ok_or_else(|| invalid("unterminated front-matter"))?;

        let mut name = None;
        let mut kind = None;
        let mut delimiter = "###".to_string();
        let mut vocabulary = ("Phishing".to_string(), "Safe".to_string());
        for line in front.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| invalid(&format!("bad front-matter line {line:?}")))?;
            let value = value.trim();
            match key.trim() {
                "name" => name = Some(value.to_string()),
                "kind" => {
                    kind = Some(match value {
                        "detection" => TemplateKind::Detection,
                        "augmentation" => TemplateKind::Augmentation,
                        other => return Err(invalid(&format!("unknown kind {other:?}"))),
                    })
                }
                "delimiter" => delimiter = value.to_string(),
                "vocabulary" => {
                    let (pos, neg) = value
                        .split_once(',')
                        .ok_or_else(|| invalid("vocabulary needs two comma-separated words"))?;
                    vocabulary = (pos.trim().to_string(), neg.trim().to_string());
                }
                other => return Err(invalid(&format!("unknown front-matter key {other:?}"))),
            }
        }

        let mut system = None;
        let mut user = None;
        let mut current: Option<&mut Option<String>> = None;
        for line in content.split_inclusive('\n') {
            match line.trim_end() {
                "[system]" => current = Some(&mut system),
                "[user]" => current = Some(&mut user),
                _ => match current.as_deref_mut() {
                    Some(slot) => slot.get_or_insert_with(String::new).push_str(line),
                    None if line.trim().is_empty() => {}
                    None => return Err(invalid("text before the first [system]/[user] section")),
                },
            }
        }

        let template = Self {
            name: name.ok_or_else(|| invalid("front-matter has no name"))?,
            kind: kind.ok_or_else(|| invalid("front-matter has no kind"))?,
            system_text: system.map(|s| s.trim_end().to_string()),
            user_text: user
                .map(|s| s.trim_end().to_string())
                .ok_or_else(|| invalid("template has no [user] section"))?,
            delimiter,
            vocabulary,
        };
        template.validate()?;
        Ok(template)
    }

    /// Checks delimiter, placeholders and (for detection templates) the verdict-word lint.
    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |m: String| Err(PromptError::InvalidTemplate(m));
        if self.delimiter.is_empty() {
            return invalid("delimiter is empty".into());
        }
        let (pos, neg) = &self.vocabulary;
        if pos.is_empty() || neg.is_empty() || pos.eq_ignore_ascii_case(neg) {
            return invalid("vocabulary needs two distinct non-empty words".into());
        }
        if pos.contains(&self.delimiter) || neg.contains(&self.delimiter) {
            return invalid("delimiter occurs inside a verdict word".into());
        }

        let text = self.full_text();
        let mut required = vec!["subject", "body"];
        if self.kind == TemplateKind::Augmentation {
            required.push("label");
        }
        for hole in required {
            if !text.contains(&format!("{{{hole}}}")) {
                return Err(PromptError::TemplateHoleUnfilled(hole.to_string()));
            }
        }
        if self.kind == TemplateKind::Detection && text.contains("{label}") {
            return invalid("detection templates must not reveal {label}".into());
        }

        if self.kind == TemplateKind::Detection {
            self.lint_verdict_words()?;
        }
        Ok(())
    }

    /// Verdict words may only appear on the instruction line, i.e. a line
    /// that also carries the delimiter.
    fn lint_verdict_words(&self) -> Result<(), PromptError> {
        let fixed = |s: &str| self.fill(s, &[]).unwrap_or_else(|_| s.to_string());
        for section in [self.system_text.as_deref(), Some(self.user_text.as_str())]
            .into_iter()
            .flatten()
        {
            for line in fixed(section).lines() {
                if line.contains(&self.delimiter) {
                    continue;
                }
                for word in [&self.vocabulary.0, &self.vocabulary.1] {
                    if contains_standalone_word(line, word) {
                        return Err(PromptError::InvalidTemplate(format!(
                            "verdict word {word:?} used outside the instruction line: {line:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn full_text(&self) -> String {
        match &self.system_text {
            Some(s) => format!("{s}\n{}", self.user_text),
            None => self.user_text.clone(),
        }
    }

    pub fn verdict_word(&self, label: Label) -> &str {
        match label {
            Label::Phishing => &self.vocabulary.0,
            Label::Safe => &self.vocabulary.1,
        }
    }

    /// `<delimiter><word><delimiter>` for a label.
    pub fn delimited(&self, label: Label) -> String {
        format!("{d}{w}{d}", d = self.delimiter, w = self.verdict_word(label))
    }

    /// Single-pass placeholder substitution; unknown holes are an error.
    /// Fields not listed in `values` are left in place (fixed fields are
    /// always filled).
    fn fill(&self, text: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}').filter(|&c| {
                c > 0 && after[..c].chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_')
            });
            let Some(close) = close else {
                out.push('{');
                rest = after;
                continue;
            };
            let key = &after[..close];
            let value = match key {
                "delimiter" => Some(self.delimiter.as_str()),
                "positive" => Some(self.vocabulary.0.as_str()),
                "negative" => Some(self.vocabulary.1.as_str()),
                _ => values.iter().find(|(k, _)| *k == key).map(|(_, v)| *v),
            };
            match value {
                Some(v) => out.push_str(v),
                None if matches!(key, "subject" | "body" | "label") && values.is_empty() => {
                    out.push_str(&rest[open..open + close + 2]);
                }
                None => return Err(PromptError::TemplateHoleUnfilled(key.to_string())),
            }
            rest = &after[close + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }

    fn render(&self, values: &[(&str, &str)]) -> Result<ChatTranscript, PromptError> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &self.system_text {
            messages.push(ChatMessage::new(Role::System, self.fill(system, values)?));
        }
        messages.push(ChatMessage::new(Role::User, self.fill(&self.user_text, values)?));
        Ok(ChatTranscript { messages })
    }

    fn expect_kind(&self, expected: TemplateKind) -> Result<(), PromptError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(PromptError::WrongKind {
                name: self.name.clone(),
                expected,
                actual: self.kind,
            })
        }
    }
}

fn subject_or_marker(subject: &str) -> &str {
    if subject.trim().is_empty() {
        NO_SUBJECT
    } else {
        subject
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub messages: Vec<ChatMessage>,
}

impl ChatTranscript {
    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn last(&self) -> Option<&ChatMessage> {
        self.messages.last()
    }

    pub fn assistant(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
    }

    /// Optional leading system message, then strictly alternating
    /// user/assistant turns starting with user.
    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |m: &str| Err(PromptError::InvalidTranscript(m.to_string()));
        let turns = match self.messages.first() {
            None => return invalid("no messages"),
            Some(m) if m.role == Role::System => &self.messages[1..],
            Some(_) => &self.messages[..],
        };
        if turns.is_empty() {
            return invalid("no user message");
        }
        for (i, m) in turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != expected {
                return invalid(&format!("message {i} has role {:?}, expected {expected:?}", m.role));
            }
        }
        Ok(())
    }

    /// A training transcript must additionally end on the assistant turn.
    pub fn validate_training(&self) -> Result<(), PromptError> {
        self.validate()?;
        match self.last() {
            Some(m) if m.role == Role::Assistant => Ok(()),
            _ => Err(PromptError::InvalidTranscript(
                "training transcript must end with an assistant message".into(),
            )),
        }
    }
}

pub fn render_detection_prompt(
    email: &EmailRecord,
    template: &PromptTemplate,
) -> Result<ChatTranscript, PromptError> {
    template.expect_kind(TemplateKind::Detection)?;
    template.render(&[
        ("subject", subject_or_marker(&email.subject)),
        ("body", &email.body),
    ])
}

pub fn render_augmentation_prompt(
    email: &EmailRecord,
    template: &PromptTemplate,
) -> Result<ChatTranscript, PromptError> {
    template.expect_kind(TemplateKind::Augmentation)?;
    if !template.full_text().contains("{label}") {
        return Err(PromptError::TemplateHoleUnfilled("label".into()));
    }
    template.render(&[
        ("subject", subject_or_marker(&email.subject)),
        ("body", &email.body),
        ("label", template.verdict_word(email.label)),
    ])
}

/// Assistant target for a training example: explanation, newline, delimited verdict.
pub fn sft_target(explanation: &str, label: Label, template: &PromptTemplate) -> String {
    format!("{}\n{}", explanation.trim(), template.delimited(label))
}

/// Detection prompt followed by the explanation-plus-verdict target.
pub fn render_sft_example(
    example: &AugmentedExample,
    template: &PromptTemplate,
) -> Result<ChatTranscript, PromptError> {
    if example.explanation.trim().is_empty() {
        return Err(PromptError::EmptyExplanation);
    }
    let mut transcript = render_detection_prompt(&example.as_email(), template)?;
    transcript.messages.push(ChatMessage::new(
        Role::Assistant,
        sft_target(&example.explanation, example.label, template),
    ));
    Ok(transcript)
}

/// Same prompt, but the target is the bare delimited verdict.
pub fn render_label_only_example(
    example: &AugmentedExample,
    template: &PromptTemplate,
) -> Result<ChatTranscript, PromptError> {
    let mut transcript = render_detection_prompt(&example.as_email(), template)?;
    transcript
        .messages
        .push(ChatMessage::new(Role::Assistant, template.delimited(example.label)));
    Ok(transcript)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judgment::{extract_verdict, ParseMode, Verdict};

    fn email(subject: &str, body: &str, label: Label) -> EmailRecord {
        EmailRecord::new("t:0", subject, body, label).unwrap()
    }

    fn detect() -> PromptTemplate {
        PromptTemplate::builtin(DEFAULT_DETECTION_TEMPLATE).unwrap()
    }

    fn augment() -> PromptTemplate {
        PromptTemplate::builtin(DEFAULT_AUGMENTATION_TEMPLATE).unwrap()
    }

    #[test]
    fn builtins_parse_and_validate() {
        for name in PromptTemplate::builtin_names() {
            PromptTemplate::builtin(name).unwrap();
        }
    }

    #[test]
    fn detection_prompt_substitutes_email() {
        let t = render_detection_prompt(&email("Win money", "click here", Label::Phishing), &detect())
            .unwrap();
        assert_eq!(t.messages.len(), 2);
        assert_eq!(t.messages[0].role, Role::System);
        let user = &t.messages[1].content;
        assert!(user.contains("Win money"));
        assert!(user.contains("click here"));
        assert!(t.messages[0].content.contains("###Phishing###"));
        assert!(t.messages[0].content.contains("###Safe###"));
        assert!(t.assistant().is_none());
        t.validate().unwrap();
    }

    #[test]
    fn empty_subject_gets_marker() {
        let t = render_detection_prompt(&email("", "hello", Label::Safe), &detect()).unwrap();
        assert!(t.messages[1].content.contains("Subject: (no subject)"));
    }

    #[test]
    fn rendering_is_pure() {
        let e = email("a {body} b", "{subject} {label}", Label::Safe);
        let a = serde_json::to_vec(&render_detection_prompt(&e, &detect()).unwrap()).unwrap();
        let b = serde_json::to_vec(&render_detection_prompt(&e, &detect()).unwrap()).unwrap();
        assert_eq!(a, b);
        // braces inside the email are not re-expanded
        let t = render_detection_prompt(&e, &detect()).unwrap();
        assert!(t.messages[1].content.contains("a {body} b"));
    }

    #[test]
    fn augmentation_prompt_carries_label() {
        let t = augment();
        let p = render_augmentation_prompt(&email("x", "y", Label::Phishing), &t).unwrap();
        assert!(p.messages[1].content.contains("Phishing"));
        let s = render_augmentation_prompt(&email("x", "y", Label::Safe), &t).unwrap();
        assert!(s.messages[1].content.contains("Safe"));
    }

    #[test]
    fn augmentation_template_without_label_hole() {
        let mut t = augment();
        t.user_text = t.user_text.replace("{label}", "");
        assert_eq!(
            render_augmentation_prompt(&email("x", "y", Label::Safe), &t),
            Err(PromptError::TemplateHoleUnfilled("label".into()))
        );
        let text = "---\nname: a\nkind: augmentation\n---\n[user]\n{subject} {body}\n";
        assert_eq!(
            PromptTemplate::parse(text),
            Err(PromptError::TemplateHoleUnfilled("label".into()))
        );
    }

    #[test]
    fn unknown_placeholder_is_unfilled() {
        let mut t = detect();
        t.user_text.push_str("\n{sender}");
        assert_eq!(
            render_detection_prompt(&email("a", "b", Label::Safe), &t),
            Err(PromptError::TemplateHoleUnfilled("sender".into()))
        );
    }

    #[test]
    fn lint_rejects_verdict_word_outside_instruction() {
        let text = "---\nname: bad\nkind: detection\n---\n[user]\nIs this phishing?\n{subject}\n{body}\nAnswer {delimiter}{positive}{delimiter} or {delimiter}{negative}{delimiter}.\n";
        assert!(matches!(
            PromptTemplate::parse(text),
            Err(PromptError::InvalidTemplate(_))
        ));
        let ok = text.replace("Is this phishing?", "Is this fraud?");
        PromptTemplate::parse(&ok).unwrap();
    }

    #[test]
    fn delimiter_inside_vocabulary_rejected() {
        let text = "---\nname: bad\nkind: detection\ndelimiter: af\nvocabulary: Phishing, Safe\n---\n[user]\n{subject} {body}\n";
        assert!(matches!(
            PromptTemplate::parse(text),
            Err(PromptError::InvalidTemplate(_))
        ));
    }

    #[test]
    fn sft_example_targets() {
        let t = detect();
        let ex = AugmentedExample::new(
            &email("Verify", "login now", Label::Phishing),
            "Urgency and credential request.",
            "teacher",
        );
        let tr = render_sft_example(&ex, &t).unwrap();
        tr.validate_training().unwrap();
        let target = tr.assistant().unwrap();
        assert_eq!(target, "Urgency and credential request.\n###Phishing###");

        let ex = AugmentedExample::new(
            &email("News", "weekly digest", Label::Safe),
            "Routine newsletter...",
            "teacher",
        );
        assert!(render_sft_example(&ex, &t).unwrap().assistant().unwrap().ends_with("###Safe###"));
    }

    #[test]
    fn empty_explanation_rejected() {
        let ex = AugmentedExample::new(&email("a", "b", Label::Safe), "  ", "teacher");
        assert_eq!(render_sft_example(&ex, &detect()), Err(PromptError::EmptyExplanation));
    }

    #[test]
    fn transcript_role_order() {
        let bad = ChatTranscript {
            messages: vec![
                ChatMessage::new(Role::User, "a"),
                ChatMessage::new(Role::User, "b"),
            ],
        };
        assert!(bad.validate().is_err());
        let no_assistant = ChatTranscript {
            messages: vec![ChatMessage::new(Role::User, "a")],
        };
        no_assistant.validate().unwrap();
        assert!(no_assistant.validate_training().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn sft_round_trip(
                subject in "[a-zA-Z0-9 ]{0,30}",
                body in "[a-zA-Z0-9 .,!?]{1,200}",
                explanation in "[a-zA-Z][a-zA-Z0-9 .,]{0,200}",
                phishing in any::<bool>(),
            ) {
                let label = if phishing { Label::Phishing } else { Label::Safe };
                let t = detect();
                let ex = AugmentedExample::new(&email(&subject, &body, label), &explanation, "t");
                let tr = render_sft_example(&ex, &t).unwrap();
                let parsed = extract_verdict(tr.assistant().unwrap(), &t.delimiter, &t.vocabulary);
                prop_assert_eq!(parsed.verdict, Verdict::from_label(label));
                prop_assert_eq!(parsed.mode, ParseMode::Delimited);
            }
        }
    }
}
