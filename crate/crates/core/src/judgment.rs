//! Verdict extraction and length-normalized confidence.
//!
//! A completion is expected to contain free-form reasoning followed by a
//! delimited verdict such as `###Phishing###`. [`extract_verdict`] is total:
//! it always yields Phishing, Safe or Unparseable.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;

#[derive(Debug, Error, PartialEq)]
pub enum JudgmentError {
    #[error("cannot compute a confidence from an empty token sequence")]
    EmptySequence,
    #[error("invalid token logprob {0}")]
    InvalidLogprob(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Phishing,
    Safe,
    Unparseable,
}

impl Verdict {
    pub fn from_label(label: Label) -> Self {
        match label {
            Label::Phishing => Verdict::Phishing,
            Label::Safe => Verdict::Safe,
        }
    }

    /// The label this verdict asserts, if any.
    pub fn label(self) -> Option<Label> {
        match self {
            Verdict::Phishing => Some(Label::Phishing),
            Verdict::Safe => Some(Label::Safe),
            Verdict::Unparseable => None,
        }
    }

    pub fn is_parseable(self) -> bool {
        self != Verdict::Unparseable
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Phishing => "Phishing",
            Verdict::Safe => "Safe",
            Verdict::Unparseable => "Unparseable",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    Delimited,
    KeywordFallback,
    Failed,
}

/// Result of parsing one completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedVerdict {
    pub verdict: Verdict,
    pub mode: ParseMode,
    /// Byte range of the deciding match within the completion text.
    pub answer_span: Option<(usize, usize)>,
    pub explanation: String,
}

/// Length in bytes of a case-insensitive match of `word` at the start of `text`.
fn match_word_ci(text: &str, word: &str) -> Option<usize> {
    let mut text_chars = text.char_indices();
    for w in word.chars() {
        let (_, t) = text_chars.next()?;
        if !t.to_lowercase().eq(w.to_lowercase()) {
            return None;
        }
    }
    Some(text_chars.next().map_or(text.len(), |(i, _)| i))
}

/// Spans of standalone, case-insensitive occurrences of `word`: the
/// neighbouring characters must not be alphanumeric, so "unsafe" does not
/// contain "safe".
fn standalone_matches<'a>(
    text: &'a str,
    word: &'a str,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    text.char_indices().filter_map(move |(start, _)| {
        let len = match_word_ci(&text[start..], word)?;
        let end = start + len;
        let before_ok = text[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = text[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        (before_ok && after_ok).then_some((start, end))
    })
}

pub fn contains_standalone_word(text: &str, word: &str) -> bool {
    !word.is_empty() && standalone_matches(text, word).next().is_some()
}

/// Last `<delim><word><delim>` match in `text` as (start, end, verdict).
fn last_delimited(
    text: &str,
    delimiter: &str,
    vocabulary: &(String, String),
) -> Option<(usize, usize, Verdict)> {
    if delimiter.is_empty() {
        return None;
    }
    let mut best = None;
    let mut from = 0;
    while let Some(offset) = text[from..].find(delimiter) {
        let start = from + offset;
        let inner = start + delimiter.len();
        for (word, verdict) in [
            (&vocabulary.0, Verdict::Phishing),
            (&vocabulary.1, Verdict::Safe),
        ] {
            if let Some(len) = match_word_ci(&text[inner..], word) {
                if text[inner + len..].starts_with(delimiter) {
                    best = Some((start, inner + len + delimiter.len(), verdict));
                }
            }
        }
        // advance one char so overlapping delimiters are all visited
        from = start + text[start..].chars().next().map_or(1, char::len_utf8);
    }
    best
}

/// Parses a completion into a verdict.
///
/// The last delimited verdict wins. Without one, the last standalone
/// verdict word decides. Otherwise the result is Unparseable.
pub fn extract_verdict(text: &str, delimiter: &str, vocabulary: &(String, String)) -> ParsedVerdict {
    if let Some((start, end, verdict)) = last_delimited(text, delimiter, vocabulary) {
        return ParsedVerdict {
            verdict,
            mode: ParseMode::Delimited,
            answer_span: Some((start, end)),
            explanation: text[..start].trim().to_string(),
        };
    }

    let last = |word: &str| standalone_matches(text, word).last();
    let fallback = match (last(&vocabulary.0), last(&vocabulary.1)) {
        (Some(p), Some(s)) if p.0 > s.0 => Some((p, Verdict::Phishing)),
        (Some(_), Some(s)) => Some((s, Verdict::Safe)),
        (Some(p), None) => Some((p, Verdict::Phishing)),
        (None, Some(s)) => Some((s, Verdict::Safe)),
        (None, None) => None,
    };
    match fallback {
        Some((span, verdict)) => ParsedVerdict {
            verdict,
            mode: ParseMode::KeywordFallback,
            answer_span: Some(span),
            explanation: text.trim().to_string(),
        },
        None => ParsedVerdict {
            verdict: Verdict::Unparseable,
            mode: ParseMode::Failed,
            answer_span: None,
            explanation: text.trim().to_string(),
        },
    }
}

/// Sum in a fixed pairwise tree. Every addition is monotone, so the result
/// is monotone in each input.
fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Length-normalized confidence: the geometric mean of token probabilities,
/// `(prod exp(lp_i))^(1/N)`, evaluated as `exp(mean(lp))`.
///
/// Logprobs are summed in sorted order, which makes the result exactly
/// invariant under permutation. The value is clamped to
/// `[f64::MIN_POSITIVE, 1]`.
pub fn ln_confidence(token_logprobs: &[f64]) -> Result<f64, JudgmentError> {
    if token_logprobs.is_empty() {
        return Err(JudgmentError::EmptySequence);
    }
    if let Some(&bad) = token_logprobs.iter().find(|lp| !lp.is_finite()) {
        return Err(JudgmentError::InvalidLogprob(bad));
    }
    let mut sorted = token_logprobs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = pairwise_sum(&sorted) / sorted.len() as f64;
    Ok(mean.exp().clamp(f64::MIN_POSITIVE, 1.0))
}

/// Which generated tokens feed the confidence score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceScope {
    /// Every generated token.
    #[default]
    FullSequence,
    /// Only tokens overlapping the parsed answer span.
    AnswerSpan,
}

/// Logprobs of the tokens whose text overlaps `span`, locating tokens by
/// their cumulative byte offsets.
pub fn span_logprobs(tokens: &[(String, f64)], span: (usize, usize)) -> Vec<f64> {
    let mut offset = 0;
    let mut out = Vec::new();
    for (token, lp) in tokens {
        let end = offset + token.len();
        if end > span.0 && offset < span.1 {
            out.push(*lp);
        }
        offset = end;
    }
    out
}

/// Structured verdict for one email from one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub email_id: String,
    #[serde(rename = "model")]
    pub source_model: String,
    pub verdict: Verdict,
    pub parse_mode: ParseMode,
    pub ln_confidence: Option<f64>,
    pub explanation: String,
    #[serde(skip)]
    pub answer_span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Judgment {
    /// Builds a judgment from raw completion text and its token logprobs.
    ///
    /// An empty token list means the server did not report logprobs and
    /// leaves the confidence absent.
    pub fn from_completion(
        email_id: &str,
        source_model: &str,
        text: &str,
        tokens: &[(String, f64)],
        delimiter: &str,
        vocabulary: &(String, String),
        scope: ConfidenceScope,
    ) -> Self {
        let parsed = extract_verdict(text, delimiter, vocabulary);
        let scored: Vec<f64> = match (scope, parsed.answer_span) {
            (ConfidenceScope::AnswerSpan, Some(span)) => {
                let selected = span_logprobs(tokens, span);
                if selected.is_empty() {
                    tokens.iter().map(|t| t.1).collect()
                } else {
                    selected
                }
            }
            _ => tokens.iter().map(|t| t.1).collect(),
        };
        Self {
            email_id: email_id.to_string(),
            source_model: source_model.to_string(),
            verdict: parsed.verdict,
            parse_mode: parsed.mode,
            ln_confidence: ln_confidence(&scored).ok(),
            explanation: parsed.explanation,
            answer_span: parsed.answer_span,
            error: None,
        }
    }

    /// A failed judgment carrying the error that prevented a completion.
    pub fn failed(email_id: &str, source_model: &str, error: impl fmt::Display) -> Self {
        Self {
            email_id: email_id.to_string(),
            source_model: source_model.to_string(),
            verdict: Verdict::Unparseable,
            parse_mode: ParseMode::Failed,
            ln_confidence: None,
            explanation: String::new(),
            answer_span: None,
            error: Some(error.to_string()),
        }
    }
}

#[cfg(feature = "runtime")]
pub use runtime::{judge, judge_batch};

#[cfg(feature = "runtime")]
mod runtime {
    use super::*;
    use crate::corpus::EmailRecord;
    use crate::llm_client::{ClientError, CompletionResult, LlmClient, ModelEndpoint};
    use crate::prompting::{render_detection_prompt, PromptTemplate};

    fn to_judgment(
        email: &EmailRecord,
        endpoint: &ModelEndpoint,
        template: &PromptTemplate,
        scope: ConfidenceScope,
        result: Result<CompletionResult, ClientError>,
    ) -> Judgment {
        match result {
            Ok(c) => Judgment::from_completion(
                &email.id,
                &endpoint.fingerprint(),
                &c.text,
                &c.token_pairs(),
                &template.delimiter,
                &template.vocabulary,
                scope,
            ),
            Err(e) => Judgment::failed(&email.id, &endpoint.fingerprint(), e),
        }
    }

    /// Renders, completes and parses one email. Client errors become a
    /// failed judgment rather than an error.
    pub async fn judge(
        client: &LlmClient,
        email: &EmailRecord,
        endpoint: &ModelEndpoint,
        template: &PromptTemplate,
        scope: ConfidenceScope,
    ) -> Judgment {
        let transcript = match render_detection_prompt(email, template) {
            Ok(t) => t,
            Err(e) => return Judgment::failed(&email.id, &endpoint.fingerprint(), e),
        };
        let result = client.complete(endpoint, &transcript).await;
        to_judgment(email, endpoint, template, scope, result)
    }

    /// Judges every email with at most `parallelism` requests in flight;
    /// output order follows input order.
    pub async fn judge_batch(
        client: &LlmClient,
        emails: &[EmailRecord],
        endpoint: &ModelEndpoint,
        template: &PromptTemplate,
        scope: ConfidenceScope,
        parallelism: usize,
    ) -> Vec<Judgment> {
        let mut rendered = Vec::with_capacity(emails.len());
        let mut render_errors = Vec::new();
        for email in emails {
            match render_detection_prompt(email, template) {
                Ok(t) => rendered.push(t),
                Err(e) => {
                    render_errors.push((rendered.len() + render_errors.len(), e));
                }
            }
        }
        let mut completions = client
            .complete_batch(endpoint, &rendered, parallelism)
            .await
            .into_iter();
        let mut errors = render_errors.into_iter().peekable();
        emails
            .iter()
            .enumerate()
            .map(|(i, email)| match errors.next_if(|(at, _)| *at == i) {
                Some((_, e)) => Judgment::failed(&email.id, &endpoint.fingerprint(), e),
                None => {
                    let result = completions.next().expect("one completion per rendered prompt");
                    to_judgment(email, endpoint, template, scope, result)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> (String, String) {
        ("Phishing".into(), "Safe".into())
    }

    fn parse(text: &str) -> ParsedVerdict {
        extract_verdict(text, "###", &vocab())
    }

    #[test]
    fn well_formed_delimited() {
        let text = "The urgency and spoofed link indicate fraud. ###Phishing###";
        let p = parse(text);
        assert_eq!(p.verdict, Verdict::Phishing);
        assert_eq!(p.mode, ParseMode::Delimited);
        let (s, e) = p.answer_span.unwrap();
        assert_eq!(&text[s..e], "###Phishing###");
        assert_eq!(p.explanation, "The urgency and spoofed link indicate fraud.");
    }

    #[test]
    fn last_delimited_match_wins() {
        assert_eq!(parse("This looks ###Safe### but wait ###Phishing###").verdict, Verdict::Phishing);
        assert_eq!(parse("###Phishing### no, actually ###safe###").verdict, Verdict::Safe);
    }

    #[test]
    fn keyword_fallback() {
        let p = parse("I believe this message is safe to open.");
        assert_eq!((p.verdict, p.mode), (Verdict::Safe, ParseMode::KeywordFallback));
        let p = parse("Definitely PHISHING!");
        assert_eq!((p.verdict, p.mode), (Verdict::Phishing, ParseMode::KeywordFallback));
    }

    #[test]
    fn unsafe_is_not_safe() {
        let p = parse("This link is unsafe.");
        assert_eq!((p.verdict, p.mode), (Verdict::Unparseable, ParseMode::Failed));
    }

    #[test]
    fn unparseable() {
        let p = parse("Cannot determine.");
        assert_eq!((p.verdict, p.mode, p.answer_span), (Verdict::Unparseable, ParseMode::Failed, None));
        assert_eq!(parse("").verdict, Verdict::Unparseable);
    }

    #[test]
    fn non_ascii_text_is_handled() {
        let p = parse("Énorme urgence … 💰 ###Phishing### ✓");
        assert_eq!(p.verdict, Verdict::Phishing);
        assert_eq!(p.explanation, "Énorme urgence … 💰");
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(ln_confidence(&[0.0]).unwrap(), 1.0);
        let half = 0.5f64.ln();
        for n in 1..=50 {
            let v = ln_confidence(&vec![half; n]).unwrap();
            assert!((v - 0.5).abs() <= 1e-15, "n={n} v={v}");
        }
        // cube root of the product of the three token probabilities
        let oracle = ((-0.1f64).exp() * (-0.5f64).exp() * (-0.9f64).exp()).cbrt();
        let v = ln_confidence(&[-0.1, -0.5, -0.9]).unwrap();
        assert!((v - oracle).abs() / oracle <= 1e-12);
        assert!((v - 0.6065306597).abs() < 1e-10);
    }

    #[test]
    fn confidence_errors() {
        assert_eq!(ln_confidence(&[]), Err(JudgmentError::EmptySequence));
        assert!(matches!(ln_confidence(&[f64::NAN]), Err(JudgmentError::InvalidLogprob(_))));
        assert!(matches!(
            ln_confidence(&[f64::NEG_INFINITY]),
            Err(JudgmentError::InvalidLogprob(_))
        ));
    }

    #[test]
    fn answer_span_scope() {
        let tokens: Vec<(String, f64)> = vec![
            ("Looks".into(), -2.0),
            (" fine".into(), -2.0),
            (" ###".into(), -0.1),
            ("Safe".into(), -0.1),
            ("###".into(), -0.1),
        ];
        let text: String = tokens.iter().map(|t| t.0.as_str()).collect();
        let full = Judgment::from_completion("e", "m", &text, &tokens, "###", &vocab(), ConfidenceScope::FullSequence);
        let span = Judgment::from_completion("e", "m", &text, &tokens, "###", &vocab(), ConfidenceScope::AnswerSpan);
        assert_eq!(full.verdict, Verdict::Safe);
        assert!((span.ln_confidence.unwrap() - (-0.1f64).exp()).abs() < 1e-12);
        assert!(full.ln_confidence.unwrap() < span.ln_confidence.unwrap());
    }

    #[test]
    fn missing_logprobs_leave_confidence_absent() {
        let j = Judgment::from_completion("e", "m", "ok ###Safe###", &[], "###", &vocab(), ConfidenceScope::FullSequence);
        assert_eq!(j.verdict, Verdict::Safe);
        assert_eq!(j.ln_confidence, None);
    }

    #[test]
    fn judgment_jsonl_fields() {
        let j = Judgment::from_completion("d:1", "m@abc", "why ###Phishing###", &[("x".into(), -0.2)], "###", &vocab(), ConfidenceScope::FullSequence);
        let v: serde_json::Value = serde_json::to_value(&j).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["email_id", "explanation", "ln_confidence", "model", "parse_mode", "verdict"]);
        assert_eq!(v["verdict"], "phishing");
        assert_eq!(v["parse_mode"], "delimited");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn parser_is_total(text in ".{0,300}") {
                let p = parse(&text);
                let consistent = match p.mode {
                    ParseMode::Delimited | ParseMode::KeywordFallback => p.verdict.is_parseable() && p.answer_span.is_some(),
                    ParseMode::Failed => p.verdict == Verdict::Unparseable,
                };
                prop_assert!(consistent);
            }

            #[test]
            fn delimited_span_text_matches(prefix in "[a-z .]{0,40}", word in prop::sample::select(vec!["Phishing", "safe", "SAFE"]), suffix in "[a-z .]{0,40}") {
                let text = format!("{prefix}###{word}###{suffix}");
                let p = parse(&text);
                prop_assert_eq!(p.mode, ParseMode::Delimited);
                let (s, e) = p.answer_span.unwrap();
                let expected = format!("###{word}###");
                prop_assert!(text[s..e].eq_ignore_ascii_case(&expected));
            }

            #[test]
            fn confidence_bounds_and_monotonicity(
                lps in prop::collection::vec(-30.0f64..=0.0, 1..200),
                bumps in prop::collection::vec(0.0f64..5.0, 200),
            ) {
                let c = ln_confidence(&lps).unwrap();
                prop_assert!(c > 0.0 && c <= 1.0);
                let raised: Vec<f64> = lps.iter().zip(&bumps).map(|(l, b)| (l + b).min(0.0)).collect();
                prop_assert!(ln_confidence(&raised).unwrap() >= c);
            }

            #[test]
            fn confidence_permutation_invariant(mut lps in prop::collection::vec(-30.0f64..=0.0, 1..200), seed in any::<u64>()) {
                use rand::{seq::SliceRandom, SeedableRng};
                let c = ln_confidence(&lps).unwrap();
                lps.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(ln_confidence(&lps).unwrap(), c);
            }
        }
    }
}
