//! Browser bindings. Every export takes plain strings or numbers and returns
//! a JSON document; failures come back as `{"error": "..."}`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use phishbench::ensemble::{Ensemble, Method};
use phishbench::judgment::{extract_verdict, ConfidenceScope, Judgment};
use phishbench::lora;
use phishbench::prompting::PromptTemplate;

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

fn detection_template() -> PromptTemplate {
    PromptTemplate::builtin("detect-v1").expect("bundled template")
}

/// Parses one completion. Empty delimiter or vocabulary words fall back to
/// the bundled detection template.
#[wasm_bindgen]
pub fn parse_verdict(text: &str, delimiter: &str, positive: &str, negative: &str) -> String {
    let t = detection_template();
    let pick = |s: &str, default: &str| if s.trim().is_empty() { default.to_string() } else { s.trim().to_string() };
    let delimiter = pick(delimiter, &t.delimiter);
    let vocabulary = (pick(positive, &t.vocabulary.0), pick(negative, &t.vocabulary.1));
    if vocabulary.0.eq_ignore_ascii_case(&vocabulary.1) {
        return error("the two verdict words must differ");
    }
    let p = extract_verdict(text, &delimiter, &vocabulary);
    json!({
        "verdict": p.verdict,
        "mode": p.mode,
        "answer_span": p.answer_span,
        "answer": p.answer_span.map(|(a, b)| &text[a..b]),
        "explanation": p.explanation,
    })
    .to_string()
}

#[derive(Deserialize)]
struct MemberInput {
    model: String,
    text: String,
    #[serde(default)]
    logprobs: Vec<f64>,
}

#[derive(Serialize)]
struct MemberOutput<'a> {
    model: &'a str,
    verdict: phishbench::judgment::Verdict,
    mode: phishbench::judgment::ParseMode,
    ln_confidence: Option<f64>,
}

/// Scores each member completion and fuses them with both ensemble methods.
/// Input: `[{"model": "...", "text": "...", "logprobs": [..]}, ...]` in
/// priority order.
#[wasm_bindgen]
pub fn fuse(members_json: &str) -> String {
    let members: Vec<MemberInput> = match serde_json::from_str(members_json) {
        Ok(m) => m,
        Err(e) => return error(format!("bad member list: {e}")),
    };
    if members.is_empty() {
        return error("no members");
    }
    let t = detection_template();
    let judgments: Vec<Judgment> = members
        .iter()
        .map(|m| {
            let tokens: Vec<(String, f64)> = m.logprobs.iter().map(|lp| (String::new(), *lp)).collect();
            Judgment::from_completion("demo", &m.model, &m.text, &tokens, &t.delimiter, &t.vocabulary, ConfidenceScope::FullSequence)
        })
        .collect();
    if let Some(bad) = members.iter().flat_map(|m| &m.logprobs).find(|lp| !(lp.is_finite() && **lp <= 0.0)) {
        return error(format!("logprob {bad} is not a finite value <= 0"));
    }
    let ensemble = Ensemble::new(members.iter().map(|m| m.model.clone()));
    let decide = |method| -> Value {
        match ensemble.decide(method, &judgments) {
            Ok(d) => serde_json::to_value(d).unwrap_or(Value::Null),
            Err(e) => json!({ "error": e.to_string() }),
        }
    };
    let scored: Vec<MemberOutput> = judgments
        .iter()
        .map(|j| MemberOutput {
            model: &j.source_model,
            verdict: j.verdict,
            mode: j.parse_mode,
            ln_confidence: j.ln_confidence,
        })
        .collect();
    json!({
        "members": scored,
        "majority": decide(Method::Majority),
        "confidence": decide(Method::Confidence),
    })
    .to_string()
}

/// Runs the adapter demo on a random d×k layer.
#[wasm_bindgen]
pub fn lora_demo(d: usize, k: usize, r: usize, seed: u32, steps: usize) -> String {
    if d.max(k) > 256 || steps > 500 {
        return error("keep d, k <= 256 and steps <= 500 in the browser");
    }
    match lora::demo(d, k, r, seed as u64, steps) {
        Ok(report) => serde_json::to_string(&report).unwrap_or_else(error),
        Err(e) => error(e),
    }
}
