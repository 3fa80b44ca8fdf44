//! Synthetic corpora and scripted endpoints shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use phishbench::corpus::{Dataset, EmailRecord, Label};
use phishbench::stub::{StubReply, StubRequest};

/// Label of synthetic email `i` in the alternating corpus.
pub fn alternating_label(i: usize) -> Label {
    if i.is_multiple_of(2) {
        Label::Phishing
    } else {
        Label::Safe
    }
}

/// Writes `n` emails as CSV. Each body carries `Reference number <i>.` so a
/// script can recover the index; labels come from `label_of`.
pub fn write_corpus(path: &Path, n: usize, label_of: impl Fn(usize) -> Label) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["subject", "body", "label"]).unwrap();
    for i in 0..n {
        let label = label_of(i);
        let (subject, body) = match label {
            Label::Phishing => (
                format!("Account notice {i}"),
                format!("Reference number {i}. Your mailbox is full, confirm your password at the link below, \"today\"."),
            ),
            Label::Safe => (
                format!("Team update {i}"),
                format!("Reference number {i}. Minutes from Tuesday's meeting are attached, see you next week."),
            ),
        };
        let raw = if label.is_positive() { "1" } else { "0" };
        w.write_record([subject.as_str(), body.as_str(), raw]).unwrap();
    }
    w.flush().unwrap();
}

pub fn dataset(name: &str, n: usize, label_of: impl Fn(usize) -> Label) -> Dataset {
    let records = (0..n)
        .map(|i| {
            let label = label_of(i);
            EmailRecord::new(format!("{name}:{i}"), &format!("Subject {i}"), &format!("Reference number {i}. Body text."), label)
                .unwrap()
        })
        .collect();
    Dataset::from_records(name, records).unwrap()
}

/// Index parsed back out of `Reference number <i>.` in the prompt.
pub fn reference_number(req: &StubRequest) -> Option<usize> {
    let text = req.user_text();
    let start = text.find("Reference number ")? + "Reference number ".len();
    let digits: String = text[start..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

pub fn verdict_text(label: Label) -> String {
    match label {
        Label::Phishing => "The sender asks for a password through a link and invents urgency.\n###Phishing###".into(),
        Label::Safe => "Routine internal message with no request for credentials or money.\n###Safe###".into(),
    }
}

/// Detection endpoint that answers with the true label, except that every
/// index with `flip(i)` gets the opposite verdict.
pub fn detector(label_of: impl Fn(usize) -> Label + Send + Sync, flip: impl Fn(usize) -> bool + Send + Sync)
    -> impl Fn(&StubRequest) -> StubReply + Send + Sync {
    move |req| match reference_number(req) {
        Some(i) => {
            let label = if flip(i) { label_of(i).flipped() } else { label_of(i) };
            StubReply::text(verdict_text(label))
        }
        None => StubReply::Status(400, "no reference number".into()),
    }
}

/// Teacher that explains the label stated in the augmentation prompt. Some
/// replies restate a verdict in delimiters, one in seven contradicts it.
pub fn teacher(req: &StubRequest) -> StubReply {
    let text = req.user_text();
    let phishing = text.contains("Verified classification: Phishing");
    let i = reference_number(req).unwrap_or(0);
    let mut explanation = if phishing {
        format!("Email {i} pressures the reader to confirm a password through an unverified link.")
    } else {
        format!("Email {i} is an ordinary internal note with no requests for credentials.")
    };
    if i.is_multiple_of(3) {
        explanation.push_str(if phishing { " ###Phishing###" } else { " ###Safe###" });
    }
    if i % 7 == 6 {
        explanation.push_str(if phishing { "\n###Safe###" } else { "\n###Phishing###" });
    }
    StubReply::text(explanation)
}

/// Byte-for-byte comparison of two directory trees, ignoring nothing.
pub fn assert_same_tree(a: &Path, b: &Path) {
    let list = |root: &Path| {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in std::fs::read_dir(&dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        files.sort();
        files
    };
    let (fa, fb) = (list(a), list(b));
    assert_eq!(fa, fb, "different file sets");
    for f in fa {
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{} differs", f.display());
    }
}
