//! Confusion-matrix scoring with phishing as the positive class.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Label};
use crate::ensemble::EnsembleDecision;
use crate::judgment::{Judgment, Verdict};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("no prediction for {} email(s), first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    MissingPredictions(Vec<String>),
    #[error("more than one prediction for {} email(s), first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    DuplicatePredictions(Vec<String>),
    #[error("predictions for ids not in the dataset: {0:?}")]
    UnknownIds(Vec<String>),
}

/// One predicted verdict for one email.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub email_id: String,
    pub verdict: Verdict,
}

impl From<&Judgment> for Prediction {
    fn from(j: &Judgment) -> Self {
        Self {
            email_id: j.email_id.clone(),
            verdict: j.verdict,
        }
    }
}

impl From<&EnsembleDecision> for Prediction {
    fn from(d: &EnsembleDecision) -> Self {
        Self {
            email_id: d.email_id.clone(),
            verdict: d.verdict,
        }
    }
}

/// How Unparseable predictions enter the confusion matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparseablePolicy {
    /// Counted as wrong for whichever class the email truly has.
    #[default]
    ScoreAsError,
    /// Left out of the matrix entirely (still tallied).
    Exclude,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Adds one outcome. `None` prediction means Unparseable scored as error.
    pub fn record(&mut self, truth: Label, predicted: Option<Label>) {
        let predicted = predicted.unwrap_or(truth.flipped());
        match (truth, predicted) {
            (Label::Phishing, Label::Phishing) => self.tp += 1,
            (Label::Phishing, Label::Safe) => self.fn_ += 1,
            (Label::Safe, Label::Phishing) => self.fp += 1,
            (Label::Safe, Label::Safe) => self.tn += 1,
        }
    }

    /// The matrix with safe treated as the positive class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; undefined when either is
    /// undefined or both are zero.
    pub fn f1(&self) -> Option<f64> {
        f1_from(self.precision()?, self.recall()?)
    }
}

pub fn f1_from(precision: f64, recall: f64) -> Option<f64> {
    let den = precision + recall;
    (den > 0.0).then(|| 2.0 * precision * recall / den)
}

/// Metrics for one model × dataset cell. `None` is the undefined marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub counts: ConfusionMatrix,
    pub unparseable_count: u64,
    pub policy: UnparseablePolicy,
}

impl MetricsReport {
    pub fn from_counts(
        model: &str,
        dataset: &str,
        counts: ConfusionMatrix,
        unparseable_count: u64,
        policy: UnparseablePolicy,
    ) -> Self {
        Self {
            model: model.to_string(),
            dataset: dataset.to_string(),
            accuracy: counts.accuracy(),
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
            unparseable_count,
            policy,
        }
    }

    pub const CSV_HEADER: &'static str =
        "model,dataset,accuracy,precision,recall,f1,tp,fp,tn,fn,unparseable";

    pub fn csv_row(&self) -> String {
        let m = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&self.model),
            csv_field(&self.dataset),
            m(self.accuracy),
            m(self.precision),
            m(self.recall),
            m(self.f1),
            self.counts.tp,
            self.counts.fp,
            self.counts.tn,
            self.counts.fn_,
            self.unparseable_count
        )
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Scores predictions against a dataset's ground truth.
///
/// Every dataset email needs exactly one prediction.
pub fn score(
    predictions: &[Prediction],
    dataset: &Dataset,
    model: &str,
    policy: UnparseablePolicy,
) -> Result<MetricsReport, ScoreError> {
    let truth: HashMap<&str, Label> = dataset.records.iter().map(|r| (r.id.as_str(), r.label)).collect();

    let mut seen = HashSet::with_capacity(predictions.len());
    let mut duplicates = Vec::new();
    let mut unknown = Vec::new();
    for p in predictions {
        if !truth.contains_key(p.email_id.as_str()) {
            unknown.push(p.email_id.clone());
        } else if !seen.insert(p.email_id.as_str()) {
            duplicates.push(p.email_id.clone());
        }
    }
    if !unknown.is_empty() {
        return Err(ScoreError::UnknownIds(unknown));
    }
    if !duplicates.is_empty() {
        return Err(ScoreError::DuplicatePredictions(duplicates));
    }
    let missing: Vec<String> = dataset
        .records
        .iter()
        .filter(|r| !seen.contains(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ScoreError::MissingPredictions(missing));
    }

    let mut counts = ConfusionMatrix::default();
    let mut unparseable = 0;
    for p in predictions {
        let label = truth[p.email_id.as_str()];
        match p.verdict.label() {
            Some(predicted) => counts.record(label, Some(predicted)),
            None => {
                unparseable += 1;
                if policy == UnparseablePolicy::ScoreAsError {
                    counts.record(label, None);
                }
            }
        }
    }
    Ok(MetricsReport::from_counts(model, &dataset.name, counts, unparseable, policy))
}
