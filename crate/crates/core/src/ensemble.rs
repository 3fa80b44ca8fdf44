//! Multi-model fusion: majority vote and LN-confidence argmax.
//!
//! Ties never depend on input order. They are resolved by a configured
//! model priority; models missing from the priority list rank after the
//! listed ones, ordered by fingerprint.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judgment::{Judgment, Verdict};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("judgments reference different emails: {0:?} and {1:?}")]
    MixedEmailIds(String, String),
    #[error("an ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("model {0:?} appears more than once")]
    DuplicateMember(String),
    #[error("no parseable member reports a confidence")]
    NoConfidenceAvailable,
    #[error("no member produced a parseable verdict")]
    NoParseableMembers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Majority,
    Confidence,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Majority => "majority",
            Method::Confidence => "confidence",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "majority" => Ok(Method::Majority),
            "confidence" => Ok(Method::Confidence),
            other => Err(format!("unknown ensemble method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberVerdict {
    pub model: String,
    pub verdict: Verdict,
    pub ln_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub email_id: String,
    pub method: Method,
    /// Always Phishing or Safe.
    pub verdict: Verdict,
    pub member_verdicts: Vec<MemberVerdict>,
    pub tie_broken: bool,
    pub winning_member: Option<String>,
}

/// Fusion rules bound to a model priority order (configuration order).
#[derive(Debug, Clone, Default)]
pub struct Ensemble {
    priority: Vec<String>,
}

impl Ensemble {
    pub fn new(priority: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            priority: priority.into_iter().map(Into::into).collect(),
        }
    }

    pub fn priority(&self) -> &[String] {
        &self.priority
    }

    fn rank_key<'a>(&self, model: &'a str) -> (usize, &'a str) {
        let rank = self
            .priority
            .iter()
            .position(|p| p == model)
            .unwrap_or(self.priority.len());
        (rank, model)
    }

    /// Highest-priority judgment among `candidates`.
    fn first_by_priority<'a>(&self, candidates: &[&'a Judgment]) -> Option<&'a Judgment> {
        candidates
            .iter()
            .copied()
            .min_by(|a, b| self.rank_key(&a.source_model).cmp(&self.rank_key(&b.source_model)))
    }

    fn check_members<'a>(&self, judgments: &'a [Judgment]) -> Result<&'a str, EnsembleError> {
        if judgments.len() < 2 {
            return Err(EnsembleError::TooFewMembers(judgments.len()));
        }
        let email_id = judgments[0].email_id.as_str();
        let mut seen = HashSet::new();
        for j in judgments {
            if j.email_id != email_id {
                return Err(EnsembleError::MixedEmailIds(email_id.into(), j.email_id.clone()));
            }
            if !seen.insert(j.source_model.as_str()) {
                return Err(EnsembleError::DuplicateMember(j.source_model.clone()));
            }
        }
        Ok(email_id)
    }

    /// Members listed in priority order, so decisions serialize identically
    /// however the input was ordered.
    fn members(&self, judgments: &[Judgment]) -> Vec<MemberVerdict> {
        let mut members: Vec<&Judgment> = judgments.iter().collect();
        members.sort_by(|a, b| self.rank_key(&a.source_model).cmp(&self.rank_key(&b.source_model)));
        members
            .into_iter()
            .map(|j| MemberVerdict {
                model: j.source_model.clone(),
                verdict: j.verdict,
                ln_confidence: j.ln_confidence,
            })
            .collect()
    }

    /// Argmax of LN confidence among parseable members that report one.
    /// Exact ties go to the higher-priority member.
    pub fn confidence_select(&self, judgments: &[Judgment]) -> Result<EnsembleDecision, EnsembleError> {
        let email_id = self.check_members(judgments)?;
        let (winner, tie_broken) = self.argmax_confidence(judgments)?;
        Ok(EnsembleDecision {
            email_id: email_id.to_string(),
            method: Method::Confidence,
            verdict: winner.verdict,
            member_verdicts: self.members(judgments),
            tie_broken,
            winning_member: Some(winner.source_model.clone()),
        })
    }

    fn argmax_confidence<'a>(&self, judgments: &'a [Judgment]) -> Result<(&'a Judgment, bool), EnsembleError> {
        let scored: Vec<(&Judgment, f64)> = judgments
            .iter()
            .filter(|j| j.verdict.is_parseable())
            .filter_map(|j| j.ln_confidence.map(|c| (j, c)))
            .collect();
        let best = scored
            .iter()
            .map(|(_, c)| *c)
            .max_by(f64::total_cmp)
            .ok_or(EnsembleError::NoConfidenceAvailable)?;
        let top: Vec<&Judgment> = scored
            .iter()
            .filter(|(_, c)| c.total_cmp(&best) == Ordering::Equal)
            .map(|(j, _)| *j)
            .collect();
        let winner = self.first_by_priority(&top).expect("at least one top member");
        Ok((winner, top.len() > 1))
    }

    /// Strict majority of parseable verdicts. Unparseable members are left
    /// out of the tally; a tied tally falls back to the confidence argmax,
    /// then to model priority.
    pub fn majority_vote(&self, judgments: &[Judgment]) -> Result<EnsembleDecision, EnsembleError> {
        let email_id = self.check_members(judgments)?;
        let parseable: Vec<&Judgment> = judgments.iter().filter(|j| j.verdict.is_parseable()).collect();
        if parseable.is_empty() {
            return Err(EnsembleError::NoParseableMembers);
        }
        let phishing = parseable.iter().filter(|j| j.verdict == Verdict::Phishing).count();
        let safe = parseable.len() - phishing;

        let (verdict, tie_broken, winning_member) = match phishing.cmp(&safe) {
            Ordering::Greater => (Verdict::Phishing, false, None),
            Ordering::Less => (Verdict::Safe, false, None),
            Ordering::Equal => {
                let winner = match self.argmax_confidence(judgments) {
                    Ok((w, _)) => w,
                    Err(_) => self.first_by_priority(&parseable).expect("parseable is non-empty"),
                };
                (winner.verdict, true, Some(winner.source_model.clone()))
            }
        };
        Ok(EnsembleDecision {
            email_id: email_id.to_string(),
            method: Method::Majority,
            verdict,
            member_verdicts: self.members(judgments),
            tie_broken,
            winning_member,
        })
    }

    pub fn decide(&self, method: Method, judgments: &[Judgment]) -> Result<EnsembleDecision, EnsembleError> {
        match method {
            Method::Majority => self.majority_vote(judgments),
            Method::Confidence => self.confidence_select(judgments),
        }
    }
}
