//! Scoring, the published-table audit and experiment orchestration.

pub mod audit;
#[cfg(feature = "runtime")]
pub mod experiment;
pub mod metrics;
