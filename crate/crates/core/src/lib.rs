//! Benchmark pipeline for LLM phishing-email detection: corpus loading,
//! prompt rendering, verdict parsing with length-normalized confidence,
//! ensembles, scoring, SFT data export and a LoRA reference layer.
//!
//! Networking (the chat-completions client, the stub server, experiment
//! runs and the CLI) sits behind the default `runtime` feature.

pub mod augment;
pub mod corpus;
pub mod ensemble;
pub mod eval;
pub mod judgment;
pub mod lora;
pub mod prompting;

#[cfg(feature = "runtime")]
pub mod cli;
#[cfg(feature = "runtime")]
pub mod llm_client;
#[cfg(feature = "runtime")]
pub mod stub;
