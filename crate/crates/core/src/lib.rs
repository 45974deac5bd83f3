//! Fairness auditing for LLM-based recommenders.
//!
//! The pipeline renders a prompt matrix ([`prompt`]), collects top-K lists
//! from providers or a replay store ([`gateway`]), parses them into ranked
//! lists ([`parse`]), scores neutral-vs-variant similarity and group
//! disparity ([`metrics`]) and renders the results ([`report`]). The
//! [`pipeline`] module wires the stages together over files.

pub mod domain;
pub mod parse;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod synthetic;
pub mod gateway;
pub mod metrics;
