//! Building blocks for turning timestamped interaction logs into
//! in-context-learning recommendation corpora, scoring them through
//! pluggable backends, and measuring how accuracy holds up as user
//! interests drift.
//!
//! The pipeline runs bottom-up:
//!
//! - [`ingest`] parses logs, binarizes ratings and applies the k-core filter.
//! - [`temporal`] slices the catalog into chronological periods and splits.
//! - [`prompt`] builds per-user sample sequences and renders prompts.
//! - [`icl`] prepends recent labeled samples as few-shot examples.
//! - [`scorer`] scores instances (remote endpoint, mocks, a toy logistic model).
//! - [`metrics`] computes AUC and the drift metrics derived from it.
//! - [`driftsim`] generates synthetic streams with controllable drift.
//! - [`experiment`] wires the above into the drift protocols used by the CLI.

pub mod cli;
pub mod digest;
pub mod driftsim;
pub mod error;
pub mod experiment;
pub mod icl;
pub mod ingest;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod prompt;
pub mod scorer;
pub mod temporal;

pub use error::{Error, Result};
