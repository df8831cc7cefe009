//! Builds the recommendation artifacts from raw inputs in stages, caching
//! each stage's outputs by the hash of its parameters and inputs.
//!
//! A data directory holds `inputs/` (raw CSV files) and `artifacts/`
//! (stage outputs plus `manifest.json`).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod load;
pub mod stages;
pub mod store;

pub use config::Config;
pub use error::{PipelineError, Result};
pub use load::LoadedArtifacts;
pub use stages::{Pipeline, Stage, StageReport};
pub use store::{ArtifactStore, Manifest, StageRecord};
