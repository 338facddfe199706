//! Command-line pipeline over `renalseq-core`: configuration, stage runners
//! with hash-chained manifests, and SVG reports.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;
pub mod svg;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use manifest::{Stage, StageManifest};
pub use stages::Pipeline;
