//! Stage orchestration for the few-shot pipeline: corpus generation,
//! ensembles, similarity mining, training, adaptation, evaluation and
//! embedding projection, each sealed by a hash-chained run manifest.

pub mod bench;
pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{MapSource, PipelineConfig};
pub use error::{CliError, Result};
pub use manifest::RunManifest;
pub use stages::StageContext;
