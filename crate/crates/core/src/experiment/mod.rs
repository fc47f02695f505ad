//! Configuration-driven experiment pipeline with resumable stages.

mod config;
mod pipeline;
mod system;

pub use config::{validate, CorpusSource, Diagnostic, ExperimentConfig, OUTPUT_ROOT_ENV};
pub use pipeline::{
    corrupted_outputs, latent_spec, parse_gazetteer, translate_parallel, CurveSummary, Pipeline,
    Stage, StageOutcome, MANIFEST_FORMAT,
};
pub use system::{KeyLayout, ModelKey, SystemSpec};
