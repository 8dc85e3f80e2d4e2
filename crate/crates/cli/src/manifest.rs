use kpz_core::ExperimentConfig;
use serde::Serialize;
use std::path::PathBuf;

/// What a run was, so that it can be repeated.
///
/// Outputs depend only on `config`, the subcommand arguments and the worker
/// count; the timestamp is informational.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub experiment: String,
    pub arguments: Vec<String>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub outputs: Vec<PathBuf>,
    pub timestamp: String,
    pub version: String,
}

impl RunManifest {
    pub fn new(experiment: &str, arguments: Vec<String>, config: ExperimentConfig, config_hash: String) -> Self {
        Self {
            experiment: experiment.to_string(),
            arguments,
            config,
            config_hash,
            outputs: vec![],
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}
