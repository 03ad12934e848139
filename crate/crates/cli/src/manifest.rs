use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use qdpp::config::TrainConfig;
use qdpp::envs::EnvKind;
use qdpp::learner::{Algo, RunSummary};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GREEDY_FILE: &str = "greedy.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub dir: PathBuf,
    pub metrics: String,
    pub greedy: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub steps: u64,
    pub episodes: u64,
    pub degenerate_samples: u64,
    pub zeroed_gradients: u64,
    pub skipped_updates: u64,
    pub penalty_failures: u64,
}

impl From<&RunSummary> for Totals {
    fn from(s: &RunSummary) -> Self {
        Self {
            steps: s.steps,
            episodes: s.episodes,
            degenerate_samples: s.degenerate_samples,
            zeroed_gradients: s.incidents.zeroed_gradients,
            skipped_updates: s.incidents.skipped_updates,
            penalty_failures: s.incidents.penalty_failures,
        }
    }
}

/// Written before training with `finished_at` unset, rewritten when the run ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub algorithm: Algo,
    pub env: EnvKind,
    pub seed: u64,
    pub config: TrainConfig,
    pub build: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub outputs: Outputs,
    pub totals: Option<Totals>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }

    pub fn read(dir: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

pub fn build_id() -> String {
    format!(
        "{} {} ({})",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}
