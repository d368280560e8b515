//! Run manifests: written before any computation, completed afterwards.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use coin_core::experiment::ExperimentConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Resolved config snapshot; `--config` on this file reruns the command exactly.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    /// Create `dir`, then write the manifest and config snapshot.
    pub fn begin(
        command: &str,
        config_path: Option<&Path>,
        config: &ExperimentConfig,
        dir: &Path,
    ) -> coin_core::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let m = Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config_path: config_path.map(Path::to_path_buf),
            config: config.clone(),
            seeds: config.seeds.clone(),
            output_dir: dir.to_path_buf(),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
        };
        std::fs::write(dir.join(CONFIG_FILE), config.to_toml_string()?)?;
        m.write()?;
        Ok(m)
    }

    pub fn finish(&mut self, status: &str) -> coin_core::Result<()> {
        self.finished_unix = Some(now());
        self.status = status.to_string();
        self.write()
    }

    fn write(&self) -> coin_core::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(self.output_dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> coin_core::Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}
