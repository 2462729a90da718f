//! Run manifests: what ran, with which resolved settings, and what it wrote.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use hybridseq::model::CHECKPOINT_VERSION;
use hybridseq::profiler::SCHEMA;
use hybridseq::training::ExperimentConfig;
use hybridseq::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Formats {
    pub manifest: u32,
    pub checkpoint: u32,
    pub bench: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Fully resolved settings; replays read these instead of the config file.
    pub config: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub artifacts: Vec<Artifact>,
    pub formats: Formats,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn digest(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn start(command: &str, argv: &[String], cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            argv: argv.to_vec(),
            config: cfg.to_text(),
            seed: cfg.seed,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            formats: Formats { manifest: MANIFEST_VERSION, checkpoint: CHECKPOINT_VERSION, bench: SCHEMA.into() },
            started_unix: now(),
            finished_unix: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Records a written file; its digest is taken when the run finishes.
    pub fn artifact(&mut self, kind: &str, path: &Path) {
        self.artifacts.push(Artifact { kind: kind.into(), path: path.display().to_string(), sha256: String::new() });
    }

    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        for a in &mut self.artifacts {
            a.sha256 = digest(Path::new(&a.path))?;
        }
        self.finished_unix = now();
        let text = serde_json::to_vec_pretty(&self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path)?;
        let m: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.formats.manifest != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.formats.manifest)).into());
        }
        Ok(m)
    }
}
