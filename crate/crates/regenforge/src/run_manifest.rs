//! Provenance record written by every pipeline command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io;

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub config_digest: String,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
    /// Set when the previous run at this location had the same command,
    /// configuration and inputs.
    pub reproduction: bool,
}

pub struct RunRecorder {
    command: String,
    args: Vec<String>,
    seed: u64,
    config_digest: String,
    inputs: BTreeMap<String, String>,
    started_at: String,
}

impl RunRecorder {
    pub fn start(command: &str, args: Vec<String>, seed: u64) -> Self {
        RunRecorder {
            command: command.into(),
            args,
            seed,
            config_digest: io::sha256_bytes(format!("seed={seed}").as_bytes()),
            inputs: BTreeMap::new(),
            started_at: now(),
        }
    }

    /// Digest of the effective configuration. The seed is always mixed in.
    pub fn config<T: Serialize>(&mut self, config: &T) {
        let text = serde_json::to_string(config).expect("config serialises");
        self.config_digest = io::sha256_bytes(format!("seed={}\n{text}", self.seed).as_bytes());
    }

    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        let digest = io::sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn input_files<'a>(&mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
        for p in paths {
            self.input_file(p)?;
        }
        Ok(())
    }

    /// Writes the manifest to `target` and returns it.
    pub fn finish(self, target: &Path, outputs: Vec<String>) -> Result<RunManifest> {
        let previous: Option<RunManifest> = if target.exists() {
            io::read_json(target).ok()
        } else {
            None
        };
        let reproduction = previous.is_some_and(|p| {
            p.command == self.command && p.config_digest == self.config_digest && p.inputs == self.inputs
        });
        if reproduction {
            log::info!("{}: inputs and configuration match the previous run", self.command);
        }
        let manifest = RunManifest {
            command: self.command,
            args: self.args,
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed,
            config_digest: self.config_digest,
            inputs: self.inputs,
            outputs,
            started_at: self.started_at,
            finished_at: now(),
            reproduction,
        };
        io::write_json(target, &manifest)?;
        Ok(manifest)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// `<dir>/run_manifest.json` for directory outputs, `<file>.run_manifest.json`
/// for file outputs.
pub fn location_for(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join("run_manifest.json")
    } else {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run_manifest.json");
        output.with_file_name(name)
    }
}
