use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record written as `manifest.json` next to every run's artifacts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: &'static str,
    pub argv: Vec<String>,
    pub seed: u64,
    /// Every setting the run used, defaults included.
    pub config: serde_json::Value,
    /// Case digest and SHA-256 of every input file.
    pub inputs: Vec<InputDigest>,
    /// Files written by the run, relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub name: String,
    pub sha256: String,
}

/// Collects the run directory, inputs and artifacts of one invocation.
pub struct Run {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn create(root: &Path, name: &str, subcommand: &str, seed: u64) -> Result<Run> {
        let dir = root.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        Ok(Run {
            dir,
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                tool_version: env!("CARGO_PKG_VERSION"),
                argv: std::env::args().collect(),
                seed,
                config: serde_json::Value::Null,
                inputs: Vec::new(),
                artifacts: Vec::new(),
            },
        })
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn input_digest(&mut self, name: &str, sha256: String) {
        self.manifest.inputs.push(InputDigest {
            name: name.to_string(),
            sha256,
        });
    }

    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.input_digest(&path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    /// Path for an artifact, recorded in the manifest.
    pub fn artifact(&mut self, file: &str) -> PathBuf {
        self.manifest.artifacts.push(file.to_string());
        self.dir.join(file)
    }

    pub fn write(&mut self, file: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.artifact(file);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.artifacts.push("manifest.json".into());
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        eprintln!("run written to {}", self.dir.display());
        Ok(self.dir)
    }
}
