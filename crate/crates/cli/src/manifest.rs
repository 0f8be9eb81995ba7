//! Run manifests: the echoed config, the invocation and the hashes of every
//! input and artifact. A manifest parses as a config, so
//! `--config out/manifest.txt` reruns with the same settings.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use vadapter::kvtext::KvWriter;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct Manifest {
    command: String,
    inputs: Vec<(String, PathBuf)>,
    artifacts: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push((role.into(), path.to_path_buf()));
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    /// Writes `manifest.txt` into the output directory and returns its path.
    pub fn write(&self, cfg: &RunConfig) -> Result<PathBuf> {
        let mut w = KvWriter::new();
        w.section("invocation").kv("command", &self.command);
        for (role, path) in &self.inputs {
            w.kv(role, path.display())
                .kv(&format!("{role}_sha256"), file_sha256(path)?);
        }
        cfg.write_kv(&mut w);
        w.section("artifacts");
        for path in &self.artifacts {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .context("artifact without a file name")?
                .replace('.', "_");
            w.kv(&name, file_sha256(path)?);
        }
        let out = cfg.out_dir.join(MANIFEST_FILE);
        fs::write(&out, w.finish()).with_context(|| format!("writing {}", out.display()))?;
        Ok(out)
    }
}
