//! Run manifests: every command writes a plain-text key=value record tying
//! its outputs to the input checksums, the effective config hash, and the
//! seed, so any CSV can be traced back to its provenance.

use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Runtime(format!("cannot checksum {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn sha256_str(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut m = Manifest { lines: Vec::new() };
        m.push("command", command);
        m.push("seed", seed);
        m.push("timestamp", chrono::Utc::now().to_rfc3339());
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn push_file(&mut self, key: &str, path: &Path) -> Result<(), CliError> {
        self.push(key, path.display());
        self.push(&format!("{key}_sha256"), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path, command: &str) -> Result<(), CliError> {
        let path = out_dir.join(format!("manifest-{command}.txt"));
        let mut text = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(text, "{k}={v}");
        }
        std::fs::write(&path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write manifest: {e}")))?;
        Ok(())
    }
}

/// Creates the output directory and records the effective config beside the
/// manifests; returns the config hash.
pub fn prepare_out_dir(out_dir: &Path, effective_config: &str) -> Result<String, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", out_dir.display())))?;
    std::fs::write(out_dir.join("effective-config.toml"), effective_config)
        .map_err(|e| CliError::Runtime(format!("cannot write effective config: {e}")))?;
    Ok(sha256_str(effective_config))
}
