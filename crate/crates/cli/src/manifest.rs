//! Per-run manifest: what ran, with which settings, on which bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::CliError;

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub resolved: BTreeMap<String, String>,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<PathBuf>,
    pub started: u64,
    pub finished: u64,
}

impl RunManifest {
    pub fn start(
        command: &str,
        config_path: Option<&Path>,
        resolved: &BTreeMap<String, String>,
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            resolved: resolved.clone(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: unix_seconds(),
            finished: 0,
        }
    }

    /// Reads an input file and records its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        if !path.is_file() {
            return Err(CliError::Usage(format!(
                "input file not found: {}",
                path.display()
            )));
        }
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push((path.to_path_buf(), sha256_hex(&bytes)));
        Ok(bytes)
    }

    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(path, bytes)
            .map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command={}", self.command);
        let config = self
            .config_path
            .as_ref()
            .map_or("-".to_string(), |p| p.display().to_string());
        let _ = writeln!(out, "config={config}");
        for (k, v) in &self.resolved {
            let _ = writeln!(out, "set.{k}={v}");
        }
        for (k, v) in &self.seeds {
            let _ = writeln!(out, "seed.{k}={v}");
        }
        for (p, digest) in &self.inputs {
            let _ = writeln!(out, "input={}\tsha256={digest}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(out, "output={}", p.display());
        }
        let _ = writeln!(out, "started={}", self.started);
        let _ = writeln!(out, "finished={}", self.finished);
        out
    }

    /// Writes `manifest.txt` into `dir`; called once at the end of every run.
    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        self.finished = unix_seconds();
        let path = dir.join("manifest.txt");
        self.outputs.push(path.clone());
        std::fs::write(&path, self.to_text())
            .map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn text_lists_inputs_and_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.tsv");
        std::fs::write(&input, b"abc").unwrap();
        let mut m = RunManifest::start("synth", None, &BTreeMap::new());
        m.seeds.push(("base".into(), 7));
        m.read_input(&input).unwrap();
        let text = m.to_text();
        assert!(text.contains("seed.base=7"));
        assert!(text.contains("sha256=ba7816bf"));
        assert!(matches!(
            m.read_input(&dir.path().join("missing")),
            Err(CliError::Usage(_))
        ));
    }
}
