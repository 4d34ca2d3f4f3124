use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::probe::ProbeConfig;

use super::config::{ExperimentConfig, Phase};

pub const ARTIFACT: &str = "lorascale";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to re-create a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub version: String,
    pub phase: Phase,
    pub master_seed: u64,
    pub config: Option<ExperimentConfig>,
    #[serde(default)]
    pub probes: Vec<ProbeConfig>,
    #[serde(default)]
    pub parallel: bool,
    /// Slope tolerance of probe verdicts.
    #[serde(default)]
    pub tolerance: Option<f64>,
    /// Input file path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(phase: Phase, master_seed: u64) -> Self {
        Self {
            artifact: ARTIFACT.into(),
            version: VERSION.into(),
            phase,
            master_seed,
            config: None,
            probes: Vec::new(),
            parallel: false,
            tolerance: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.artifact != ARTIFACT {
            return Err(Error::format(&path, format!("manifest artifact {:?} is not {ARTIFACT:?}", m.artifact)));
        }
        Ok(m)
    }

    /// Checks every recorded input still has its recorded hash.
    pub fn verify_inputs(&self) -> Result<()> {
        for (path, hash) in &self.inputs {
            let p = PathBuf::from(path);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != *hash {
                return Err(Error::Precondition(format!("input {path} changed since the manifest was written")));
            }
        }
        Ok(())
    }

    /// Output files whose hash in `dir` differs from the manifest.
    pub fn mismatched_outputs(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (name, hash) in &self.outputs {
            let p = dir.join(name);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != *hash {
                bad.push(name.clone());
            }
        }
        Ok(bad)
    }
}

/// Writes run outputs into one directory and collects their hashes.
#[derive(Debug)]
pub struct RunWriter {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl RunWriter {
    pub fn create(dir: impl Into<PathBuf>, manifest: Manifest) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, manifest })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new(Phase::Grid, 3);
        m.config = Some(ExperimentConfig::desk());
        let mut w = RunWriter::create(dir.path(), m).unwrap();
        w.write("a.csv", b"x,y\n1,2\n").unwrap();
        let path = w.finish().unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back, Manifest::load(&path).unwrap());
        assert_eq!(back.master_seed, 3);
        assert!(back.mismatched_outputs(dir.path()).unwrap().is_empty());
        std::fs::write(dir.path().join("a.csv"), b"changed").unwrap();
        assert_eq!(back.mismatched_outputs(dir.path()).unwrap(), vec!["a.csv".to_string()]);
    }

    #[test]
    fn rejects_foreign_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new(Phase::Probe, 0);
        m.artifact = "other".into();
        std::fs::write(dir.path().join(MANIFEST_FILE), m.to_json().unwrap()).unwrap();
        assert!(Manifest::load(dir.path()).is_err());
    }
}
