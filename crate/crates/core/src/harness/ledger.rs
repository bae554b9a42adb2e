use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::training::{ExperimentConfig, Method};
use crate::{Error, Result};

pub const LEDGER_FILE: &str = "ledger.json";

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `bytes` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A file produced by the run, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn record(root: &Path, relative: impl Into<PathBuf>) -> Result<Self> {
        let path = relative.into();
        Ok(Artifact {
            sha256: file_sha256(&root.join(&path))?,
            path,
        })
    }

    pub fn verify(&self, root: &Path) -> Result<()> {
        let full = root.join(&self.path);
        let actual = file_sha256(&full).map_err(|_| Error::Corrupt {
            path: full.clone(),
            reason: "missing".into(),
        })?;
        if actual != self.sha256 {
            return Err(Error::Corrupt {
                path: full,
                reason: "checksum differs from the ledger".into(),
            });
        }
        Ok(())
    }
}

/// Identity of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: Method,
    pub tau: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn dir_name(&self) -> String {
        format!("{}-tau{}-seed{}", self.method.as_str(), self.tau, self.seed)
    }
}

/// A completed training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedCell {
    pub key: CellKey,
    pub config: ExperimentConfig,
    pub checkpoint: Artifact,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    /// Converged probe validation loss at the selected checkpoint.
    pub val_l_sp: Option<f64>,
    pub val_sed_accuracy: f64,
}

/// A completed attacker evaluation of the selected cell of a (method, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedCell {
    pub key: CellKey,
    /// Human-readable selection rule that picked `key.tau`.
    pub selection: String,
    pub metrics: Artifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub checkpoint: Artifact,
    pub val_mse: f64,
    pub identity_val_mse: f64,
}

/// Persistent record of the experiment matrix. Every entry points at
/// checksummed artifacts so a resumed run can detect tampering or partial
/// writes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLedger {
    pub manifest: Option<Artifact>,
    pub mask: Option<MaskRecord>,
    pub trained: Vec<TrainedCell>,
    pub evaluated: Vec<EvaluatedCell>,
}

impl ExperimentLedger {
    /// Loads the ledger of `root`, or an empty one, and verifies every
    /// recorded artifact.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(LEDGER_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ledger: Self = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        ledger.verify(root)?;
        Ok(ledger)
    }

    pub fn verify(&self, root: &Path) -> Result<()> {
        let artifacts = self
            .manifest
            .iter()
            .chain(self.mask.iter().map(|m| &m.checkpoint))
            .chain(self.trained.iter().map(|t| &t.checkpoint))
            .chain(self.evaluated.iter().map(|e| &e.metrics));
        artifacts.map(|a| a.verify(root)).collect()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_atomic(&root.join(LEDGER_FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn trained(&self, key: &CellKey) -> Option<&TrainedCell> {
        self.trained.iter().find(|t| &t.key == key)
    }

    pub fn evaluated(&self, method: Method, seed: u64) -> Option<&EvaluatedCell> {
        self.evaluated
            .iter()
            .find(|e| e.key.method == method && e.key.seed == seed)
    }

    pub fn record_trained(&mut self, cell: TrainedCell) {
        self.trained.retain(|t| t.key != cell.key);
        self.trained.push(cell);
        self.trained.sort_by_key(|t| t.key);
    }

    pub fn record_evaluated(&mut self, cell: EvaluatedCell) {
        self.evaluated
            .retain(|e| (e.key.method, e.key.seed) != (cell.key.method, cell.key.seed));
        self.evaluated.push(cell);
        self.evaluated.sort_by_key(|e| e.key);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_round_trips_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::write(root.join("m.tsv"), "x").unwrap();
        let mut l = ExperimentLedger {
            manifest: Some(Artifact::record(root, "m.tsv").unwrap()),
            ..Default::default()
        };
        let key = CellKey {
            method: Method::Baseline,
            tau: 5,
            seed: 0,
        };
        fs::create_dir_all(root.join(key.dir_name())).unwrap();
        fs::write(root.join(key.dir_name()).join("best.ckpt"), "ck").unwrap();
        l.record_trained(TrainedCell {
            key,
            config: ExperimentConfig::default(),
            checkpoint: Artifact::record(root, PathBuf::from(key.dir_name()).join("best.ckpt")).unwrap(),
            best_epoch: 3,
            stopped_epoch: 9,
            val_l_sp: None,
            val_sed_accuracy: 0.5,
        });
        l.save(root).unwrap();
        assert_eq!(ExperimentLedger::open(root).unwrap(), l);
        fs::write(root.join(key.dir_name()).join("best.ckpt"), "tampered").unwrap();
        assert!(matches!(ExperimentLedger::open(root), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn missing_ledger_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(ExperimentLedger::open(dir.path()).unwrap(), ExperimentLedger::default());
    }
}
