//! Line-delimited JSON manifests: one utterance record per line.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{load_audio, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Unknown,
}

/// Where a record came from. Generated records always name their source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Provenance {
    Original,
    Vc {
        source_id: String,
        reference_id: String,
        seed: u64,
    },
    Specaug {
        source_id: String,
        seed: u64,
    },
    Chain {
        source_id: String,
        reference_id: String,
        seed: u64,
    },
}

impl Provenance {
    pub fn source_id(&self) -> Option<&str> {
        match self {
            Provenance::Original => None,
            Provenance::Vc { source_id, .. }
            | Provenance::Specaug { source_id, .. }
            | Provenance::Chain { source_id, .. } => Some(source_id),
        }
    }

    pub fn reference_id(&self) -> Option<&str> {
        match self {
            Provenance::Vc { reference_id, .. } | Provenance::Chain { reference_id, .. } => Some(reference_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub audio_path: PathBuf,
    pub speaker_id: String,
    pub gender: Gender,
    pub language: String,
    pub transcript: String,
    pub duration_s: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Relative audio paths resolve against this directory.
    pub base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn new(records: Vec<Record>) -> Self {
        Self { records, base_dir: None }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Parse and validate a manifest file.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| Error::validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(rec);
        }
        let m = Self {
            records,
            base_dir: path.parent().map(Path::to_path_buf),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Unique non-empty ids, positive finite durations, and generated records
    /// whose source ids exist in the same manifest.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.id.is_empty() {
                return Err(Error::validation("manifest record with empty id"));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::validation(format!("duplicate manifest id '{}'", r.id)));
            }
            if !(r.duration_s.is_finite() && r.duration_s > 0.0) {
                return Err(Error::validation(format!(
                    "record '{}' has non-positive duration {}",
                    r.id, r.duration_s
                )));
            }
        }
        for r in &self.records {
            if let Some(src) = r.provenance.source_id() {
                if !seen.contains(src) {
                    return Err(Error::validation(format!(
                        "record '{}' names unknown source '{src}'",
                        r.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn audio_path(&self, r: &Record) -> PathBuf {
        match &self.base_dir {
            Some(base) if r.audio_path.is_relative() => base.join(&r.audio_path),
            _ => r.audio_path.clone(),
        }
    }

    pub fn load_waveform(&self, r: &Record, sample_rate: u32) -> Result<Waveform> {
        load_audio(&self.audio_path(r), sample_rate)
    }

    /// Rewrite relative paths to be relative to `dir` instead of this
    /// manifest's base.
    pub fn rebased(&self, dir: &Path) -> Manifest {
        let records = self
            .records
            .iter()
            .map(|r| {
                let abs = self.audio_path(r);
                let audio_path = abs.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(abs);
                Record { audio_path, ..r.clone() }
            })
            .collect();
        Manifest {
            records,
            base_dir: Some(dir.to_path_buf()),
        }
    }
}
