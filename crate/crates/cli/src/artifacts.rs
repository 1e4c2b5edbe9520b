//! Work-directory layout, prerequisite checks and run manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use scenic::model::Stage;
use scenic::Dimension;

use crate::config::{hex, PipelineConfig, ReferenceSet};

#[derive(Debug, thiserror::Error)]
#[error("missing {}; run `scenic {step}` first", artifact.display())]
pub struct MissingPrerequisite {
    pub artifact: PathBuf,
    pub step: String,
}

pub fn require(path: &Path, step: impl Into<String>) -> Result<(), MissingPrerequisite> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingPrerequisite {
            artifact: path.to_path_buf(),
            step: step.into(),
        })
    }
}

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(work: &Path) -> Self {
        Self { root: work.to_path_buf() }
    }

    fn at(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn curation_manifest(&self) -> PathBuf {
        self.at("curation/manifest.csv")
    }

    pub fn ratings(&self) -> PathBuf {
        self.at("ratings/ratings.csv")
    }

    pub fn rejects(&self) -> PathBuf {
        self.at("ratings/rejects.csv")
    }

    pub fn clean(&self) -> PathBuf {
        self.at("ratings/clean.csv")
    }

    pub fn labels(&self) -> PathBuf {
        self.at("ratings/labels.csv")
    }

    pub fn stats(&self, ext: &str) -> PathBuf {
        self.at(format!("stats/report.{ext}"))
    }

    pub fn attributes(&self, ext: &str) -> PathBuf {
        self.at(format!("stats/attributes.{ext}"))
    }

    pub fn split(&self, dim: Dimension) -> PathBuf {
        self.at(format!("splits/{dim}.csv"))
    }

    pub fn index(&self, dim: Dimension, set: ReferenceSet) -> PathBuf {
        self.at(format!("index/{dim}-{}.json", set.name()))
    }

    pub fn checkpoint(&self, dim: Dimension, stage: Stage) -> PathBuf {
        self.at(format!("model/{dim}/stage{}", stage.number()))
    }

    pub fn history(&self, dim: Dimension, stage: Stage) -> PathBuf {
        self.checkpoint(dim, stage).join("history.jsonl")
    }

    pub fn eval(&self, dim: Dimension, file: &str) -> PathBuf {
        self.at(format!("eval/{dim}/{file}"))
    }

    pub fn scores(&self, dim: Dimension) -> PathBuf {
        self.at(format!("scores/{dim}.jsonl"))
    }

    pub fn ranked(&self, ext: &str) -> PathBuf {
        self.at(format!("rank/ranked.{ext}"))
    }
}

#[derive(Serialize)]
pub struct FileDigest {
    pub path: String,
    /// Absent for directories.
    pub sha256: Option<String>,
}

impl FileDigest {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        let sha256 = if path.is_file() {
            Some(hex(&Sha256::digest(std::fs::read(path)?)))
        } else {
            None
        };
        Ok(Self {
            path: path.display().to_string(),
            sha256,
        })
    }
}

/// Written next to a subcommand's primary output as `<output>.run.json`.
#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub subcommand: &'a str,
    pub version: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub config: &'a PipelineConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Seconds since the Unix epoch; the only field that changes between identical runs.
    pub created_unix: u64,
}

pub fn write_run_manifest(
    subcommand: &str,
    cfg: &PipelineConfig,
    inputs: &[&Path],
    outputs: &[&Path],
) -> anyhow::Result<PathBuf> {
    let primary = outputs.first().expect("every subcommand writes an output");
    let digest = |ps: &[&Path]| ps.iter().map(|p| FileDigest::of(p)).collect::<std::io::Result<Vec<_>>>();
    let manifest = RunManifest {
        subcommand,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg,
        inputs: digest(inputs)?,
        outputs: digest(outputs)?,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    let path = primary.with_file_name(name);
    scenic::io::write_json(&path, &manifest)?;
    Ok(path)
}
