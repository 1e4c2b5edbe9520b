//! Pipeline configuration: one TOML file for every subcommand, with dotted
//! `key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scenic::curation::CurationParams;
use scenic::model::{Geometry, ModelConfig};
use scenic::nn::ConvNetSpec;
use scenic::ratings::{CleaningParams, SplitParams};
use scenic::retrieval::Metric;
use scenic::scoring::Combine;
use scenic::training::TrainConfig;
use scenic::Dimension;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Every random stream (curation, split, model init, training) derives from this.
    pub seed: u64,
    pub paths: Paths,
    pub curation: CurationParams,
    pub cleaning: CleaningParams,
    pub split: SplitConfig,
    pub retrieval: RetrievalConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub scoring: ScoringConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            paths: Paths::default(),
            curation: CurationParams::default(),
            cleaning: CleaningParams::default(),
            split: SplitConfig::default(),
            retrieval: RetrievalConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            scoring: ScoringConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Image corpus; image ids are paths relative to it.
    pub corpus: PathBuf,
    /// Raw rating table.
    pub ratings: Option<PathBuf>,
    /// Optional rater profile table.
    pub profiles: Option<PathBuf>,
    /// Finished score table (`image_id,beauty,happy`) for `stats`, in place
    /// of the labels produced by `clean`.
    pub scores: Option<PathBuf>,
    /// All artifacts are written under here.
    pub work: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            ratings: None,
            profiles: None,
            scores: None,
            work: "work".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub ref_n: usize,
    pub ref_train: usize,
    pub input_train: usize,
}

impl SplitCounts {
    fn full_scale(dimension: Dimension) -> Self {
        let p = SplitParams::full_scale(dimension);
        Self {
            ref_n: p.ref_n,
            ref_train: p.ref_train,
            input_train: p.input_train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ref_lo: f64,
    pub ref_hi: f64,
    pub beauty: SplitCounts,
    pub happy: SplitCounts,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let p = SplitParams::full_scale(Dimension::Beauty);
        Self {
            ref_lo: p.ref_lo,
            ref_hi: p.ref_hi,
            beauty: SplitCounts::full_scale(Dimension::Beauty),
            happy: SplitCounts::full_scale(Dimension::Happy),
        }
    }
}

impl SplitConfig {
    pub fn params(&self, dimension: Dimension) -> SplitParams {
        let c = match dimension {
            Dimension::Beauty => self.beauty,
            Dimension::Happy => self.happy,
        };
        SplitParams {
            dimension,
            ref_lo: self.ref_lo,
            ref_hi: self.ref_hi,
            ref_n: c.ref_n,
            ref_train: c.ref_train,
            input_train: c.input_train,
        }
    }
}

/// Which part of the reference set a lookup may return.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSet {
    /// Reference-train only.
    Train,
    /// Reference-train and reference-test.
    Full,
}

impl ReferenceSet {
    pub fn name(self) -> &'static str {
        match self {
            ReferenceSet::Train => "train",
            ReferenceSet::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub metric: Metric,
    /// Precomputed `image_id,v1,v2,...` table. When absent, a seeded
    /// convolutional extractor is used.
    pub features: Option<PathBuf>,
    pub backbone: ConvNetSpec,
    pub geometry: Geometry,
    pub training_references: ReferenceSet,
    pub inference_references: ReferenceSet,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            features: None,
            backbone: ConvNetSpec::default(),
            geometry: Geometry::default(),
            training_references: ReferenceSet::Train,
            inference_references: ReferenceSet::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Share of input-train held out for validation loss and early stopping.
    pub validation_fraction: f64,
    /// Stage 1. The `seed` fields are ignored: training follows the top-level seed.
    pub global: TrainConfig,
    /// Stage 2.
    pub local: TrainConfig,
    /// Stage 3.
    pub emotion: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            validation_fraction: 0.1,
            global: TrainConfig::default(),
            local: TrainConfig::default(),
            emotion: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub dimension: Dimension,
    /// Good/bad boundary for accuracy.
    pub threshold: f64,
    pub top_k: usize,
    pub combine: Combine,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            dimension: Dimension::Beauty,
            threshold: scenic::evaluation::GOOD_THRESHOLD,
            top_k: 10,
            combine: Combine::Beauty,
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (or starts from defaults), applies `key=value` overrides
    /// in order, and validates the result.
    #[cfg(test)]
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        Self::load_with(path, overrides, Vec::new())
    }

    /// As [`load`](Self::load), then applies typed flag values, which win
    /// over both the file and `key=value` overrides.
    pub fn load_with(path: Option<&Path>, overrides: &[String], flags: Vec<(&str, toml::Value)>) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for (key, value) in flags {
            set_value(&mut table, key, value)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("config version {} is not supported (expected {CONFIG_VERSION})", self.version);
        }
        self.curation.geometry.validate()?;
        if !(self.curation.dedup_threshold.is_finite() && self.curation.dedup_threshold >= 0.0) {
            bail!("curation.dedup_threshold must be a non-negative number");
        }
        if !(2..=256).contains(&self.curation.bins_per_channel) {
            bail!("curation.bins_per_channel must be within 2..=256");
        }
        if !(self.cleaning.sigma_k.is_finite() && self.cleaning.sigma_k > 0.0) {
            bail!("cleaning.sigma_k must be positive");
        }
        if self.cleaning.min_valid == 0 {
            bail!("cleaning.min_valid must be at least 1");
        }
        if !(self.split.ref_lo < self.split.ref_hi) {
            bail!("split.ref_lo must be below split.ref_hi");
        }
        for (name, c) in [("beauty", self.split.beauty), ("happy", self.split.happy)] {
            if c.ref_train > c.ref_n {
                bail!("split.{name}.ref_train exceeds split.{name}.ref_n");
            }
        }
        self.retrieval.backbone.validate()?;
        self.retrieval.geometry.validate()?;
        self.model.validate()?;
        for (name, t) in [
            ("global", &self.train.global),
            ("local", &self.train.local),
            ("emotion", &self.train.emotion),
        ] {
            t.validate().with_context(|| format!("train.{name}"))?;
        }
        if !(0.0..1.0).contains(&self.train.validation_fraction) {
            bail!("train.validation_fraction must be in [0, 1)");
        }
        if !self.scoring.threshold.is_finite() {
            bail!("scoring.threshold must be finite");
        }
        if self.scoring.top_k == 0 {
            bail!("scoring.top_k must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal when
/// it parses as one, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        bail!("override `{spec}` has an empty key");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    set_value(table, key, value)
}

/// Sets the dotted `key` to `value`, creating intermediate tables.
pub fn set_value(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
