//! Content-based reference retrieval: pooled scene features and an exact
//! nearest-neighbour index over the reference set.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::model::preprocess::{center_crop, scale_short_side, Geometry};
use crate::nn::{ConvNet, ConvNetSpec};
use crate::ratings::Dimension;
use crate::rng::stream;
use crate::tensor::Tensor3;

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("feature vector is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("feature vector has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    // zero vectors: identical iff both are zero
                    return if na == nb { 0.0 } else { 1.0 };
                }
                (1.0 - dot / (na * nb)).max(0.0)
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::InvalidParameter(format!("unknown metric '{s}'"))),
        }
    }
}

/// Anything that turns an image into one pooled vector.
pub trait FeatureExtractor: Send + Sync {
    /// Stable name recorded in the index so mismatched extractors are caught.
    fn identifier(&self) -> String;

    fn features(&self, image_id: &str, image: &RgbImage) -> Result<FeatureVector>;
}

/// Fixed, seeded convolutional extractor: short-side resize, centre crop,
/// conv stack, global average pooling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvExtractor {
    pub net: ConvNet,
    pub geometry: Geometry,
    seed: u64,
}

impl ConvExtractor {
    pub fn new(spec: &ConvNetSpec, geometry: Geometry, seed: u64) -> Result<Self> {
        geometry.validate()?;
        let net = ConvNet::new(spec, &mut stream(seed, "retrieval"))?;
        Ok(Self { net, geometry, seed })
    }

    pub fn feature_map(&self, image: &RgbImage) -> Result<Tensor3> {
        let view = scale_short_side(image, self.geometry.resize_short);
        self.net.forward(&Tensor3::from_rgb(&center_crop(&view, self.geometry.crop)))
    }
}

/// Per-channel mean of a feature map.
pub fn extract_scene_features(map: &Tensor3) -> Result<FeatureVector> {
    FeatureVector::new(map.mean_pool())
}

impl FeatureExtractor for ConvExtractor {
    fn identifier(&self) -> String {
        let chans: Vec<String> = self.net.layers.iter().map(|l| l.out_channels.to_string()).collect();
        format!(
            "conv-seed{}-{}x{}-crop{}",
            self.seed,
            self.net.in_channels(),
            chans.join("x"),
            self.geometry.crop
        )
    }

    fn features(&self, image_id: &str, image: &RgbImage) -> Result<FeatureVector> {
        extract_scene_features(&self.feature_map(image)?)
            .map_err(|e| Error::Other(format!("features for {image_id}: {e}")))
    }
}

/// Features computed elsewhere (for instance by a large pretrained network),
/// looked up by image id.
#[derive(Clone, Debug)]
pub struct FeatureTable {
    name: String,
    rows: BTreeMap<String, FeatureVector>,
}

impl FeatureTable {
    pub fn new(name: impl Into<String>, rows: BTreeMap<String, FeatureVector>) -> Result<Self> {
        let mut dims = rows.values().map(FeatureVector::dim);
        if let Some(d) = dims.next() {
            if dims.any(|x| x != d) {
                return Err(Error::Shape("feature table rows differ in length".into()));
            }
        }
        Ok(Self { name: name.into(), rows })
    }

    /// Headerless CSV: `image_id,v1,v2,...`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
        let mut rows = BTreeMap::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
            let id = rec.get(0).unwrap_or_default().trim().to_string();
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Other(format!("{} line {}: {e}", path.display(), line + 1)))?;
            if rows.insert(id.clone(), FeatureVector::new(values)?).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(format!("table:{name}"), rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl FeatureExtractor for FeatureTable {
    fn identifier(&self) -> String {
        self.name.clone()
    }

    fn features(&self, image_id: &str, _image: &RgbImage) -> Result<FeatureVector> {
        self.rows
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::Other(format!("no precomputed features for {image_id}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image_id: String,
    pub score: f64,
    pub features: FeatureVector,
}

/// Exact linear-scan nearest-neighbour index. Entries are sorted by id, so
/// building from the same inputs in any order gives the same index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceIndex {
    pub format_version: u32,
    pub backbone: String,
    pub metric: Metric,
    pub dimension: Dimension,
    pub dim: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub image_id: String,
    pub score: f64,
    pub distance: f64,
}

impl ReferenceIndex {
    pub fn from_entries(backbone: String, metric: Metric, dimension: Dimension, mut entries: Vec<IndexEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::EmptyIndex);
        };
        let dim = first.features.dim();
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::DuplicateId(e.image_id.clone()));
            }
            if e.features.dim() != dim {
                return Err(Error::Shape(format!("{} has {} features, expected {dim}", e.image_id, e.features.dim())));
            }
            if !e.score.is_finite() {
                return Err(Error::InvalidParameter(format!("{} has a non-finite score", e.image_id)));
            }
        }
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(Self {
            format_version: INDEX_FORMAT_VERSION,
            backbone,
            metric,
            dimension,
            dim,
            entries,
        })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Closest entry; equal distances go to the smaller id.
    pub fn nearest(&self, query: &FeatureVector) -> Result<Retrieved> {
        self.nearest_excluding(query, None)
    }

    /// As [`nearest`](Self::nearest) but skipping one id, so a training image
    /// that is also a reference is not paired with itself.
    pub fn nearest_excluding(&self, query: &FeatureVector, exclude: Option<&str>) -> Result<Retrieved> {
        if query.dim() != self.dim {
            return Err(Error::Shape(format!(
                "query has {} features, index has {}",
                query.dim(),
                self.dim
            )));
        }
        let mut best: Option<(f64, &IndexEntry)> = None;
        for e in &self.entries {
            if Some(e.image_id.as_str()) == exclude {
                continue;
            }
            let d = self.metric.distance(query.values(), e.features.values());
            // entries are id-sorted, so strict < keeps the smaller id on ties
            if best.is_none_or(|(bd, _)| d.total_cmp(&bd) == Ordering::Less) {
                best = Some((d, e));
            }
        }
        let (distance, e) = best.ok_or(Error::EmptyIndex)?;
        Ok(Retrieved {
            image_id: e.image_id.clone(),
            score: e.score,
            distance,
        })
    }

    /// Index restricted to the given ids.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Result<Self> {
        let entries = self.entries.iter().filter(|e| ids.contains(&e.image_id)).cloned().collect();
        Self::from_entries(self.backbone.clone(), self.metric, self.dimension, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let index: Self = read_json(path)?;
        if index.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: index.format_version,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        // re-validate: the file may have been edited by hand
        let checked = Self::from_entries(index.backbone.clone(), index.metric, index.dimension, index.entries.clone())?;
        if checked.dim != index.dim {
            return Err(Error::Shape(format!("index header says dim {}, entries have {}", index.dim, checked.dim)));
        }
        Ok(checked)
    }
}

/// One reference image with its ground-truth score.
pub struct Reference<'a> {
    pub image_id: &'a str,
    pub image: &'a RgbImage,
    pub score: f64,
}

pub fn build_index(
    refs: &[Reference<'_>],
    extractor: &dyn FeatureExtractor,
    metric: Metric,
    dimension: Dimension,
) -> Result<ReferenceIndex> {
    let entries = refs
        .iter()
        .map(|r| {
            Ok(IndexEntry {
                image_id: r.image_id.to_string(),
                score: r.score,
                features: extractor.features(r.image_id, r.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ReferenceIndex::from_entries(extractor.identifier(), metric, dimension, entries)
}

pub fn retrieve_reference(
    image_id: &str,
    image: &RgbImage,
    index: &ReferenceIndex,
    extractor: &dyn FeatureExtractor,
) -> Result<Retrieved> {
    if extractor.identifier() != index.backbone {
        return Err(Error::InvalidParameter(format!(
            "index was built with '{}' but the extractor is '{}'",
            index.backbone,
            extractor.identifier()
        )));
    }
    index.nearest(&extractor.features(image_id, image)?)
}
