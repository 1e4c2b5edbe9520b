//! Score fusion, single-image scoring and directory ranking.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::curation::{decode_rgb, scan_directory, Reject};
use crate::error::{Error, Result};
use crate::model::preprocess::prepare;
use crate::model::{ModelBundle, PredictionBreakdown};
use crate::ratings::Dimension;
use crate::retrieval::{FeatureExtractor, ReferenceIndex};

/// Fused score of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    /// Content-referenced part: absolute, relative global and relative local
    /// predictions anchored twice on the reference's known score.
    pub z_cr: f64,
    /// Emotion-assisted part: assistant prediction plus predicted gap.
    pub z_ea: f64,
    pub z: f64,
    /// `z / 4`, back on the rating scale.
    pub calibrated: f64,
}

pub const CALIBRATION_DIVISOR: f64 = 4.0;

pub fn fuse_scores(b: &PredictionBreakdown) -> Result<FusedScore> {
    if !b.is_finite() {
        return Err(Error::InvalidParameter(format!("non-finite prediction breakdown: {b:?}")));
    }
    let z_cr = b.global_input + b.global_relative + b.local_relative + 2.0 * b.reference_score;
    let z_ea = b.emotion_assistant + b.emotion_difference;
    let z = z_cr + z_ea;
    Ok(FusedScore {
        z_cr,
        z_ea,
        z,
        calibrated: z / CALIBRATION_DIVISOR,
    })
}

/// One line of score output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub reference_id: String,
    pub dimension: Dimension,
    pub global_input: f64,
    pub global_reference: f64,
    pub global_relative: f64,
    pub local_relative: f64,
    pub emotion_target: f64,
    pub emotion_assistant: f64,
    pub emotion_difference: f64,
    pub reference_score: f64,
    pub reference_distance: f64,
    pub z_cr: f64,
    pub z_ea: f64,
    pub z: f64,
    pub calibrated: f64,
}

impl ScoreRecord {
    pub fn breakdown(&self) -> PredictionBreakdown {
        PredictionBreakdown {
            global_input: self.global_input,
            global_reference: self.global_reference,
            global_relative: self.global_relative,
            local_relative: self.local_relative,
            emotion_target: self.emotion_target,
            emotion_assistant: self.emotion_assistant,
            emotion_difference: self.emotion_difference,
            reference_score: self.reference_score,
        }
    }
}

/// A model, the reference index for its dimension and the extractor that
/// built the index.
pub struct Scorer<'a> {
    pub model: &'a ModelBundle,
    pub index: &'a ReferenceIndex,
    pub extractor: &'a dyn FeatureExtractor,
    /// References are decoded on demand from here.
    pub reference_root: &'a Path,
}

impl<'a> Scorer<'a> {
    pub fn new(
        model: &'a ModelBundle,
        index: &'a ReferenceIndex,
        extractor: &'a dyn FeatureExtractor,
        reference_root: &'a Path,
    ) -> Result<Self> {
        if model.dimension != index.dimension {
            return Err(Error::InvalidParameter(format!(
                "model scores {} but the index holds {} scores",
                model.dimension, index.dimension
            )));
        }
        if extractor.identifier() != index.backbone {
            return Err(Error::InvalidParameter(format!(
                "index was built with '{}' but the extractor is '{}'",
                index.backbone,
                extractor.identifier()
            )));
        }
        Ok(Self {
            model,
            index,
            extractor,
            reference_root,
        })
    }

    pub fn score_image(&self, image_id: &str, image: &RgbImage) -> Result<ScoreRecord> {
        let context = |e: Error| Error::Other(format!("scoring {image_id}: {e}"));
        let feats = self.extractor.features(image_id, image).map_err(context)?;
        let hit = self.index.nearest(&feats).map_err(context)?;
        let ref_image = decode_rgb(&self.reference_root.join(&hit.image_id)).map_err(context)?;
        self.score_with_reference(image_id, image, &hit.image_id, &ref_image, hit.score, hit.distance)
    }

    /// Scores against an already chosen reference.
    pub fn score_with_reference(
        &self,
        image_id: &str,
        image: &RgbImage,
        reference_id: &str,
        reference: &RgbImage,
        reference_score: f64,
        reference_distance: f64,
    ) -> Result<ScoreRecord> {
        let g = &self.model.config.geometry;
        let b = self.model.predict(&prepare(image, g), &prepare(reference, g), reference_score)?;
        let f = fuse_scores(&b).map_err(|e| Error::Other(format!("scoring {image_id}: {e}")))?;
        Ok(ScoreRecord {
            image_id: image_id.to_string(),
            reference_id: reference_id.to_string(),
            dimension: self.model.dimension,
            global_input: b.global_input,
            global_reference: b.global_reference,
            global_relative: b.global_relative,
            local_relative: b.local_relative,
            emotion_target: b.emotion_target,
            emotion_assistant: b.emotion_assistant,
            emotion_difference: b.emotion_difference,
            reference_score: b.reference_score,
            reference_distance,
            z_cr: f.z_cr,
            z_ea: f.z_ea,
            z: f.z,
            calibrated: f.calibrated,
        })
    }
}

/// The six comparison predictors, read off one trained model, in table
/// order: absolute global score only; global with reference; global and
/// local with reference; the same with a random instead of a retrieved
/// reference; plus the assistant prediction alone; the full fusion.
/// Each is a sum of estimates of the target score divided by their count.
pub fn ablation_scores(retrieved: &PredictionBreakdown, random: &PredictionBreakdown) -> Result<[f64; 6]> {
    let cr = |b: &PredictionBreakdown| Ok::<f64, Error>(fuse_scores(b)?.z_cr);
    let full = fuse_scores(retrieved)?;
    let global_pair = retrieved.global_input + retrieved.global_relative + retrieved.reference_score;
    Ok([
        retrieved.global_input,
        global_pair / 2.0,
        full.z_cr / 3.0,
        cr(random)? / 3.0,
        (full.z_cr + retrieved.emotion_assistant) / 4.0,
        full.calibrated,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Beauty,
    Happy,
    Both,
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::Beauty => "beauty",
            Combine::Happy => "happy",
            Combine::Both => "both",
        })
    }
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "beauty" => Ok(Combine::Beauty),
            "happy" => Ok(Combine::Happy),
            "both" => Ok(Combine::Both),
            _ => Err(Error::InvalidParameter(format!("unknown combine mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub rank: usize,
    pub image_id: String,
    pub key: f64,
    pub beauty: Option<ScoreRecord>,
    pub happy: Option<ScoreRecord>,
}

/// Flat form of [`RankedImage`] for CSV output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedRow {
    pub rank: usize,
    pub image_id: String,
    pub key: f64,
    pub beauty: Option<f64>,
    pub happy: Option<f64>,
    pub beauty_reference: Option<String>,
    pub happy_reference: Option<String>,
}

impl From<&RankedImage> for RankedRow {
    fn from(r: &RankedImage) -> Self {
        Self {
            rank: r.rank,
            image_id: r.image_id.clone(),
            key: r.key,
            beauty: r.beauty.as_ref().map(|s| s.calibrated),
            happy: r.happy.as_ref().map(|s| s.calibrated),
            beauty_reference: r.beauty.as_ref().map(|s| s.reference_id.clone()),
            happy_reference: r.happy.as_ref().map(|s| s.reference_id.clone()),
        }
    }
}

/// Sort key of an image under a combine mode.
pub fn combine_key(combine: Combine, beauty: Option<&ScoreRecord>, happy: Option<&ScoreRecord>) -> Result<f64> {
    let need = |s: Option<&ScoreRecord>, d: &str| {
        s.map(|s| s.calibrated)
            .ok_or_else(|| Error::InvalidParameter(format!("combine mode {combine} needs a {d} score")))
    };
    Ok(match combine {
        Combine::Beauty => need(beauty, "beauty")?,
        Combine::Happy => need(happy, "happy")?,
        Combine::Both => (need(beauty, "beauty")? + need(happy, "happy")?) / 2.0,
    })
}

/// Orders by descending key, then ascending id, assigns 1-based ranks and
/// keeps the first `k`.
pub fn rank_records(mut items: Vec<RankedImage>, k: usize) -> Vec<RankedImage> {
    items.sort_by(|a, b| match b.key.total_cmp(&a.key) {
        Ordering::Equal => a.image_id.cmp(&b.image_id),
        o => o,
    });
    items.truncate(k);
    for (i, item) in items.iter_mut().enumerate() {
        item.rank = i + 1;
    }
    items
}

pub struct RankOutcome {
    pub ranked: Vec<RankedImage>,
    /// Files that could not be listed or decoded.
    pub skipped: Vec<Reject>,
    pub warnings: Vec<String>,
}

/// Scores every readable image under `dir` and returns the top `k`.
pub fn rank_directory(
    dir: &Path,
    beauty: Option<&Scorer<'_>>,
    happy: Option<&Scorer<'_>>,
    k: usize,
    combine: Combine,
) -> Result<RankOutcome> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let (records, mut skipped) = scan_directory(dir)?;
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push(format!("no readable images under {}", dir.display()));
        return Ok(RankOutcome {
            ranked: Vec::new(),
            skipped,
            warnings,
        });
    }
    let score_one = |rec: &crate::curation::ImageRecord| -> Result<Option<RankedImage>> {
        let image = match rec.decode() {
            Ok(img) => img,
            Err(_) => return Ok(None),
        };
        let b = beauty.map(|s| s.score_image(&rec.id, &image)).transpose()?;
        let h = happy.map(|s| s.score_image(&rec.id, &image)).transpose()?;
        let key = combine_key(combine, b.as_ref(), h.as_ref())?;
        Ok(Some(RankedImage {
            rank: 0,
            image_id: rec.id.clone(),
            key,
            beauty: b,
            happy: h,
        }))
    };
    #[cfg(feature = "parallel")]
    let scored: Vec<Result<Option<RankedImage>>> = {
        use rayon::prelude::*;
        records.par_iter().map(score_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let scored: Vec<Result<Option<RankedImage>>> = records.iter().map(score_one).collect();

    let mut items = Vec::new();
    for (rec, s) in records.iter().zip(scored) {
        match s? {
            Some(item) => items.push(item),
            None => skipped.push(Reject {
                path: rec.path.clone(),
                reason: "unreadable".into(),
            }),
        }
    }
    if items.is_empty() {
        warnings.push(format!("no decodable images under {}", dir.display()));
    }
    Ok(RankOutcome {
        ranked: rank_records(items, k),
        skipped,
        warnings,
    })
}
