//! Staged training: squared-error losses for each module, augmentation,
//! reference pairing and the per-stage optimisation loop.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::preprocess::{prepare_view, scale_short_side, working_view, Geometry, PreparedImage};
use crate::model::{EmotionOutput, GlobalOutput, ModelBundle, Stage};
use crate::nn::{Adam, Parameters};
use crate::retrieval::{FeatureExtractor, FeatureVector, ReferenceIndex};
use crate::rng::{stream, StageRng};

/// Squared error of both absolute scores and of the relative score.
pub fn loss_global(y_input: f64, y_reference: f64, y_relative: f64, t_input: f64, t_reference: f64) -> f64 {
    let r = loss_global_residuals(y_input, y_reference, y_relative, t_input, t_reference);
    r.iter().map(|e| e * e).sum()
}

fn loss_global_residuals(y_input: f64, y_reference: f64, y_relative: f64, t_input: f64, t_reference: f64) -> [f64; 3] {
    [
        y_input - t_input,
        y_reference - t_reference,
        y_relative - (t_input - t_reference),
    ]
}

/// d(loss_global)/d(y_input, y_reference, y_relative).
pub fn loss_global_grad(y_input: f64, y_reference: f64, y_relative: f64, t_input: f64, t_reference: f64) -> [f64; 3] {
    loss_global_residuals(y_input, y_reference, y_relative, t_input, t_reference).map(|e| 2.0 * e)
}

pub fn loss_local(y_relative: f64, t_input: f64, t_reference: f64) -> f64 {
    let e = y_relative - (t_input - t_reference);
    e * e
}

pub fn loss_local_grad(y_relative: f64, t_input: f64, t_reference: f64) -> f64 {
    2.0 * (y_relative - (t_input - t_reference))
}

fn loss_emotion_residuals(y_target: f64, y_assistant: f64, y_difference: f64, t_target: f64, t_assistant: f64) -> [f64; 3] {
    [
        y_target - t_target,
        y_assistant - t_assistant,
        y_difference - (t_target - t_assistant),
    ]
}

/// Squared error of target, assistant and target-minus-assistant predictions.
pub fn loss_emotion(y_target: f64, y_assistant: f64, y_difference: f64, t_target: f64, t_assistant: f64) -> f64 {
    let r = loss_emotion_residuals(y_target, y_assistant, y_difference, t_target, t_assistant);
    r.iter().map(|e| e * e).sum()
}

/// d(loss_emotion)/d(y_target, y_assistant, y_difference).
pub fn loss_emotion_grad(y_target: f64, y_assistant: f64, y_difference: f64, t_target: f64, t_assistant: f64) -> [f64; 3] {
    loss_emotion_residuals(y_target, y_assistant, y_difference, t_target, t_assistant).map(|e| 2.0 * e)
}

/// Which modules stay fixed while another module's stage runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezePolicy {
    pub global: bool,
    pub local: bool,
    pub emotion: bool,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            global: true,
            local: true,
            emotion: true,
        }
    }
}

impl FreezePolicy {
    pub fn is_frozen(&self, stage: Stage) -> bool {
        match stage {
            Stage::Global => self.global,
            Stage::Local => self.local,
            Stage::Emotion => self.emotion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Applies to modules other than the active one. An unfrozen, already
    /// trained module keeps learning under its own loss alongside the active one.
    pub freeze: FreezePolicy,
    /// Train only the heads of the active module.
    pub freeze_backbone: bool,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Stop after this many epochs without validation improvement and keep
    /// the best weights. Needs validation pairs.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-4,
            seed: 0,
            freeze: FreezePolicy::default(),
            freeze_backbone: false,
            scale_range: (0.75, 1.25),
            flip_prob: 0.5,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad(format!("scale_range ({lo}, {hi}) needs 0 < lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1".into());
        }
        Ok(())
    }

    fn augments(&self) -> bool {
        self.scale_range != (1.0, 1.0) || self.flip_prob > 0.0
    }
}

/// One random draw of the training-time transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub scale: f64,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Self = Self { scale: 1.0, flip: false };

    pub fn draw(cfg: &TrainConfig, rng: &mut StageRng) -> Self {
        let (lo, hi) = cfg.scale_range;
        let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let flip = rng.random::<f64>() < cfg.flip_prob;
        Self { scale, flip }
    }

    pub fn apply(&self, image: &RgbImage, geometry: &Geometry) -> PreparedImage {
        prepare_view(&working_view(image, geometry, self.scale, self.flip), geometry)
    }
}

/// Random rescale and optional mirror, then the model's input geometry.
pub fn augment(image: &RgbImage, geometry: &Geometry, cfg: &TrainConfig, rng: &mut StageRng) -> PreparedImage {
    Augmentation::draw(cfg, rng).apply(image, geometry)
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image_id: String,
    pub image: RgbImage,
    /// Ground truth in the model's dimension.
    pub target: f64,
    /// Ground truth in the other dimension.
    pub assistant: f64,
}

impl TrainSample {
    /// Keeps only the resolution training can use: the short side is cut to
    /// what the largest augmentation scale asks for.
    pub fn shrink(mut self, geometry: &Geometry, cfg: &TrainConfig) -> Self {
        let need = (f64::from(geometry.resize_short) * cfg.scale_range.1).ceil() as u32;
        let need = need.max(geometry.crop);
        if self.image.width().min(self.image.height()) > need {
            self.image = scale_short_side(&self.image, need);
        }
        self
    }
}

/// Indices into [`TrainData::samples`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub input: usize,
    pub reference: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    /// Inputs and references together.
    pub samples: Vec<TrainSample>,
    pub train: Vec<TrainPair>,
    pub validation: Vec<TrainPair>,
}

impl TrainData {
    /// Pairs every train/validation input with its nearest reference. The
    /// extractor is fixed, so pairs are computed once and reused every epoch.
    pub fn pair_with_references(
        samples: Vec<TrainSample>,
        train_ids: &[String],
        validation_ids: &[String],
        index: &ReferenceIndex,
        extractor: &dyn FeatureExtractor,
    ) -> Result<Self> {
        let mut features = BTreeMap::new();
        for s in &samples {
            if train_ids.contains(&s.image_id) || validation_ids.contains(&s.image_id) {
                features.insert(s.image_id.clone(), extractor.features(&s.image_id, &s.image)?);
            }
        }
        Self::pair_with_features(samples, train_ids, validation_ids, index, &features)
    }

    /// As [`pair_with_references`](Self::pair_with_references), with input
    /// features computed beforehand (for instance at full resolution).
    pub fn pair_with_features(
        samples: Vec<TrainSample>,
        train_ids: &[String],
        validation_ids: &[String],
        index: &ReferenceIndex,
        features: &BTreeMap<String, FeatureVector>,
    ) -> Result<Self> {
        let by_id: BTreeMap<&str, usize> = samples.iter().enumerate().map(|(i, s)| (s.image_id.as_str(), i)).collect();
        let pair = |id: &String| -> Result<TrainPair> {
            let &input = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Other(format!("training input {id} has no loaded image")))?;
            let feats = features
                .get(id)
                .ok_or_else(|| Error::Other(format!("training input {id} has no features")))?;
            let hit = index.nearest_excluding(feats, Some(id))?;
            let &reference = by_id
                .get(hit.image_id.as_str())
                .ok_or_else(|| Error::Other(format!("reference {} has no loaded image", hit.image_id)))?;
            Ok(TrainPair { input, reference })
        };
        let train = train_ids.iter().map(pair).collect::<Result<Vec<_>>>()?;
        let validation = validation_ids.iter().map(pair).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            train,
            validation,
        })
    }
}

/// Seeded hold-out of `fraction` of `ids` (at least one when the fraction is
/// positive and there are two or more ids). Returns `(train, validation)`,
/// both in input order.
pub fn holdout(ids: &[String], fraction: f64, rng: &mut StageRng) -> (Vec<String>, Vec<String>) {
    let n_val = ((ids.len() as f64) * fraction).round() as usize;
    let n_val = if fraction > 0.0 && ids.len() >= 2 { n_val.clamp(1, ids.len() - 1) } else { 0 };
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(rng);
    let mut is_val = vec![false; ids.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (id, v) in ids.iter().zip(is_val) {
        if v { val.push(id.clone()) } else { train.push(id.clone()) }
    }
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean training loss over the epoch's pairs, measured before each update.
    pub loss: f64,
    pub validation_loss: Option<f64>,
    /// Optimiser steps taken so far in this stage.
    pub steps: usize,
}

struct Trainable {
    stage: Stage,
    heads_only: bool,
    optimizer: Adam,
}

/// Runs one stage in place. Stages must run in order; a stage's active module
/// is marked completed on success.
pub fn train_stage(stage: Stage, model: &mut ModelBundle, data: &TrainData, cfg: &TrainConfig) -> Result<Vec<HistoryRecord>> {
    cfg.validate()?;
    for prior in Stage::ALL.iter().filter(|s| **s < stage) {
        if !model.has_completed(*prior) {
            return Err(Error::MissingStage {
                stage: stage.number(),
                missing: prior.number(),
            });
        }
    }
    if data.train.is_empty() {
        return Err(Error::InsufficientImages { needed: 1, found: 0 });
    }
    if cfg.patience.is_some() && data.validation.is_empty() {
        return Err(Error::InvalidParameter("early stopping needs validation pairs".into()));
    }

    let mut active = vec![Trainable {
        stage,
        heads_only: cfg.freeze_backbone,
        optimizer: Adam::new(cfg.learning_rate),
    }];
    for s in Stage::ALL {
        if s < stage && !cfg.freeze.is_frozen(s) {
            active.push(Trainable {
                stage: s,
                heads_only: false,
                optimizer: Adam::new(cfg.learning_rate),
            });
        }
    }
    active.sort_by_key(|t| t.stage);

    let geometry = model.config.geometry.clone();
    let mut rng = stream(cfg.seed, &format!("train/{}", stage.module_name()));
    let mut cache: Vec<Option<PreparedImage>> = vec![None; data.samples.len()];
    let mut validation_cache: Vec<Option<PreparedImage>> = vec![None; data.samples.len()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut best: Option<(f64, ModelBundle)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let pairs: Vec<TrainPair> = batch.iter().map(|&i| data.train[i]).collect();
            let prepared = prepare_pairs(&pairs, data, &geometry, cfg, &mut rng, &mut cache);
            for t in &mut active {
                zero_module(model, t.stage);
            }
            let scale = 1.0 / pairs.len() as f64;
            let mut batch_loss = 0.0;
            for (pair, (p, q)) in pairs.iter().zip(&prepared) {
                let input = &data.samples[pair.input];
                let reference = &data.samples[pair.reference];
                for t in &active {
                    batch_loss += accumulate(model, t, p, q, input, reference, scale)?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: stage.number(),
                    epoch,
                    batch: batch_no + 1,
                });
            }
            for t in &mut active {
                step_module(model, t);
            }
            steps += 1;
            total += batch_loss;
        }
        let loss = total / data.train.len() as f64;

        let validation_loss = if data.validation.is_empty() {
            None
        } else {
            Some(evaluate_pairs(model, &active, data, &data.validation, &geometry, &mut validation_cache)?)
        };
        history.push(HistoryRecord {
            stage,
            epoch,
            loss,
            validation_loss,
            steps,
        });

        if let (Some(patience), Some(v)) = (cfg.patience, validation_loss) {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    if let Some((_, snapshot)) = best {
        *model = snapshot;
    }
    model.mark_completed(stage);
    Ok(history)
}

/// Mean per-pair loss of the given pairs, without augmentation or updates.
fn evaluate_pairs(
    model: &ModelBundle,
    active: &[Trainable],
    data: &TrainData,
    pairs: &[TrainPair],
    geometry: &Geometry,
    cache: &mut [Option<PreparedImage>],
) -> Result<f64> {
    let mut total = 0.0;
    for pair in pairs {
        for k in [pair.input, pair.reference] {
            if cache[k].is_none() {
                cache[k] = Some(Augmentation::IDENTITY.apply(&data.samples[k].image, geometry));
            }
        }
        let p = cache[pair.input].as_ref().expect("filled above");
        let q = cache[pair.reference].as_ref().expect("filled above");
        let input = &data.samples[pair.input];
        let reference = &data.samples[pair.reference];
        for t in active {
            total += stage_loss(model, t.stage, p, q, input, reference)?;
        }
    }
    Ok(total / pairs.len() as f64)
}

fn stage_loss(
    model: &ModelBundle,
    stage: Stage,
    p: &PreparedImage,
    q: &PreparedImage,
    input: &TrainSample,
    reference: &TrainSample,
) -> Result<f64> {
    Ok(match stage {
        Stage::Global => {
            let y = model.global.forward(&p.global, &q.global)?;
            loss_global(y.input, y.reference, y.relative, input.target, reference.target)
        }
        Stage::Local => {
            let y = model.local.forward(&p.patches, &q.patches)?;
            loss_local(y, input.target, reference.target)
        }
        Stage::Emotion => {
            let y = model.emotion.forward(&p.global)?;
            loss_emotion(y.target, y.assistant, y.difference, input.target, input.assistant)
        }
    })
}

/// Forward, loss and backward for one pair; gradients are scaled by `scale`
/// so a batch accumulates its mean.
fn accumulate(
    model: &mut ModelBundle,
    t: &Trainable,
    p: &PreparedImage,
    q: &PreparedImage,
    input: &TrainSample,
    reference: &TrainSample,
    scale: f64,
) -> Result<f64> {
    let (ti, tr, ta) = (input.target, reference.target, input.assistant);
    match t.stage {
        Stage::Global => {
            let (y, cache) = model.global.forward_cached(&p.global, &q.global)?;
            let [gi, gr, grel] = loss_global_grad(y.input, y.reference, y.relative, ti, tr);
            let grad = GlobalOutput {
                input: gi * scale,
                reference: gr * scale,
                relative: grel * scale,
            };
            model.global.backward(&cache, grad, t.heads_only);
            Ok(loss_global(y.input, y.reference, y.relative, ti, tr))
        }
        Stage::Local => {
            let (y, cache) = model.local.forward_cached(&p.patches, &q.patches)?;
            model.local.backward(&cache, loss_local_grad(y, ti, tr) * scale, t.heads_only);
            Ok(loss_local(y, ti, tr))
        }
        Stage::Emotion => {
            let (y, cache) = model.emotion.forward_cached(&p.global)?;
            let [gt, ga, gd] = loss_emotion_grad(y.target, y.assistant, y.difference, ti, ta);
            let grad = EmotionOutput {
                target: gt * scale,
                assistant: ga * scale,
                difference: gd * scale,
            };
            model.emotion.backward(&cache, grad, t.heads_only);
            Ok(loss_emotion(y.target, y.assistant, y.difference, ti, ta))
        }
    }
}

fn zero_module(model: &mut ModelBundle, stage: Stage) {
    match stage {
        Stage::Global => model.global.zero_grad(),
        Stage::Local => model.local.zero_grad(),
        Stage::Emotion => model.emotion.zero_grad(),
    }
}

fn step_module(model: &mut ModelBundle, t: &mut Trainable) {
    match t.stage {
        Stage::Global => t.optimizer.step(&mut model.global),
        Stage::Local => t.optimizer.step(&mut model.local),
        Stage::Emotion => t.optimizer.step(&mut model.emotion),
    }
}

/// Prepared input and reference for each pair. Augmentation parameters are
/// drawn sequentially so the stream does not depend on thread scheduling;
/// the image work itself may run in parallel.
fn prepare_pairs(
    pairs: &[TrainPair],
    data: &TrainData,
    geometry: &Geometry,
    cfg: &TrainConfig,
    rng: &mut StageRng,
    cache: &mut [Option<PreparedImage>],
) -> Vec<(PreparedImage, PreparedImage)> {
    if !cfg.augments() {
        for pair in pairs {
            for k in [pair.input, pair.reference] {
                if cache[k].is_none() {
                    cache[k] = Some(Augmentation::IDENTITY.apply(&data.samples[k].image, geometry));
                }
            }
        }
        return pairs
            .iter()
            .map(|pair| {
                (
                    cache[pair.input].clone().expect("filled above"),
                    cache[pair.reference].clone().expect("filled above"),
                )
            })
            .collect();
    }
    let jobs: Vec<(usize, Augmentation, usize, Augmentation)> = pairs
        .iter()
        .map(|pair| {
            let a = Augmentation::draw(cfg, rng);
            let b = Augmentation::draw(cfg, rng);
            (pair.input, a, pair.reference, b)
        })
        .collect();
    let run = |&(i, a, r, b): &(usize, Augmentation, usize, Augmentation)| {
        (
            a.apply(&data.samples[i].image, geometry),
            b.apply(&data.samples[r].image, geometry),
        )
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.iter().map(run).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::ConvNetSpec;
    use crate::ratings::Dimension;
    use image::Rgb;

    #[test]
    fn loss_examples_by_hand() {
        assert_eq!(loss_global(5.0, 4.0, 1.0, 4.0, 4.0), 2.0);
        assert_eq!(loss_global(4.5, 4.0, 0.5, 4.5, 4.0), 0.0);
        assert!((loss_local(0.5, 4.2, 4.0) - 0.09).abs() < 1e-12);
        assert_eq!(loss_local(0.5, 4.5, 4.0), 0.0);
        assert_eq!(loss_emotion(4.0, 5.0, 0.0, 4.0, 4.0), 1.0);
        assert_eq!(loss_emotion(4.0, 4.5, -0.5, 4.0, 4.5), 0.0);
    }

    #[test]
    fn local_loss_sign_symmetry() {
        let (tp, tq, y) = (4.7, 3.9, 0.3);
        assert_eq!(loss_local(y, tp, tq), loss_local(-y, tq, tp));
    }

    #[test]
    fn emotion_loss_is_separable() {
        let base = loss_emotion(4.0, 5.0, 0.2, 4.1, 3.7);
        let moved = loss_emotion(4.0, 5.5, 0.2, 4.1, 3.7);
        let delta = (5.5f64 - 3.7).powi(2) - (5.0f64 - 3.7).powi(2);
        assert!((moved - base - delta).abs() < 1e-12);
    }

    #[test]
    fn gradients_are_twice_residuals() {
        assert_eq!(loss_global_grad(5.0, 4.0, 1.0, 4.0, 4.0), [2.0, 0.0, 2.0]);
        assert!((loss_local_grad(0.5, 4.2, 4.0) - 0.6).abs() < 1e-12);
        assert_eq!(loss_emotion_grad(4.0, 5.0, 0.0, 4.0, 4.0), [0.0, 2.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { flip_prob: 1.5, ..TrainConfig::default() },
            TrainConfig { scale_range: (1.2, 0.8), ..TrainConfig::default() },
            TrainConfig { scale_range: (0.0, 1.0), ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn geometry() -> Geometry {
        Geometry {
            resize_short: 16,
            crop: 16,
            patch: 8,
            ..Geometry::default()
        }
    }

    fn gradient_image() -> RgbImage {
        RgbImage::from_fn(24, 16, |x, y| Rgb([(x * 10) as u8, (y * 15) as u8, 128]))
    }

    #[test]
    fn no_flip_means_no_mirror() {
        let cfg = TrainConfig {
            flip_prob: 0.0,
            scale_range: (1.0, 1.0),
            ..TrainConfig::default()
        };
        let img = gradient_image();
        let mut rng = stream(1, "t");
        let plain = Augmentation::IDENTITY.apply(&img, &geometry());
        for _ in 0..10 {
            assert_eq!(augment(&img, &geometry(), &cfg, &mut rng), plain);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = gradient_image();
        let once = working_view(&img, &geometry(), 1.0, true);
        assert_ne!(once, working_view(&img, &geometry(), 1.0, false));
        let twice = image::imageops::flip_horizontal(&once);
        assert_eq!(twice, working_view(&img, &geometry(), 1.0, false));
    }

    #[test]
    fn augmentation_stream_is_seeded() {
        let cfg = TrainConfig::default();
        let draws = |seed| {
            let mut rng = stream(seed, "train/global");
            (0..20).map(|_| Augmentation::draw(&cfg, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draws(3), draws(3));
        assert_ne!(draws(3), draws(4));
        assert!(draws(3).iter().all(|a| (0.75..=1.25).contains(&a.scale)));
    }

    #[test]
    fn holdout_partitions() {
        let ids: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let (t, v) = holdout(&ids, 0.2, &mut stream(0, "v"));
        assert_eq!((t.len(), v.len()), (8, 2));
        let mut all: Vec<String> = t.into_iter().chain(v).collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(all, want);
        assert_eq!(holdout(&ids, 0.0, &mut stream(0, "v")).1.len(), 0);
    }

    fn tiny_setup() -> (ModelBundle, TrainData) {
        let config = ModelConfig {
            backbone: ConvNetSpec {
                in_channels: 3,
                channels: vec![4],
                kernel: 3,
                stride: 2,
            },
            relative_hidden: None,
            difference_hidden: 4,
            geometry: geometry(),
        };
        let model = ModelBundle::new(Dimension::Beauty, config, 5).unwrap();
        let samples: Vec<TrainSample> = (0..4)
            .map(|k| TrainSample {
                image_id: format!("s{k}"),
                image: RgbImage::from_pixel(16, 16, Rgb([k as u8 * 60, 100, 30])),
                target: 3.0 + k as f64 * 0.5,
                assistant: 4.0,
            })
            .collect();
        let data = TrainData {
            samples,
            train: vec![TrainPair { input: 1, reference: 0 }, TrainPair { input: 2, reference: 0 }],
            validation: vec![TrainPair { input: 3, reference: 0 }],
        };
        (model, data)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e-2,
            scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stages_must_run_in_order() {
        let (mut model, data) = tiny_setup();
        let err = train_stage(Stage::Emotion, &mut model, &data, &quick()).unwrap_err();
        assert!(matches!(err, Error::MissingStage { stage: 3, missing: 1 }));
    }

    #[test]
    fn frozen_modules_do_not_move() {
        let (mut model, data) = tiny_setup();
        train_stage(Stage::Global, &mut model, &data, &quick()).unwrap();
        let global = model.global.snapshot();
        let emotion = model.emotion.snapshot();
        let local = model.local.snapshot();
        train_stage(Stage::Local, &mut model, &data, &quick()).unwrap();
        assert_eq!(model.global.snapshot(), global);
        assert_eq!(model.emotion.snapshot(), emotion);
        assert_ne!(model.local.snapshot(), local);
        assert_eq!(model.stages_completed, vec![Stage::Global, Stage::Local]);
    }

    #[test]
    fn unfrozen_prior_module_keeps_training() {
        let (mut model, data) = tiny_setup();
        train_stage(Stage::Global, &mut model, &data, &quick()).unwrap();
        let global = model.global.snapshot();
        let cfg = TrainConfig {
            freeze: FreezePolicy { global: false, ..FreezePolicy::default() },
            ..quick()
        };
        train_stage(Stage::Local, &mut model, &data, &cfg).unwrap();
        assert_ne!(model.global.snapshot(), global);
    }

    #[test]
    fn heads_only_leaves_backbone() {
        let (mut model, data) = tiny_setup();
        let before = model.global.backbone.snapshot();
        let cfg = TrainConfig { freeze_backbone: true, ..quick() };
        train_stage(Stage::Global, &mut model, &data, &cfg).unwrap();
        assert_eq!(model.global.backbone.snapshot(), before);
    }

    #[test]
    fn history_is_reproducible() {
        let run = || {
            let (mut model, data) = tiny_setup();
            let cfg = TrainConfig {
                scale_range: (0.9, 1.1),
                flip_prob: 0.5,
                ..quick()
            };
            let h = train_stage(Stage::Global, &mut model, &data, &cfg).unwrap();
            (h, model.global.snapshot())
        };
        let (a, wa) = run();
        let (b, wb) = run();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|r| r.validation_loss.is_some()));
        assert_eq!(a[2].steps, 3);
    }

    #[test]
    fn early_stopping_keeps_best_weights() {
        let (mut model, data) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 0.5,
            patience: Some(2),
            ..quick()
        };
        let h = train_stage(Stage::Global, &mut model, &data, &cfg).unwrap();
        let best = h
            .iter()
            .filter_map(|r| r.validation_loss)
            .fold(f64::INFINITY, f64::min);
        let input = &data.samples[3];
        let reference = &data.samples[0];
        let p = Augmentation::IDENTITY.apply(&input.image, &model.config.geometry);
        let q = Augmentation::IDENTITY.apply(&reference.image, &model.config.geometry);
        let now = stage_loss(&model, Stage::Global, &p, &q, input, reference).unwrap();
        assert_eq!(now, best);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (mut model, mut data) = tiny_setup();
        data.samples[1].target = f64::NAN;
        let err = train_stage(Stage::Global, &mut model, &data, &quick()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { stage: 1, epoch: 1, batch: 1 }));
        assert!(model.stages_completed.is_empty());
    }

    fn module_mut(model: &mut ModelBundle, stage: Stage) -> &mut dyn Parameters {
        match stage {
            Stage::Global => &mut model.global,
            Stage::Local => &mut model.local,
            Stage::Emotion => &mut model.emotion,
        }
    }

    /// Analytic gradients of each stage loss against central differences,
    /// over every parameter of the active module.
    #[test]
    fn module_gradients_match_finite_differences() {
        let (mut model, data) = tiny_setup();
        let input = TrainSample {
            image: gradient_image(),
            ..data.samples[2].clone()
        };
        let reference = TrainSample {
            image: RgbImage::from_fn(24, 16, |x, y| Rgb([200 - (y * 9) as u8, (x * 7) as u8, (x * y) as u8])),
            ..data.samples[0].clone()
        };
        let geometry = model.config.geometry.clone();
        let p = Augmentation::IDENTITY.apply(&input.image, &geometry);
        let q = Augmentation::IDENTITY.apply(&reference.image, &geometry);
        for stage in Stage::ALL {
            let t = Trainable {
                stage,
                heads_only: false,
                optimizer: Adam::new(0.0),
            };
            zero_module(&mut model, stage);
            accumulate(&mut model, &t, &p, &q, &input, &reference, 1.0).unwrap();
            let mut analytic = Vec::new();
            module_mut(&mut model, stage).visit(&mut |prm| analytic.extend_from_slice(prm.grad()));

            let eps = 1e-6;
            let mut numeric = Vec::with_capacity(analytic.len());
            for k in 0..analytic.len() {
                let nudge = |delta: f64, model: &mut ModelBundle| {
                    let mut seen = 0;
                    module_mut(model, stage).visit_mut(&mut |prm| {
                        if (seen..seen + prm.len()).contains(&k) {
                            prm.value[k - seen] += delta;
                        }
                        seen += prm.len();
                    });
                };
                nudge(eps, &mut model);
                let up = stage_loss(&model, stage, &p, &q, &input, &reference).unwrap();
                nudge(-2.0 * eps, &mut model);
                let down = stage_loss(&model, stage, &p, &q, &input, &reference).unwrap();
                nudge(eps, &mut model);
                numeric.push((up - down) / (2.0 * eps));
            }
            for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let scale = a.abs().max(n.abs()).max(1.0);
                assert!((a - n).abs() <= 1e-4 * scale, "{stage} param {k}: analytic {a} numeric {n}");
            }
            assert!(analytic.iter().any(|g| *g != 0.0));
        }
    }
}
