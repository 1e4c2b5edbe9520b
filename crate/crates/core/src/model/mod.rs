//! The assessment network: global comparison, local comparison and emotion
//! assistance, bundled for one target dimension.
//!
//! A checkpoint is a directory holding `manifest.json` plus one weight file
//! per module (`global.json`, `local.json`, `emotion.json`).

mod emotion;
mod global;
mod local;
pub mod preprocess;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use emotion::{EmotionCache, EmotionModule, EmotionOutput, EmotionTrace};
pub use global::{GlobalCache, GlobalModule, GlobalOutput};
pub use local::{LocalCache, LocalModule, PATCH_COUNT};
pub use preprocess::{Geometry, PreparedImage};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::nn::{ConvNet, ConvNetSpec, Head, Parameters};
use crate::ratings::Dimension;
use crate::rng::stream;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Training stage, one per module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Stage {
    Global = 1,
    Local = 2,
    Emotion = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Global, Stage::Local, Stage::Emotion];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn module_name(self) -> &'static str {
        match self {
            Stage::Global => "global",
            Stage::Local => "local",
            Stage::Emotion => "emotion",
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::Global),
            2 => Ok(Stage::Local),
            3 => Ok(Stage::Emotion),
            _ => Err(Error::InvalidParameter(format!("stage must be 1, 2 or 3, got {v}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.number(), self.module_name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Architecture shared by every backbone copy.
    pub backbone: ConvNetSpec,
    /// Hidden width of the relative heads; `None` makes them single linear maps.
    pub relative_hidden: Option<usize>,
    /// Hidden width of the two-layer difference head.
    pub difference_hidden: usize,
    pub geometry: Geometry,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: ConvNetSpec::default(),
            relative_hidden: None,
            difference_hidden: 256,
            geometry: Geometry::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.geometry.validate()?;
        if self.difference_hidden == 0 || self.relative_hidden == Some(0) {
            return Err(Error::InvalidParameter("head widths must be positive".into()));
        }
        Ok(())
    }

    pub fn backbone_id(&self) -> String {
        let b = &self.backbone;
        let chans: Vec<String> = std::iter::once(b.in_channels)
            .chain(b.channels.iter().copied())
            .map(|c| c.to_string())
            .collect();
        format!("convnet-{}-k{}s{}", chans.join("x"), b.kernel, b.stride)
    }

    fn relative_head(&self, inputs: usize, rng: &mut crate::rng::StageRng) -> Head {
        match self.relative_hidden {
            Some(h) => Head::two_layer(inputs, h, rng),
            None => Head::linear(inputs, rng),
        }
    }
}

/// Every sub-prediction made for one input/reference pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBreakdown {
    /// Global module, absolute score of the input.
    pub global_input: f64,
    /// Global module, absolute score of the reference.
    pub global_reference: f64,
    /// Global module, input minus reference.
    pub global_relative: f64,
    /// Local module, input minus reference.
    pub local_relative: f64,
    /// Emotion module, input score in the target dimension.
    pub emotion_target: f64,
    /// Emotion module, input score in the assistant dimension.
    pub emotion_assistant: f64,
    /// Emotion module, target minus assistant.
    pub emotion_difference: f64,
    /// Ground-truth target score of the retrieved reference.
    pub reference_score: f64,
}

impl PredictionBreakdown {
    pub fn values(&self) -> [f64; 8] {
        [
            self.global_input,
            self.global_reference,
            self.global_relative,
            self.local_relative,
            self.emotion_target,
            self.emotion_assistant,
            self.emotion_difference,
            self.reference_score,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelBundle {
    pub dimension: Dimension,
    pub config: ModelConfig,
    pub global: GlobalModule,
    pub local: LocalModule,
    pub emotion: EmotionModule,
    /// Stages trained so far, ascending.
    pub stages_completed: Vec<Stage>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    dimension: Dimension,
    backbone: String,
    config: ModelConfig,
    stages_completed: Vec<Stage>,
}

impl ModelBundle {
    /// Fresh weights; each module draws from its own seeded stream.
    pub fn new(dimension: Dimension, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = *config.backbone.channels.last().expect("validated");
        let mut rng = stream(seed, "model/global");
        let global = GlobalModule {
            backbone: ConvNet::new(&config.backbone, &mut rng)?,
            absolute: Head::linear(c, &mut rng),
            relative: config.relative_head(2 * c, &mut rng),
        };
        let mut rng = stream(seed, "model/local");
        let local = LocalModule {
            backbone: ConvNet::new(&config.backbone, &mut rng)?,
            relative: config.relative_head(2 * PATCH_COUNT * c, &mut rng),
        };
        let mut rng = stream(seed, "model/emotion");
        let emotion = EmotionModule {
            target_backbone: ConvNet::new(&config.backbone, &mut rng)?,
            assistant_backbone: ConvNet::new(&config.backbone, &mut rng)?,
            target_head: Head::linear(c, &mut rng),
            assistant_head: Head::linear(c, &mut rng),
            difference_head: Head::two_layer(c, config.difference_hidden, &mut rng),
        };
        Ok(Self {
            dimension,
            config,
            global,
            local,
            emotion,
            stages_completed: Vec::new(),
        })
    }

    pub fn module(&self, stage: Stage) -> &dyn Parameters {
        match stage {
            Stage::Global => &self.global,
            Stage::Local => &self.local,
            Stage::Emotion => &self.emotion,
        }
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        self.stages_completed.contains(&stage)
    }

    pub(crate) fn mark_completed(&mut self, stage: Stage) {
        if !self.has_completed(stage) {
            self.stages_completed.push(stage);
            self.stages_completed.sort();
        }
    }

    /// All sub-predictions for an input and its reference, in inference mode.
    pub fn predict(&self, input: &PreparedImage, reference: &PreparedImage, reference_score: f64) -> Result<PredictionBreakdown> {
        let g = self.global.forward(&input.global, &reference.global)?;
        let l = self.local.forward(&input.patches, &reference.patches)?;
        let e = self.emotion.forward(&input.global)?;
        Ok(PredictionBreakdown {
            global_input: g.input,
            global_reference: g.reference,
            global_relative: g.relative,
            local_relative: l,
            emotion_target: e.target,
            emotion_assistant: e.assistant,
            emotion_difference: e.difference,
            reference_score,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dimension: self.dimension,
            backbone: self.config.backbone_id(),
            config: self.config.clone(),
            stages_completed: self.stages_completed.clone(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        write_json(&dir.join("global.json"), &self.global)?;
        write_json(&dir.join("local.json"), &self.local)?;
        write_json(&dir.join("emotion.json"), &self.emotion)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: manifest.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        Ok(Self {
            dimension: manifest.dimension,
            config: manifest.config,
            global: read_json(&dir.join("global.json"))?,
            local: read_json(&dir.join("local.json"))?,
            emotion: read_json(&dir.join("emotion.json"))?,
            stages_completed: manifest.stages_completed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Linear};
    use crate::tensor::Tensor3;

    /// 1-channel stub: 2×2/stride-2 box sum, then a 1×1 conv `scale·x + shift`,
    /// each followed by ReLU.
    fn stub_backbone(scale: f64, shift: f64) -> ConvNet {
        ConvNet::from_layers(vec![
            Conv2d::from_weights(1, 1, 2, 2, 0, vec![1.0; 4], vec![0.0]).unwrap(),
            Conv2d::from_weights(1, 1, 1, 1, 0, vec![scale], vec![shift]).unwrap(),
        ])
        .unwrap()
    }

    fn linear(weights: Vec<f64>, bias: f64) -> Head {
        Head::Linear {
            output: Linear::from_weights(weights.len(), 1, weights, vec![bias]).unwrap(),
        }
    }

    fn ramp() -> Tensor3 {
        Tensor3::from_vec(1, 4, 4, (1..=16).map(f64::from).collect()).unwrap()
    }

    fn ones() -> Tensor3 {
        Tensor3::from_vec(1, 4, 4, vec![1.0; 16]).unwrap()
    }

    #[test]
    fn global_forward_by_hand() {
        // ramp: block sums 14, 22, 46, 54 -> 0.5x - 1 = 6, 10, 22, 26 -> mean 16
        // ones: block sums 4 -> 1 -> mean 1
        let m = GlobalModule {
            backbone: stub_backbone(0.5, -1.0),
            absolute: linear(vec![2.0], 1.0),
            relative: linear(vec![1.0, -1.0], 0.0),
        };
        let out = m.forward(&ramp(), &ones()).unwrap();
        assert_eq!(out, GlobalOutput { input: 33.0, reference: 3.0, relative: 15.0 });
        let swapped = m.forward(&ones(), &ramp()).unwrap();
        assert_eq!((swapped.input, swapped.reference), (3.0, 33.0));
    }

    #[test]
    fn siamese_branches_agree_on_identical_inputs() {
        let bundle = ModelBundle::new(Dimension::Beauty, toy_config(), 9).unwrap();
        let x = Tensor3::from_vec(3, 16, 16, (0..768).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect()).unwrap();
        let out = bundle.global.forward(&x, &x).unwrap();
        assert_eq!(out.input.to_bits(), out.reference.to_bits());
    }

    #[test]
    fn local_forward_by_hand() {
        // patch features: five copies of 16 for the input, five of 1 for the reference
        let m = LocalModule {
            backbone: stub_backbone(0.5, -1.0),
            relative: linear([vec![0.1; 5], vec![-0.1; 5]].concat(), 0.0),
        };
        let p = vec![ramp(); 5];
        let q = vec![ones(); 5];
        assert!((m.forward(&p, &q).unwrap() - 7.5).abs() < 1e-12);
        assert!(m.forward(&p[..4], &q).is_err());
    }

    #[test]
    fn emotion_forward_by_hand() {
        // target map 6, 10, 22, 26 (mean 16); assistant 0.25x: 3.5, 5.5, 11.5, 13.5 (mean 8.5)
        // difference mean 7.5 -> hidden relu([7.5, -7.5]) = [7.5, 0] -> 2·7.5 − 1 = 14
        let m = EmotionModule {
            target_backbone: stub_backbone(0.5, -1.0),
            assistant_backbone: stub_backbone(0.25, 0.0),
            target_head: linear(vec![1.0], 0.0),
            assistant_head: linear(vec![1.0], 0.5),
            difference_head: Head::TwoLayer {
                hidden: Linear::from_weights(1, 2, vec![1.0, -1.0], vec![0.0, 0.0]).unwrap(),
                output: Linear::from_weights(2, 1, vec![2.0, 3.0], vec![-1.0]).unwrap(),
            },
        };
        let out = m.forward(&ramp()).unwrap();
        assert_eq!(out, EmotionOutput { target: 16.0, assistant: 9.0, difference: 14.0 });
        let trace = m.trace(&ramp()).unwrap();
        assert_eq!(trace.difference_map.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert_eq!(trace.target_map.shape(), trace.difference_map.shape());
        assert_eq!(trace.assistant_map.shape(), trace.difference_map.shape());
    }

    #[test]
    fn identical_emotion_backbones_cancel() {
        let mut bundle = ModelBundle::new(Dimension::Beauty, toy_config(), 4).unwrap();
        bundle.emotion.assistant_backbone = bundle.emotion.target_backbone.clone();
        let x = Tensor3::from_vec(3, 16, 16, (0..768).map(|i| (i % 13) as f64 / 6.0 - 1.0).collect()).unwrap();
        let trace = bundle.emotion.trace(&x).unwrap();
        assert!(trace.difference_map.data().iter().all(|&v| v == 0.0));
        let c = bundle.emotion.target_backbone.out_channels();
        let on_zero = bundle.emotion.difference_head.forward(&vec![0.0; c]);
        assert_eq!(bundle.emotion.forward(&x).unwrap().difference, on_zero);
    }

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            backbone: ConvNetSpec {
                in_channels: 3,
                channels: vec![4, 6],
                kernel: 3,
                stride: 2,
            },
            relative_hidden: None,
            difference_hidden: 8,
            geometry: Geometry {
                resize_short: 16,
                crop: 16,
                patch: 8,
                ..Geometry::default()
            },
        }
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = ModelBundle::new(Dimension::Happy, toy_config(), 1).unwrap();
        let b = ModelBundle::new(Dimension::Happy, toy_config(), 1).unwrap();
        let c = ModelBundle::new(Dimension::Happy, toy_config(), 2).unwrap();
        for stage in Stage::ALL {
            assert_eq!(a.module(stage).snapshot(), b.module(stage).snapshot());
            assert_ne!(a.module(stage).snapshot(), c.module(stage).snapshot());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ModelBundle::new(Dimension::Happy, toy_config(), 3).unwrap();
        a.mark_completed(Stage::Global);
        a.save(dir.path()).unwrap();
        let b = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(b.dimension, Dimension::Happy);
        assert_eq!(b.stages_completed, vec![Stage::Global]);
        for stage in Stage::ALL {
            assert_eq!(a.module(stage).snapshot(), b.module(stage).snapshot());
        }
    }

    #[test]
    fn stage_numbers() {
        assert_eq!(Stage::try_from(2).unwrap(), Stage::Local);
        assert!(Stage::try_from(4).is_err());
    }
}
