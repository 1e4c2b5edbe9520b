//! Emotion assistance: two parallel backbones produce a target-dimension map
//! and an assistant-dimension map; their difference feeds a two-layer head
//! that predicts the target-minus-assistant gap.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{ConvNet, ConvNetCache, Head, HeadCache, Param, Parameters};
use crate::tensor::Tensor3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmotionModule {
    pub target_backbone: ConvNet,
    pub assistant_backbone: ConvNet,
    /// One layer on the pooled target map.
    pub target_head: Head,
    /// One layer on the pooled assistant map.
    pub assistant_head: Head,
    /// Two layers on the pooled difference map.
    pub difference_head: Head,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EmotionOutput {
    /// Predicted score in the target dimension.
    pub target: f64,
    /// Predicted score in the assistant dimension.
    pub assistant: f64,
    /// Predicted target minus assistant.
    pub difference: f64,
}

/// Feature maps of one forward pass, exposed for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionTrace {
    pub target_map: Tensor3,
    pub assistant_map: Tensor3,
    /// `target_map − assistant_map`, elementwise.
    pub difference_map: Tensor3,
}

pub struct EmotionCache {
    target: ConvNetCache,
    assistant: ConvNetCache,
    target_pooled: Vec<f64>,
    assistant_pooled: Vec<f64>,
    difference_pooled: Vec<f64>,
    heads: [HeadCache; 3],
}

impl EmotionModule {
    pub fn forward(&self, input: &Tensor3) -> Result<EmotionOutput> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn trace(&self, input: &Tensor3) -> Result<EmotionTrace> {
        let target_map = self.target_backbone.forward(input)?;
        let assistant_map = self.assistant_backbone.forward(input)?;
        let difference_map = target_map.sub(&assistant_map)?;
        Ok(EmotionTrace {
            target_map,
            assistant_map,
            difference_map,
        })
    }

    pub fn forward_cached(&self, input: &Tensor3) -> Result<(EmotionOutput, EmotionCache)> {
        let target = self.target_backbone.forward_cached(input)?;
        let assistant = self.assistant_backbone.forward_cached(input)?;
        let difference_map = target.features().sub(assistant.features())?;
        let target_pooled = target.features().mean_pool();
        let assistant_pooled = assistant.features().mean_pool();
        let difference_pooled = difference_map.mean_pool();
        let (yt, ht) = self.target_head.forward_cached(&target_pooled);
        let (ya, ha) = self.assistant_head.forward_cached(&assistant_pooled);
        let (yd, hd) = self.difference_head.forward_cached(&difference_pooled);
        Ok((
            EmotionOutput {
                target: yt,
                assistant: ya,
                difference: yd,
            },
            EmotionCache {
                target,
                assistant,
                target_pooled,
                assistant_pooled,
                difference_pooled,
                heads: [ht, ha, hd],
            },
        ))
    }

    pub fn backward(&mut self, cache: &EmotionCache, grad: EmotionOutput, heads_only: bool) {
        let mut gt = self.target_head.backward(&cache.target_pooled, &cache.heads[0], grad.target);
        let mut ga = self
            .assistant_head
            .backward(&cache.assistant_pooled, &cache.heads[1], grad.assistant);
        let gd = self
            .difference_head
            .backward(&cache.difference_pooled, &cache.heads[2], grad.difference);
        if heads_only {
            return;
        }
        // pooling is linear, so d(diff map) routes +1 to the target map and −1 to the assistant map
        for k in 0..gd.len() {
            gt[k] += gd[k];
            ga[k] -= gd[k];
        }
        let f = cache.target.features();
        let gmap = Tensor3::mean_pool_backward(&gt, f.height(), f.width());
        self.target_backbone.backward(&cache.target, &gmap);
        let f = cache.assistant.features();
        let gmap = Tensor3::mean_pool_backward(&ga, f.height(), f.width());
        self.assistant_backbone.backward(&cache.assistant, &gmap);
    }
}

impl Parameters for EmotionModule {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.target_backbone.visit(f);
        self.assistant_backbone.visit(f);
        self.target_head.visit(f);
        self.assistant_head.visit(f);
        self.difference_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.target_backbone.visit_mut(f);
        self.assistant_backbone.visit_mut(f);
        self.target_head.visit_mut(f);
        self.assistant_head.visit_mut(f);
        self.difference_head.visit_mut(f);
    }
}
