//! Global comparison: a Siamese backbone scores input and reference with a
//! shared absolute head, and a relative head reads both pooled vectors.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{ConvNet, ConvNetCache, Head, HeadCache, Param, Parameters};
use crate::tensor::Tensor3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GlobalModule {
    /// Used for both branches, so the two branches share weights by construction.
    pub backbone: ConvNet,
    pub absolute: Head,
    /// Reads `[pool(p), pool(q)]`.
    pub relative: Head,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GlobalOutput {
    /// Absolute score of the input.
    pub input: f64,
    /// Absolute score of the reference.
    pub reference: f64,
    /// Input minus reference.
    pub relative: f64,
}

pub struct GlobalCache {
    input: ConvNetCache,
    reference: ConvNetCache,
    input_pooled: Vec<f64>,
    reference_pooled: Vec<f64>,
    pair: Vec<f64>,
    abs_input: HeadCache,
    abs_reference: HeadCache,
    rel: HeadCache,
}

impl GlobalModule {
    pub fn forward(&self, input: &Tensor3, reference: &Tensor3) -> Result<GlobalOutput> {
        Ok(self.forward_cached(input, reference)?.0)
    }

    pub fn forward_cached(&self, input: &Tensor3, reference: &Tensor3) -> Result<(GlobalOutput, GlobalCache)> {
        let ci = self.backbone.forward_cached(input)?;
        let cr = self.backbone.forward_cached(reference)?;
        let pi = ci.features().mean_pool();
        let pr = cr.features().mean_pool();
        let pair: Vec<f64> = pi.iter().chain(&pr).copied().collect();
        let (yi, ai) = self.absolute.forward_cached(&pi);
        let (yr, ar) = self.absolute.forward_cached(&pr);
        let (yrel, rc) = self.relative.forward_cached(&pair);
        Ok((
            GlobalOutput {
                input: yi,
                reference: yr,
                relative: yrel,
            },
            GlobalCache {
                input: ci,
                reference: cr,
                input_pooled: pi,
                reference_pooled: pr,
                pair,
                abs_input: ai,
                abs_reference: ar,
                rel: rc,
            },
        ))
    }

    /// Accumulates gradients given `dL/d(output)`. With `heads_only`, the
    /// backbone receives nothing.
    pub fn backward(&mut self, cache: &GlobalCache, grad: GlobalOutput, heads_only: bool) {
        let mut gi = self.absolute.backward(&cache.input_pooled, &cache.abs_input, grad.input);
        let mut gr = self.absolute.backward(&cache.reference_pooled, &cache.abs_reference, grad.reference);
        let gpair = self.relative.backward(&cache.pair, &cache.rel, grad.relative);
        let c = gi.len();
        for k in 0..c {
            gi[k] += gpair[k];
            gr[k] += gpair[c + k];
        }
        if heads_only {
            return;
        }
        for (g, fc) in [(gi, &cache.input), (gr, &cache.reference)] {
            let f = fc.features();
            let gmap = Tensor3::mean_pool_backward(&g, f.height(), f.width());
            self.backbone.backward(fc, &gmap);
        }
    }
}

impl Parameters for GlobalModule {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit(f);
        self.absolute.visit(f);
        self.relative.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        self.absolute.visit_mut(f);
        self.relative.visit_mut(f);
    }
}
