//! Local comparison: pooled features of the five patches of input and
//! reference, concatenated, feed a relative head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvNet, ConvNetCache, Head, HeadCache, Param, Parameters};
use crate::tensor::Tensor3;

pub const PATCH_COUNT: usize = 5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalModule {
    pub backbone: ConvNet,
    /// Reads `[p_0 .. p_4, q_0 .. q_4]`, one pooled vector per patch.
    pub relative: Head,
}

pub struct LocalCache {
    patches: Vec<ConvNetCache>,
    features: Vec<f64>,
    head: HeadCache,
}

impl LocalModule {
    pub fn forward(&self, input: &[Tensor3], reference: &[Tensor3]) -> Result<f64> {
        Ok(self.forward_cached(input, reference)?.0)
    }

    pub fn forward_cached(&self, input: &[Tensor3], reference: &[Tensor3]) -> Result<(f64, LocalCache)> {
        if input.len() != PATCH_COUNT || reference.len() != PATCH_COUNT {
            return Err(Error::Shape(format!(
                "local comparison needs {PATCH_COUNT} patches per image, got {} and {}",
                input.len(),
                reference.len()
            )));
        }
        let mut patches = Vec::with_capacity(2 * PATCH_COUNT);
        let mut features = Vec::new();
        for patch in input.iter().chain(reference) {
            let cache = self.backbone.forward_cached(patch)?;
            features.extend(cache.features().mean_pool());
            patches.push(cache);
        }
        let (y, head) = self.relative.forward_cached(&features);
        Ok((
            y,
            LocalCache {
                patches,
                features,
                head,
            },
        ))
    }

    pub fn backward(&mut self, cache: &LocalCache, grad: f64, heads_only: bool) {
        let g = self.relative.backward(&cache.features, &cache.head, grad);
        if heads_only {
            return;
        }
        let c = self.backbone.out_channels();
        for (k, pc) in cache.patches.iter().enumerate() {
            let f = pc.features();
            let gmap = Tensor3::mean_pool_backward(&g[k * c..(k + 1) * c], f.height(), f.width());
            self.backbone.backward(pc, &gmap);
        }
    }
}

impl Parameters for LocalModule {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit(f);
        self.relative.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        self.relative.visit_mut(f);
    }
}
