use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Param, Parameters};
use crate::error::{Error, Result};
use crate::rng::StageRng;

/// Fully connected layer, weights laid out `[out][in]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut StageRng) -> Self {
        let bound = (3.0 / inputs as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            inputs,
            outputs,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; outputs]),
        }
    }

    pub fn from_weights(inputs: usize, outputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::Shape("linear weights do not match the declared geometry".into()));
        }
        Ok(Self {
            inputs,
            outputs,
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .value
            .chunks(self.inputs)
            .zip(&self.bias.value)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        let n = self.inputs;
        for (o, &g) in grad_out.iter().enumerate() {
            self.bias.grad_mut()[o] += g;
            let gw = &mut self.weight.grad_mut()[o * n..(o + 1) * n];
            for (gwi, xi) in gw.iter_mut().zip(x) {
                *gwi += g * xi;
            }
            for (gi, w) in grad_in.iter_mut().zip(&self.weight.value[o * n..(o + 1) * n]) {
                *gi += g * w;
            }
        }
        grad_in
    }
}

impl Parameters for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Scalar regression head: a single linear map, or two layers with a ReLU
/// in between.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Linear { output: Linear },
    TwoLayer { hidden: Linear, output: Linear },
}

/// Hidden activation of a two-layer head (post-ReLU).
#[derive(Clone, Debug, Default)]
pub struct HeadCache {
    hidden: Option<Vec<f64>>,
}

impl Head {
    pub fn linear(inputs: usize, rng: &mut StageRng) -> Self {
        Head::Linear {
            output: Linear::new(inputs, 1, rng),
        }
    }

    pub fn two_layer(inputs: usize, hidden: usize, rng: &mut StageRng) -> Self {
        Head::TwoLayer {
            hidden: Linear::new(inputs, hidden, rng),
            output: Linear::new(hidden, 1, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            Head::Linear { output } => output.inputs,
            Head::TwoLayer { hidden, .. } => hidden.inputs,
        }
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &[f64]) -> (f64, HeadCache) {
        match self {
            Head::Linear { output } => (output.forward(x)[0], HeadCache::default()),
            Head::TwoLayer { hidden, output } => {
                let mut h = hidden.forward(x);
                h.iter_mut().for_each(|v| *v = v.max(0.0));
                let y = output.forward(&h)[0];
                (y, HeadCache { hidden: Some(h) })
            }
        }
    }

    /// Accumulates parameter gradients for `dy = dL/dy`; returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], cache: &HeadCache, dy: f64) -> Vec<f64> {
        match self {
            Head::Linear { output } => output.backward(x, &[dy]),
            Head::TwoLayer { hidden, output } => {
                let h = cache.hidden.as_ref().expect("two-layer head cache");
                let mut gh = output.backward(h, &[dy]);
                for (g, &a) in gh.iter_mut().zip(h) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                hidden.backward(x, &gh)
            }
        }
    }
}

impl Parameters for Head {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Head::Linear { output } => output.visit(f),
            Head::TwoLayer { hidden, output } => {
                hidden.visit(f);
                output.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Head::Linear { output } => output.visit_mut(f),
            Head::TwoLayer { hidden, output } => {
                hidden.visit_mut(f);
                output.visit_mut(f);
            }
        }
    }
}
