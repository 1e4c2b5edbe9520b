use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Param, Parameters};
use crate::error::{Error, Result};
use crate::rng::StageRng;
use crate::tensor::Tensor3;

/// 2-D convolution with square kernels, zero padding and a per-output bias.
/// Weights are laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut StageRng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    pub fn from_weights(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weight.len() != out_channels * in_channels * kernel * kernel || bias.len() != out_channels {
            return Err(Error::Shape("convolution weights do not match the declared geometry".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let span = |n: usize| {
            (n + 2 * self.padding)
                .checked_sub(self.kernel)
                .map(|d| d / self.stride + 1)
        };
        match (span(height), span(width)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(Error::Shape(format!(
                "{height}x{width} input is too small for a {k}x{k} kernel",
                k = self.kernel
            ))),
        }
    }

    #[inline]
    fn w_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    /// Input coordinate that kernel tap `k` of output position `o` reads.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&v| v < limit)
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.output_size(h, w)?;
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        let xd = x.data();
        let od = out.data_mut();
        for o in 0..self.out_channels {
            let plane = &mut od[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(self.bias.value[o]);
            for i in 0..self.in_channels {
                let xin = &xd[i * h * w..(i + 1) * h * w];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let wv = self.weight.value[self.w_index(o, i, ky, kx)];
                        for oy in 0..oh {
                            let Some(iy) = self.source(oy, ky, h) else { continue };
                            for ox in 0..ow {
                                if let Some(ix) = self.source(ox, kx, w) {
                                    plane[oy * ow + ox] += wv * xin[iy * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor3, grad_out: &Tensor3, want_input_grad: bool) -> Option<Tensor3> {
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = (grad_out.height(), grad_out.width());
        let mut grad_in = want_input_grad.then(|| Tensor3::zeros(self.in_channels, h, w));
        let xd = x.data();
        let gd = grad_out.data();
        for o in 0..self.out_channels {
            let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
            self.bias.grad_mut()[o] += gplane.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let xin = &xd[i * h * w..(i + 1) * h * w];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let wi = self.w_index(o, i, ky, kx);
                        let wv = self.weight.value[wi];
                        let mut gw = 0.0;
                        for oy in 0..oh {
                            let Some(iy) = self.source(oy, ky, h) else { continue };
                            for ox in 0..ow {
                                let Some(ix) = self.source(ox, kx, w) else { continue };
                                let g = gplane[oy * ow + ox];
                                gw += g * xin[iy * w + ix];
                                if let Some(gi) = grad_in.as_mut() {
                                    gi.data_mut()[(i * h + iy) * w + ix] += g * wv;
                                }
                            }
                        }
                        self.weight.grad_mut()[wi] += gw;
                    }
                }
            }
        }
        grad_in
    }
}

impl Parameters for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Shape of a plain conv → ReLU stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    /// Output channels of each layer.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for ConvNetSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![16, 32, 64],
            kernel: 3,
            stride: 2,
        }
    }
}

impl ConvNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidParameter("backbone needs at least one non-empty layer".into()));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidParameter("backbone kernel and stride must be positive".into()));
        }
        Ok(())
    }
}

/// Convolutional feature extractor: every layer is followed by a ReLU and
/// the last activation is the feature map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvNet {
    pub layers: Vec<Conv2d>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvNetCache {
    /// `inputs[l]` is the input of layer `l`; `outputs[l]` its post-ReLU output.
    inputs: Vec<Tensor3>,
    outputs: Vec<Tensor3>,
}

impl ConvNetCache {
    pub fn features(&self) -> &Tensor3 {
        self.outputs.last().expect("non-empty network")
    }
}

fn relu_in_place(t: &mut Tensor3) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

impl ConvNet {
    pub fn new(spec: &ConvNetSpec, rng: &mut StageRng) -> Result<Self> {
        spec.validate()?;
        let mut in_ch = spec.in_channels;
        let layers = spec
            .channels
            .iter()
            .map(|&out| {
                let layer = Conv2d::new(in_ch, out, spec.kernel, spec.stride, spec.kernel / 2, rng);
                in_ch = out;
                layer
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Conv2d>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("backbone needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Shape("consecutive layers disagree on channel count".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
            relu_in_place(&mut cur);
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &Tensor3) -> Result<ConvNetCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut out = layer.forward(&cur)?;
            relu_in_place(&mut out);
            inputs.push(cur);
            cur = out.clone();
            outputs.push(out);
        }
        Ok(ConvNetCache { inputs, outputs })
    }

    /// Back-propagates a gradient on the feature map into layer parameters.
    pub fn backward(&mut self, cache: &ConvNetCache, grad_features: &Tensor3) {
        let mut grad = grad_features.clone();
        for l in (0..self.layers.len()).rev() {
            // ReLU: pass gradient only where the activation was positive.
            for (g, &a) in grad.data_mut().iter_mut().zip(cache.outputs[l].data()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            match self.layers[l].backward(&cache.inputs[l], &grad, l > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
    }
}

impl Parameters for ConvNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}
