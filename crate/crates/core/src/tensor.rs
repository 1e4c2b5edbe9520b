//! Dense channel-major (C×H×W) feature maps and image-to-tensor conversion.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ImageNet channel statistics used by the pretrained backbones.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor3 { data, ..*self })
    }

    /// Global average pooling: one mean per channel.
    pub fn mean_pool(&self) -> Vec<f64> {
        let area = (self.height * self.width) as f64;
        self.data
            .chunks(self.height * self.width)
            .map(|plane| plane.iter().sum::<f64>() / area)
            .collect()
    }

    /// Gradient of [`Tensor3::mean_pool`]: spreads each channel's gradient evenly.
    pub fn mean_pool_backward(grad: &[f64], height: usize, width: usize) -> Tensor3 {
        let area = (height * width) as f64;
        let data = grad
            .iter()
            .flat_map(|g| std::iter::repeat_n(g / area, height * width))
            .collect();
        Tensor3 {
            channels: grad.len(),
            height,
            width,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Tensor3 {
    /// Converts an RGB image into a normalized 3×H×W tensor.
    pub fn from_rgb(image: &RgbImage) -> Self {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut out = Tensor3::zeros(3, h, w);
        for (x, y, px) in image.enumerate_pixels() {
            for c in 0..3 {
                let v = f64::from(px[c]) / 255.0;
                let i = out.index(c, y as usize, x as usize);
                out.data[i] = (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        out
    }
}
