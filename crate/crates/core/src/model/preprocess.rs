//! Input geometry: short-side scaling, centre crops and the five local patches.

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    /// Short side of the working view, before any augmentation scaling.
    pub resize_short: u32,
    /// Square crop fed to the global and emotion branches.
    pub crop: u32,
    /// Square size each local patch is resized to.
    pub patch: u32,
    /// Side fraction of the central patch.
    pub center_fraction: f64,
    /// Side fraction of each corner patch.
    pub corner_fraction: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            resize_short: 256,
            crop: 224,
            patch: 224,
            center_fraction: 0.5,
            corner_fraction: 0.4,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.resize_short == 0 || self.crop == 0 || self.patch == 0 {
            return Err(Error::InvalidParameter("geometry sizes must be positive".into()));
        }
        if self.crop > self.resize_short {
            return Err(Error::InvalidParameter(format!(
                "crop {} exceeds resize_short {}",
                self.crop, self.resize_short
            )));
        }
        for f in [self.center_fraction, self.corner_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidParameter(format!("patch fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Patch order: centre, top-left, top-right, bottom-left, bottom-right.
/// Sides are `round(fraction · side)`; the centre patch is offset by
/// `floor((side − patch) / 2)`; corner patches touch their corners.
pub fn patch_layout(width: u32, height: u32, center_fraction: f64, corner_fraction: f64) -> [PatchRect; 5] {
    let side = |n: u32, f: f64| ((f64::from(n) * f).round() as u32).clamp(1, n);
    let (cw, ch) = (side(width, center_fraction), side(height, center_fraction));
    let (kw, kh) = (side(width, corner_fraction), side(height, corner_fraction));
    let rect = |x, y, width, height| PatchRect { x, y, width, height };
    [
        rect((width - cw) / 2, (height - ch) / 2, cw, ch),
        rect(0, 0, kw, kh),
        rect(width - kw, 0, kw, kh),
        rect(0, height - kh, kw, kh),
        rect(width - kw, height - kh, kw, kh),
    ]
}

/// Resizes so that the shorter side equals `short`, keeping the aspect ratio.
pub fn scale_short_side(image: &RgbImage, short: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let s = f64::from(short) / f64::from(w.min(h));
    let (nw, nh) = if w <= h {
        (short, ((f64::from(h) * s).round() as u32).max(short))
    } else {
        (((f64::from(w) * s).round() as u32).max(short), short)
    };
    if (nw, nh) == (w, h) {
        return image.clone();
    }
    imageops::resize(image, nw, nh, FilterType::Triangle)
}

pub fn center_crop(image: &RgbImage, size: u32) -> RgbImage {
    let image = if image.width() < size || image.height() < size {
        scale_short_side(image, size)
    } else {
        image.clone()
    };
    let x = (image.width() - size) / 2;
    let y = (image.height() - size) / 2;
    imageops::crop_imm(&image, x, y, size, size).to_image()
}

/// Working view of an image: short side scaled to
/// `max(crop, round(resize_short · scale))`, optionally mirrored.
pub fn working_view(image: &RgbImage, geometry: &Geometry, scale: f64, flip: bool) -> RgbImage {
    let short = ((f64::from(geometry.resize_short) * scale).round() as u32).max(geometry.crop);
    let scaled = scale_short_side(image, short);
    if flip {
        imageops::flip_horizontal(&scaled)
    } else {
        scaled
    }
}

/// Network inputs derived from one working view.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub global: Tensor3,
    pub patches: Vec<Tensor3>,
}

pub fn prepare_view(view: &RgbImage, geometry: &Geometry) -> PreparedImage {
    let global = Tensor3::from_rgb(&center_crop(view, geometry.crop));
    let patches = patch_layout(view.width(), view.height(), geometry.center_fraction, geometry.corner_fraction)
        .iter()
        .map(|r| {
            let crop = imageops::crop_imm(view, r.x, r.y, r.width, r.height).to_image();
            let resized = imageops::resize(&crop, geometry.patch, geometry.patch, FilterType::Triangle);
            Tensor3::from_rgb(&resized)
        })
        .collect();
    PreparedImage { global, patches }
}

/// Deterministic preparation used for inference.
pub fn prepare(image: &RgbImage, geometry: &Geometry) -> PreparedImage {
    prepare_view(&working_view(image, geometry, 1.0, false), geometry)
}
