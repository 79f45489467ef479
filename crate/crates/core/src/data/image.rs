use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::ops::resize_bilinear;
use crate::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Equirectangular,
    Planar,
}

/// Decoded RGB raster, channel-interleaved `H x W x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub source_kind: SourceKind,
    pub source_path: PathBuf,
}

impl ErpImage {
    pub fn new(pixels: Vec<f32>, height: usize, width: usize, source_kind: SourceKind, source_path: PathBuf) -> Result<Self> {
        let img = Self {
            pixels,
            height,
            width,
            source_kind,
            source_path,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation(format!("image {}x{} is empty", self.height, self.width)));
        }
        if self.pixels.len() != self.height * self.width * 3 {
            return Err(Error::Validation(format!(
                "{} values for a {}x{}x3 image",
                self.pixels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(v) = self.pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!(
                "pixel value {v} in {} outside [0, 1]",
                self.source_path.display()
            )));
        }
        Ok(())
    }

    /// Decodes a PNG/JPEG file. A 2:1 aspect ratio marks an equirectangular panorama.
    pub fn open(path: &Path) -> Result<Self> {
        let img = ::image::open(path)
            .map_err(|e| Error::Image {
                path: path.into(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        let kind = if w == 2 * h {
            SourceKind::Equirectangular
        } else {
            SourceKind::Planar
        };
        Self::new(pixels, h, w, kind, path.into())
    }

    /// Planar `[3, H, W]` copy of the pixels.
    pub fn planes(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Validation("pixel buffer size mismatch".into()))?;
        buf.save(path).map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_resolution: usize,
    pub normalization_mean: [f32; 3],
    pub normalization_std: [f32; 3],
}

impl PreprocessConfig {
    pub fn new(target_resolution: usize) -> Self {
        Self {
            target_resolution,
            normalization_mean: IMAGENET_MEAN,
            normalization_std: IMAGENET_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_resolution == 0 || !self.target_resolution.is_multiple_of(32) {
            return Err(Error::Validation(format!(
                "target resolution {} must be a positive multiple of 32",
                self.target_resolution
            )));
        }
        if self.normalization_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Validation("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// Bilinear resize to `R x R` (aspect ratio not kept), then per-channel
/// `(x - mean) / std`. Returns `[3, R, R]`.
pub fn preprocess(image: &ErpImage, cfg: &PreprocessConfig) -> Result<Tensor> {
    cfg.validate()?;
    image.validate()?;
    let r = cfg.target_resolution;
    let mut planes = resize_bilinear(&image.planes(), 3, image.height, image.width, r, r);
    for (c, plane) in planes.chunks_exact_mut(r * r).enumerate() {
        let (m, s) = (cfg.normalization_mean[c], cfg.normalization_std[c]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    if planes.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite value after preprocessing {}", image.source_path.display())));
    }
    Ok(Tensor::from_vec(planes, (3, r, r), &Device::Cpu)?)
}

/// Inverse of the normalization step; returns planar `[3, R, R]` values.
pub fn denormalize(x: &Tensor, cfg: &PreprocessConfig) -> Result<Vec<f32>> {
    let (c, h, w) = x.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut v = x.flatten_all()?.to_vec1::<f32>()?;
    for (ch, plane) in v.chunks_exact_mut(h * w).enumerate() {
        let (m, s) = (cfg.normalization_mean[ch], cfg.normalization_std[ch]);
        plane.iter_mut().for_each(|p| *p = *p * s + m);
    }
    Ok(v)
}
