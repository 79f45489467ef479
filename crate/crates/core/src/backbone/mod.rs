//! Frozen hierarchical backbone and the four-stage feature pyramid it emits.

mod swinv2;

use std::path::{Path, PathBuf};

use candle_core::{Device, DType, Tensor};
use serde::{Deserialize, Serialize};

pub use swinv2::{SwinV2, SwinV2Config};

use crate::{Error, Result};

pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Architecture identifier, e.g. `swinv2_t`.
    pub arch: String,
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub frozen: bool,
    /// Path of a safetensors weight file.
    pub pretrained_source: PathBuf,
}

impl BackboneSpec {
    pub fn new(arch: &str, pretrained_source: impl Into<PathBuf>) -> Result<Self> {
        let cfg = SwinV2Config::by_name(arch)
            .ok_or_else(|| Error::Validation(format!("unknown backbone architecture `{arch}`")))?;
        Ok(Self {
            arch: arch.to_string(),
            stage_channels: cfg.stage_channels(),
            stage_strides: STAGE_STRIDES,
            frozen: true,
            pretrained_source: pretrained_source.into(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.stage_channels.contains(&0) {
            problems.push("stage_channels must be positive".to_string());
        }
        let pow2_increasing = self.stage_strides.iter().all(|s| s.is_power_of_two())
            && self.stage_strides.windows(2).all(|w| w[0] < w[1]);
        if !pow2_increasing {
            problems.push(format!("stage_strides {:?} must be increasing powers of two", self.stage_strides));
        }
        if self.stage_strides != STAGE_STRIDES {
            problems.push(format!("stage_strides must be {STAGE_STRIDES:?}"));
        }
        match SwinV2Config::by_name(&self.arch) {
            Some(cfg) if cfg.stage_channels() != self.stage_channels => problems.push(format!(
                "stage_channels {:?} do not match `{}` ({:?})",
                self.stage_channels,
                self.arch,
                cfg.stage_channels()
            )),
            None => problems.push(format!("unknown backbone architecture `{}`", self.arch)),
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    /// Largest stride; input resolutions must be a multiple of it.
    pub fn max_stride(&self) -> usize {
        self.stage_strides[3]
    }
}

/// Stage outputs `F1..F4`, each `[B, C_i, R / stride_i, R / stride_i]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn batch(&self) -> usize {
        self.stages[0].dims()[0]
    }

    /// Checks stage count, channel widths and the halving of spatial dims.
    pub fn validate(&self, channels: &[usize; 4]) -> Result<()> {
        let mut prev: Option<(usize, usize)> = None;
        let b = self.batch();
        for (i, (t, &c)) in self.stages.iter().zip(channels).enumerate() {
            let (tb, tc, h, w) = t.dims4()?;
            if tb != b || tc != c {
                return Err(Error::Shape(format!(
                    "stage {} is {:?}, expected batch {b} with {c} channels",
                    i + 1,
                    t.shape()
                )));
            }
            if let Some((ph, pw)) = prev {
                if ph != 2 * h || pw != 2 * w {
                    return Err(Error::Shape(format!(
                        "stage {} spatial {h}x{w} does not halve {ph}x{pw}",
                        i + 1
                    )));
                }
            }
            prev = Some((h, w));
        }
        Ok(())
    }

    /// Selects batch rows, e.g. to assemble a mini-batch from cached pyramids.
    pub fn cat(items: &[&FeaturePyramid]) -> Result<FeaturePyramid> {
        let stage = |i: usize| -> Result<Tensor> {
            let parts: Vec<&Tensor> = items.iter().map(|p| &p.stages[i]).collect();
            Ok(Tensor::cat(&parts, 0)?)
        };
        Ok(FeaturePyramid {
            stages: [stage(0)?, stage(1)?, stage(2)?, stage(3)?],
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<FeaturePyramid> {
        let s = &self.stages;
        Ok(FeaturePyramid {
            stages: [
                s[0].to_dtype(dtype)?,
                s[1].to_dtype(dtype)?,
                s[2].to_dtype(dtype)?,
                s[3].to_dtype(dtype)?,
            ],
        })
    }
}

/// A frozen four-stage backbone. Implementations must be deterministic and
/// hold no trainable state.
pub trait Backbone {
    fn spec(&self) -> &BackboneSpec;
    fn forward(&self, x: &Tensor) -> Result<FeaturePyramid>;
    /// Digest of all weights, recorded in run logs.
    fn checksum(&self) -> Result<String>;
}

pub fn load_backbone(spec: &BackboneSpec, dtype: DType, device: &Device) -> Result<SwinV2> {
    spec.validate()?;
    SwinV2::load(spec.clone(), dtype, device)
}

/// Runs the backbone on a normalized `[B, 3, R, R]` batch and checks the pyramid contract.
pub fn extract_pyramid(x: &Tensor, backbone: &dyn Backbone) -> Result<FeaturePyramid> {
    let spec = backbone.spec();
    let (_, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
    }
    let stride = spec.max_stride();
    if h != w || h % stride != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} must be square with side divisible by {stride}"
        )));
    }
    let pyramid = backbone.forward(x)?;
    pyramid.validate(&spec.stage_channels)?;
    for (i, t) in pyramid.stages.iter().enumerate() {
        let side = h / spec.stage_strides[i];
        let (_, _, sh, sw) = t.dims4()?;
        if sh != side || sw != side {
            return Err(Error::Shape(format!(
                "stage {} is {sh}x{sw}, expected {side}x{side}",
                i + 1
            )));
        }
    }
    Ok(pyramid)
}

/// Writes deterministic stand-in weights for `arch` to `path`, for running the
/// pipeline without a downloaded checkpoint.
pub fn write_seeded_weights(arch: &str, seed: u64, path: &Path) -> Result<()> {
    let cfg = SwinV2Config::by_name(arch)
        .ok_or_else(|| Error::Validation(format!("unknown backbone architecture `{arch}`")))?;
    let tensors = cfg.seeded_weights(seed)?;
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}
