//! Top-down pyramid fusion with spatially gated refinement at each merge.

use candle_core::Tensor;

use super::layers::{boundary, Conv1x1, DeformConv, DwConv, Mode};
use crate::ops::upsample_bilinear2x;
use crate::params::ParamBuilder;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SdaConfig {
    pub channels: usize,
    pub gate_dwconv_kernel: usize,
    pub gate_dcn_kernel: usize,
    /// Channel groups of the gating deformable conv; `channels` makes it depthwise.
    pub gate_dcn_groups: usize,
    pub dcn_modulated: bool,
}

impl SdaConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gate_dwconv_kernel: 3,
            gate_dcn_kernel: 3,
            gate_dcn_groups: channels,
            dcn_modulated: true,
        }
    }
}

/// Spatial gating unit: `proj(gate(DCN(DW(F'))) ⊙ F') + F` with `F' = input(F)`.
pub struct Sda {
    pub input: Conv1x1,
    pub dw: DwConv,
    pub dcn: DeformConv,
    pub gate: Conv1x1,
    pub output: Conv1x1,
    pub channels: usize,
}

impl Sda {
    pub fn new(pb: &ParamBuilder, cfg: &SdaConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            input: Conv1x1::new(&pb.pp("input"), c, c)?,
            dw: DwConv::new(&pb.pp("dw"), c, cfg.gate_dwconv_kernel, 1)?,
            dcn: DeformConv::new(&pb.pp("dcn"), c, c, cfg.gate_dcn_kernel, cfg.gate_dcn_groups, cfg.dcn_modulated)?,
            gate: Conv1x1::new(&pb.pp("gate"), c, c)?,
            output: Conv1x1::new(&pb.pp("output"), c, c)?,
            channels: c,
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let c = f.dims4()?.1;
        if c != self.channels {
            return Err(Error::Shape(format!("gating unit expects {} channels, got {c}", self.channels)));
        }
        let fp = self.input.forward(f)?;
        let u = self.dcn.forward(&self.dw.forward(&fp)?)?;
        let gated = (self.gate.forward(&u)? * &fp)?;
        Ok((self.output.forward(&gated)? + f)?)
    }
}

pub enum Refiner {
    Gated(Box<Sda>),
    Identity,
}

impl Refiner {
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        match self {
            Refiner::Gated(s) => s.forward(f),
            Refiner::Identity => Ok(f.clone()),
        }
    }
}

/// Three refiners applied at the 4→3, 3→2 and 2→1 merges.
pub struct Aff {
    pub refiners: [Refiner; 3],
}

impl Aff {
    pub fn new(pb: &ParamBuilder, cfg: &SdaConfig, gated: bool) -> Result<Self> {
        let make = |name: &str| -> Result<Refiner> {
            Ok(if gated {
                Refiner::Gated(Box::new(Sda::new(&pb.pp(name), cfg)?))
            } else {
                Refiner::Identity
            })
        };
        Ok(Self {
            refiners: [make("sda43")?, make("sda32")?, make("sda21")?],
        })
    }

    /// Fuses `[F1, F2, F3, F4]` (strides 4..32) into a stride-4 map.
    pub fn forward(&self, maps: &[Tensor; 4], mode: Mode) -> Result<Tensor> {
        for i in 0..3 {
            let (b0, c0, h0, w0) = maps[i].dims4()?;
            let (b1, c1, h1, w1) = maps[i + 1].dims4()?;
            if b0 != b1 || c0 != c1 || h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(Error::Shape(format!(
                    "fusion inputs {:?} and {:?} do not halve",
                    maps[i].shape(),
                    maps[i + 1].shape()
                )));
            }
        }
        let mut deep = maps[3].clone();
        for (step, shallow) in [2usize, 1, 0].into_iter().enumerate() {
            let merged = (&maps[shallow] + upsample_bilinear2x(&deep)?)?;
            deep = boundary(self.refiners[step].forward(&merged)?, mode);
        }
        Ok(deep)
    }
}
