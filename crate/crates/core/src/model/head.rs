//! Deep-feature enhancement, pooling and the scalar regressor.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::layers::{global_avg_pool, ChannelNorm, Conv1x1, Dropout, DwConv, Linear, Mode};
use crate::ops::{gelu, relu};
use crate::params::ParamBuilder;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CaeConfig {
    pub in_channels: usize,
    pub expansion: usize,
    pub dropout_rate: f64,
}

/// Enhancement of the deepest backbone map:
/// `LN(Dropout(pw3(DW5(pw2(DW3(GELU(pw1(F))))))) + F`.
pub struct Cae {
    pub expand: Conv1x1,
    pub dw3: DwConv,
    pub shrink: Conv1x1,
    pub dw5: DwConv,
    pub refine: Conv1x1,
    pub dropout: Dropout,
    pub norm: ChannelNorm,
}

impl Cae {
    pub fn new(pb: &ParamBuilder, cfg: &CaeConfig, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout_rate) {
            return Err(Error::Validation(format!("dropout rate {} outside [0, 1)", cfg.dropout_rate)));
        }
        let c = cfg.in_channels;
        let mid = c * cfg.expansion;
        Ok(Self {
            expand: Conv1x1::new(&pb.pp("expand"), c, mid)?,
            dw3: DwConv::new(&pb.pp("dw3"), mid, 3, 1)?,
            shrink: Conv1x1::new(&pb.pp("shrink"), mid, c)?,
            dw5: DwConv::new(&pb.pp("dw5"), c, 5, 1)?,
            refine: Conv1x1::new(&pb.pp("refine"), c, c)?,
            dropout: Dropout::new(cfg.dropout_rate, rng),
            norm: ChannelNorm::new(&pb.pp("norm"), c)?,
        })
    }

    /// The pre-normalization map `C_ref`.
    pub fn refined(&self, f4: &Tensor, mode: Mode) -> Result<Tensor> {
        let mid = self.shrink.forward(&self.dw3.forward(&gelu(&self.expand.forward(f4)?)?)?)?;
        self.dropout.forward(&self.refine.forward(&self.dw5.forward(&mid)?)?, mode)
    }

    pub fn forward(&self, f4: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok((self.norm.forward(&self.refined(f4, mode)?)? + f4)?)
    }
}

/// Global average pooling of both maps, concatenated as `[cae | aff]`.
pub fn pool_and_concat(f_cae: &Tensor, f_aff: &Tensor) -> Result<Tensor> {
    let (b0, ..) = f_cae.dims4()?;
    let (b1, ..) = f_aff.dims4()?;
    if b0 != b1 {
        return Err(Error::Shape(format!("batch sizes differ: {b0} vs {b1}")));
    }
    Ok(Tensor::cat(&[global_avg_pool(f_cae)?, global_avg_pool(f_aff)?], 1)?)
}

/// `W2 · ReLU(W1 · v + b1) + b2`, one unbounded score per row.
pub struct Regressor {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Regressor {
    pub fn new(pb: &ParamBuilder, input_dim: usize, hidden_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), input_dim, hidden_dim)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden_dim, 1)?,
        })
    }

    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        let hidden = relu(&self.fc1.forward(v)?)?;
        Ok(self.fc2.forward(&hidden)?.squeeze(1)?)
    }
}
