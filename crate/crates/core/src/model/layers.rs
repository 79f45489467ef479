//! Parameterized building blocks shared by the fusion modules.

use std::cell::RefCell;

use candle_core::{Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ops::{channel_layer_norm, conv2d_same, deform_conv2d, depthwise_conv2d, depthwise_deform_conv2d, sigmoid, DeformGeometry};
use crate::params::{Init, ParamBuilder};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// In evaluation mode intermediate maps are cut from the autodiff graph so
/// that large inputs do not retain every activation.
pub(crate) fn boundary(t: Tensor, mode: Mode) -> Tensor {
    match mode {
        Mode::Train => t,
        Mode::Eval => t.detach(),
    }
}

/// Pointwise convolution, weight `[O, C]`, bias `[O]`.
pub struct Conv1x1 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv1x1 {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[cout, cin], "weight", Init::FanIn(cin))?,
            bias: pb.get(&[cout], "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (o, ci) = self.weight.dims2()?;
        if ci != c {
            return Err(Error::Shape(format!("1x1 conv expects {ci} channels, got {c}")));
        }
        let y = self
            .weight
            .broadcast_matmul(&x.reshape((b, c, h * w))?)?
            .broadcast_add(&self.bias.reshape((1, o, 1))?)?;
        Ok(y.reshape((b, o, h, w))?)
    }
}

/// Depthwise `k x k` convolution with bias, "same" padding.
pub struct DwConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

impl DwConv {
    pub fn new(pb: &ParamBuilder, channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[channels, 1, kernel, kernel], "weight", Init::FanIn(kernel * kernel))?,
            bias: pb.get(&[channels], "bias", Init::Zeros)?,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        Ok(depthwise_conv2d(x, &self.weight, self.dilation)?.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalization over channels at each spatial location.
pub struct ChannelNorm {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ChannelNorm {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[channels], "weight", Init::Const(1.0))?,
            bias: pb.get(&[channels], "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(channel_layer_norm(x, &self.weight, &self.bias, 1e-5)?)
    }
}

/// Fully connected layer on `[B, N]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[cout, cin], "weight", Init::FanIn(cin))?,
            bias: pb.get(&[cout], "bias", Init::FanIn(cin))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, n) = x.dims2()?;
        let (_, cin) = self.weight.dims2()?;
        if n != cin {
            return Err(Error::Shape(format!("linear layer expects {cin} inputs, got {n}")));
        }
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Deformable convolution whose offsets (and modulation) come from a plain
/// convolution over the same input. The predictor starts at zero, giving
/// zero offsets and unit modulation (`2 * sigmoid(0)`).
pub struct DeformConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub offset_weight: Tensor,
    pub offset_bias: Tensor,
    pub groups: usize,
    pub modulated: bool,
    pub geometry: DeformGeometry,
}

impl DeformConv {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize, kernel: usize, groups: usize, modulated: bool) -> Result<Self> {
        if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::Validation(format!(
                "deformable conv: {cin}->{cout} channels not divisible into {groups} groups"
            )));
        }
        let geometry = DeformGeometry::same(kernel, 1);
        let k = geometry.taps();
        let pred = if modulated { 3 * k } else { 2 * k };
        let fan_in = cin / groups * k;
        Ok(Self {
            weight: pb.get(&[cout, cin / groups, kernel, kernel], "weight", Init::FanIn(fan_in))?,
            bias: pb.get(&[cout], "bias", Init::Zeros)?,
            offset_weight: pb.get(&[pred, cin, kernel, kernel], "offset.weight", Init::Zeros)?,
            offset_bias: pb.get(&[pred], "offset.bias", Init::Zeros)?,
            groups,
            modulated,
            geometry,
        })
    }

    /// Returns `(offsets [B, 2K, H, W], modulation [B, K, H, W])`.
    pub fn sampling(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let k = self.geometry.taps();
        let pred = conv2d_same(x, &self.offset_weight, 1)?
            .broadcast_add(&self.offset_bias.reshape((1, (), 1, 1))?)?;
        let offset = pred.narrow(1, 0, 2 * k)?;
        let mask = if self.modulated {
            (sigmoid(&pred.narrow(1, 2 * k, k)?)? * 2.0)?
        } else {
            let (b, _, h, w) = x.dims4()?;
            Tensor::ones((b, k, h, w), x.dtype(), x.device())?
        };
        Ok((offset, mask))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let cin = self.offset_weight.dim(1)?;
        if c != cin {
            return Err(Error::Shape(format!("deformable conv expects {cin} channels, got {c}")));
        }
        let (offset, mask) = self.sampling(x)?;
        let out = self.weight.dim(0)?;
        let y = if self.groups == c && out == c {
            depthwise_deform_conv2d(x, &offset, &mask, &self.weight, self.geometry)?
        } else {
            deform_conv2d(x, &offset, &mask, &self.weight, self.groups, self.geometry)?
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, out, 1, 1))?)?)
    }
}

/// Inverted dropout with a seeded mask stream.
pub struct Dropout {
    pub rate: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng: RefCell::new(rng) }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let n = x.elem_count();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Global average pooling `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.mean(D::Minus1)?)
}
