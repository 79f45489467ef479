//! Per-stage perception block: deformable refinement followed by a local
//! channel-attention branch and a global normalization/multi-kernel branch,
//! summed into a common fusion width.

use candle_core::{Tensor, D};

use super::layers::{ChannelNorm, Conv1x1, DeformConv, DwConv, Mode};
use crate::ops::{gelu, l2_normalize_last, softmax_last};
use crate::params::{Init, ParamBuilder};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CmpStageConfig {
    pub in_channels: usize,
    pub fusion_channels: usize,
    pub local_dilation: usize,
    pub global_reduction: usize,
    pub multiscale_kernels: [usize; 3],
    pub dcn_kernel: usize,
    pub dcn_modulated: bool,
}

impl CmpStageConfig {
    pub fn new(in_channels: usize, fusion_channels: usize) -> Self {
        Self {
            in_channels,
            fusion_channels,
            local_dilation: 2,
            global_reduction: 4,
            multiscale_kernels: [5, 7, 9],
            dcn_kernel: 3,
            dcn_modulated: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.global_reduction == 0 || !self.in_channels.is_multiple_of(self.global_reduction) {
            bad.push(format!(
                "in_channels {} not divisible by global_reduction {}",
                self.in_channels, self.global_reduction
            ));
        }
        if self.multiscale_kernels.iter().any(|k| k % 2 == 0) {
            bad.push(format!("multiscale_kernels {:?} must be odd", self.multiscale_kernels));
        }
        if self.dcn_kernel.is_multiple_of(2) {
            bad.push("dcn_kernel must be odd".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }
}

/// `GELU(LayerNorm(DeformConv(F)))`.
pub struct DcnRefine {
    pub dcn: DeformConv,
    pub norm: ChannelNorm,
}

impl DcnRefine {
    pub fn new(pb: &ParamBuilder, cfg: &CmpStageConfig) -> Result<Self> {
        let c = cfg.in_channels;
        Ok(Self {
            dcn: DeformConv::new(&pb.pp("dcn"), c, c, cfg.dcn_kernel, 1, cfg.dcn_modulated)?,
            norm: ChannelNorm::new(&pb.pp("norm"), c)?,
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        gelu(&self.norm.forward(&self.dcn.forward(f)?)?).map_err(Into::into)
    }
}

/// Channel attention: channels are tokens, spatial positions are features.
pub struct LocalBranch {
    pub qkv: Conv1x1,
    pub qkv_dw: DwConv,
    pub proj: Conv1x1,
}

impl LocalBranch {
    pub fn new(pb: &ParamBuilder, cfg: &CmpStageConfig) -> Result<Self> {
        let c = cfg.in_channels;
        Ok(Self {
            qkv: Conv1x1::new(&pb.pp("qkv"), c, 3 * c)?,
            qkv_dw: DwConv::new(&pb.pp("qkv_dw"), 3 * c, 3, cfg.local_dilation)?,
            proj: Conv1x1::new(&pb.pp("proj"), c, cfg.fusion_channels)?,
        })
    }

    /// Output and the row-stochastic attention matrix `[B, C, C]`.
    pub fn forward_with_attention(&self, d: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = d.dims4()?;
        if h * w == 0 {
            return Err(Error::Shape("local branch needs a non-empty spatial map".into()));
        }
        let qkv = self.qkv_dw.forward(&self.qkv.forward(d)?)?.reshape((b, 3 * c, h * w))?;
        let q = l2_normalize_last(&qkv.narrow(1, 0, c)?, 1e-12)?;
        let k = l2_normalize_last(&qkv.narrow(1, c, c)?, 1e-12)?;
        let v = qkv.narrow(1, 2 * c, c)?;
        let attn = attention_matrix(&q, &k)?;
        let attended = attn.matmul(&v.contiguous()?)?.reshape((b, c, h, w))?;
        let out = self.proj.forward(&(attended + d)?)?;
        Ok((out, attn))
    }

    pub fn forward(&self, d: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(d)?.0)
    }
}

/// `softmax(Q Kᵀ / sqrt(d))` over the key axis, `d` = number of channel tokens.
pub fn attention_matrix(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.dim(1)? as f64;
    let logits = (q.matmul(&k.t()?)? / d.sqrt())?;
    Ok(softmax_last(&logits)?)
}

/// Intermediate maps of the global branch, exposed for inspection.
pub struct GlobalTrace {
    pub phi: Tensor,
    pub reduced: Tensor,
    pub branches: [Tensor; 3],
    pub mixed: Tensor,
    pub out: Tensor,
}

pub struct GlobalBranch {
    pub lambda: Tensor,
    pub beta: Tensor,
    pub p: Tensor,
    pub px: Tensor,
    pub eps: f64,
    pub reduce: Conv1x1,
    pub kernels: [DwConv; 3],
    pub restore: Conv1x1,
    pub proj: Conv1x1,
}

impl GlobalBranch {
    pub fn new(pb: &ParamBuilder, cfg: &CmpStageConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.in_channels;
        let r = c / cfg.global_reduction;
        let [k0, k1, k2] = cfg.multiscale_kernels;
        Ok(Self {
            lambda: pb.get(&[c], "lambda", Init::Const(1.0))?,
            beta: pb.get(&[c], "beta", Init::Zeros)?,
            p: pb.get(&[c], "p", Init::Const(1.0))?,
            px: pb.get(&[c], "px", Init::Const(1.0))?,
            eps: 1e-5,
            reduce: Conv1x1::new(&pb.pp("reduce"), c, r)?,
            kernels: [
                DwConv::new(&pb.pp(format!("dw{k0}")), r, k0, 1)?,
                DwConv::new(&pb.pp(format!("dw{k1}")), r, k1, 1)?,
                DwConv::new(&pb.pp(format!("dw{k2}")), r, k2, 1)?,
            ],
            restore: Conv1x1::new(&pb.pp("restore"), r, c)?,
            proj: Conv1x1::new(&pb.pp("proj"), c, cfg.fusion_channels)?,
        })
    }

    /// `(λ (D − μ) / sqrt(υ² + ε) + β) · P + D · Pₓ` with per-channel spatial statistics.
    pub fn normalize(&self, d: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = d.dims4()?;
        let flat = d.reshape((b, c, h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let per_channel = |t: &Tensor| t.reshape((1, c, 1));
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&per_channel(&self.lambda)?)?
            .broadcast_add(&per_channel(&self.beta)?)?
            .broadcast_mul(&per_channel(&self.p)?)?;
        let phi = (normed + flat.broadcast_mul(&per_channel(&self.px)?)?)?;
        Ok(phi.reshape((b, c, h, w))?)
    }

    pub fn forward_traced(&self, d: &Tensor) -> Result<GlobalTrace> {
        let phi = self.normalize(d)?;
        let reduced = self.reduce.forward(&phi)?;
        let branches = [
            self.kernels[0].forward(&reduced)?,
            self.kernels[1].forward(&reduced)?,
            self.kernels[2].forward(&reduced)?,
        ];
        let mixed = ((&branches[0] + &branches[1])? + &branches[2])?.affine(1.0 / 3.0, 0.0)?;
        let out = self.proj.forward(&(self.restore.forward(&mixed)? + d)?)?;
        Ok(GlobalTrace { phi, reduced, branches, mixed, out })
    }

    pub fn forward(&self, d: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(d)?.out)
    }
}

pub struct CmpStage {
    pub refine: DcnRefine,
    pub local: LocalBranch,
    pub global: GlobalBranch,
    pub in_channels: usize,
}

pub struct CmpTrace {
    pub refined: Tensor,
    pub local: Tensor,
    pub attention: Tensor,
    pub global: GlobalTrace,
    pub out: Tensor,
}

impl CmpStage {
    pub fn new(pb: &ParamBuilder, cfg: &CmpStageConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            refine: DcnRefine::new(&pb.pp("refine"), cfg)?,
            local: LocalBranch::new(&pb.pp("local"), cfg)?,
            global: GlobalBranch::new(&pb.pp("global"), cfg)?,
            in_channels: cfg.in_channels,
        })
    }

    fn check(&self, f: &Tensor) -> Result<()> {
        let c = f.dims4()?.1;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "perception stage expects {} channels, got {c}",
                self.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward_traced(&self, f: &Tensor) -> Result<CmpTrace> {
        self.check(f)?;
        let refined = self.refine.forward(f)?;
        let (local, attention) = self.local.forward_with_attention(&refined)?;
        let global = self.global.forward_traced(&refined)?;
        let out = (&local + &global.out)?;
        Ok(CmpTrace { refined, local, attention, global, out })
    }

    pub fn forward(&self, f: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check(f)?;
        let refined = super::layers::boundary(self.refine.forward(f)?, mode);
        let local = super::layers::boundary(self.local.forward(&refined)?, mode);
        let global = self.global.forward(&refined)?;
        Ok((local + global)?)
    }
}

/// Stage block, or the 1x1 projection used when the block is ablated.
pub enum Perception {
    Full(CmpStage),
    Projection(Conv1x1),
}

impl Perception {
    pub fn forward(&self, f: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Perception::Full(s) => s.forward(f, mode),
            Perception::Projection(p) => p.forward(f),
        }
    }
}
