//! Swin Transformer V2 forward pass over a timm-layout safetensors file.
//!
//! Blocks use scaled cosine attention with a continuous relative position
//! bias and post-normalization. Stages whose resolution is not a multiple of
//! the window are zero-padded bottom/right; windows larger than the stage
//! shrink to the stage size and stop shifting.

use std::collections::HashMap;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Backbone, BackboneSpec, FeaturePyramid};
use crate::ops::{l2_normalize_last, softmax_last};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SwinV2Config {
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub num_heads: [usize; 4],
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub cpb_hidden: usize,
}

impl SwinV2Config {
    pub fn tiny() -> Self {
        Self {
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            num_heads: [3, 6, 12, 24],
            window_size: 8,
            mlp_ratio: 4,
            cpb_hidden: 512,
        }
    }

    /// Test-scale variant with 4/8/16/32 channels.
    pub fn pico() -> Self {
        Self {
            embed_dim: 4,
            depths: [2, 2, 2, 2],
            num_heads: [1, 1, 2, 2],
            window_size: 4,
            mlp_ratio: 2,
            cpb_hidden: 512,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "swinv2_t" | "swinv2_tiny" => Some(Self::tiny()),
            "swinv2_pico" => Some(Self::pico()),
            _ => None,
        }
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.embed_dim;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Parameter shapes in timm naming.
    fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let c0 = self.embed_dim;
        out.push(("patch_embed.proj.weight".into(), vec![c0, 3, 4, 4]));
        out.push(("patch_embed.proj.bias".into(), vec![c0]));
        out.push(("patch_embed.norm.weight".into(), vec![c0]));
        out.push(("patch_embed.norm.bias".into(), vec![c0]));
        for (i, &depth) in self.depths.iter().enumerate() {
            let c = c0 << i;
            let heads = self.num_heads[i];
            if i > 0 {
                out.push((format!("layers.{i}.downsample.reduction.weight"), vec![c, 2 * c]));
                out.push((format!("layers.{i}.downsample.norm.weight"), vec![c]));
                out.push((format!("layers.{i}.downsample.norm.bias"), vec![c]));
            }
            for j in 0..depth {
                let p = format!("layers.{i}.blocks.{j}");
                out.push((format!("{p}.attn.logit_scale"), vec![heads, 1, 1]));
                out.push((format!("{p}.attn.q_bias"), vec![c]));
                out.push((format!("{p}.attn.v_bias"), vec![c]));
                out.push((format!("{p}.attn.cpb_mlp.0.weight"), vec![self.cpb_hidden, 2]));
                out.push((format!("{p}.attn.cpb_mlp.0.bias"), vec![self.cpb_hidden]));
                out.push((format!("{p}.attn.cpb_mlp.2.weight"), vec![heads, self.cpb_hidden]));
                out.push((format!("{p}.attn.qkv.weight"), vec![3 * c, c]));
                out.push((format!("{p}.attn.proj.weight"), vec![c, c]));
                out.push((format!("{p}.attn.proj.bias"), vec![c]));
                out.push((format!("{p}.norm1.weight"), vec![c]));
                out.push((format!("{p}.norm1.bias"), vec![c]));
                out.push((format!("{p}.mlp.fc1.weight"), vec![self.mlp_ratio * c, c]));
                out.push((format!("{p}.mlp.fc1.bias"), vec![self.mlp_ratio * c]));
                out.push((format!("{p}.mlp.fc2.weight"), vec![c, self.mlp_ratio * c]));
                out.push((format!("{p}.mlp.fc2.bias"), vec![c]));
                out.push((format!("{p}.norm2.weight"), vec![c]));
                out.push((format!("{p}.norm2.bias"), vec![c]));
            }
        }
        out
    }

    /// Deterministic initialization in the style of a freshly constructed
    /// timm model: truncated-normal(0.02) linears, unit norms, zero biases.
    pub fn seeded_weights(&self, seed: u64) -> Result<HashMap<String, Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut out = HashMap::new();
        for (name, shape) in self.parameter_shapes() {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = if name.ends_with("logit_scale") {
                vec![10f64.ln(); n]
            } else if name.contains("norm") && name.ends_with("weight") {
                vec![1.0; n]
            } else if name.ends_with("bias") {
                vec![0.0; n]
            } else if name == "patch_embed.proj.weight" || name.contains("cpb_mlp") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let u = Uniform::new(-bound, bound);
                (0..n).map(|_| u.sample(&mut rng)).collect()
            } else {
                (0..n)
                    .map(|_| loop {
                        let v = normal.sample(&mut rng);
                        if v.abs() <= 0.04 {
                            break v;
                        }
                    })
                    .collect()
            };
            let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(DType::F32)?;
            out.insert(name, t);
        }
        Ok(out)
    }
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (k, o) = (dims[dims.len() - 1], w.dim(0)?);
    let rows = x.elem_count() / k;
    let mut out_dims = dims;
    *out_dims.last_mut().expect("non-scalar input") = o;
    let y = x.contiguous()?.reshape((rows, k))?.matmul(&w.t()?)?.reshape(out_dims)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

fn layer_norm_last(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc
        .broadcast_div(&(var + 1e-5)?.sqrt()?)?
        .broadcast_mul(w)?
        .broadcast_add(b)?)
}

struct Norm {
    w: Tensor,
    b: Tensor,
}

impl Norm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm_last(x, &self.w, &self.b)
    }
}

struct Block {
    dim: usize,
    heads: usize,
    qkv_w: Tensor,
    qkv_b: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    logit_scale: Tensor,
    cpb_w1: Tensor,
    cpb_b1: Tensor,
    cpb_w2: Tensor,
    norm1: Norm,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
    norm2: Norm,
    target_window: usize,
    shifted: bool,
}

/// Relative-coordinate table fed to the bias MLP, `[(2w-1)^2, 2]`.
fn relative_coords_table(window: usize) -> Vec<f64> {
    let span = 2 * window - 1;
    let denom = (window.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(span * span * 2);
    for dy in -(window as i64 - 1)..window as i64 {
        for dx in -(window as i64 - 1)..window as i64 {
            for v in [dy, dx] {
                let t = v as f64 / denom * 8.0;
                out.push(t.signum() * (t.abs() + 1.0).log2() / 8f64.log2());
            }
        }
    }
    out
}

fn relative_position_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let dy = (a / window) as i64 - (b / window) as i64 + window as i64 - 1;
            let dx = (a % window) as i64 - (b % window) as i64 + window as i64 - 1;
            idx.push((dy as usize * span + dx as usize) as u32);
        }
    }
    idx
}

/// `[nW, N, N]` additive mask for shifted windows over a padded `hp x wp` grid.
fn shift_mask(hp: usize, wp: usize, window: usize, shift: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let region = |v: usize, len: usize| -> usize {
        if v < len - window {
            0
        } else if v < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (hp / window, wp / window);
    let n = window * window;
    let mut mask = vec![0f64; nh * nw * n * n];
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let (y, x) = (wy * window + t / window, wx * window + t % window);
                    region(y, hp) * 3 + region(x, wp)
                })
                .collect();
            let base = (wy * nw + wx) * n * n;
            for a in 0..n {
                for b in 0..n {
                    if labels[a] != labels[b] {
                        mask[base + a * n + b] = -100.0;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (nh * nw, n, n), dev)?.to_dtype(dtype)?)
}

impl Block {
    fn window_and_shift(&self, h: usize, w: usize) -> (usize, usize) {
        let side = h.min(w);
        if side <= self.target_window {
            (side, 0)
        } else if self.shifted {
            (self.target_window, self.target_window / 2)
        } else {
            (self.target_window, 0)
        }
    }

    fn position_bias(&self, window: usize) -> Result<Tensor> {
        let dev = self.cpb_w1.device();
        let dtype = self.cpb_w1.dtype();
        let span = 2 * window - 1;
        let table = Tensor::from_vec(relative_coords_table(window), (span * span, 2), dev)?.to_dtype(dtype)?;
        let hidden = linear(&table, &self.cpb_w1, Some(&self.cpb_b1))?.relu()?;
        let bias_table = linear(&hidden, &self.cpb_w2, None)?; // [span^2, heads]
        let n = window * window;
        let index = Tensor::from_vec(relative_position_index(window), n * n, dev)?;
        let bias = bias_table
            .index_select(&index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?;
        Ok((crate::ops::sigmoid(&bias)? * 16.0)?)
    }

    /// Window attention on `[B, H, W, C]` tokens.
    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let (window, shift) = self.window_and_shift(h, w);
        let (hp, wp) = (h.div_ceil(window) * window, w.div_ceil(window) * window);
        // cyclic shift on the unpadded map, then pad; the mask covers the padded grid
        let mut xp = if shift > 0 { roll2d(x, shift as isize, h, w)? } else { x.clone() };
        if hp > h {
            xp = xp.pad_with_zeros(1, 0, hp - h)?;
        }
        if wp > w {
            xp = xp.pad_with_zeros(2, 0, wp - w)?;
        }
        let (nh, nw) = (hp / window, wp / window);
        let n = window * window;
        let windows = xp
            .reshape((b, nh, window, nw, window, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b * nh * nw, n, c))?;

        let head_dim = c / self.heads;
        let qkv = linear(&windows, &self.qkv_w, Some(&self.qkv_b))?
            .reshape((b * nh * nw, n, 3, self.heads, head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = l2_normalize_last(&qkv.i(0)?.contiguous()?, 1e-12)?;
        let k = l2_normalize_last(&qkv.i(1)?.contiguous()?, 1e-12)?;
        let v = qkv.i(2)?.contiguous()?;
        let scale = self.logit_scale.clamp(f64::NEG_INFINITY, 100f64.ln())?.exp()?;
        let mut attn = q
            .matmul(&k.t()?)?
            .broadcast_mul(&scale.unsqueeze(0)?)?
            .broadcast_add(&self.position_bias(window)?.unsqueeze(0)?)?;
        if shift > 0 {
            let mask = shift_mask(hp, wp, window, shift, attn.dtype(), attn.device())?;
            attn = attn
                .reshape((b, nh * nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((b * nh * nw, self.heads, n, n))?;
        }
        let out = softmax_last(&attn)?
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b * nh * nw, n, c))?;
        let out = linear(&out, &self.proj_w, Some(&self.proj_b))?
            .reshape((b, nh, nw, window, window, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, hp, wp, c))?;
        let out = out.narrow(1, 0, h)?.narrow(2, 0, w)?;
        let out = if shift > 0 { roll2d(&out, -(shift as isize), h, w)? } else { out };
        Ok(out.contiguous()?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        debug_assert_eq!(x.dim(3)?, self.dim);
        let x = (x + self.norm1.forward(&self.attention(x)?)?)?;
        let hidden = linear(&x, &self.fc1_w, Some(&self.fc1_b))?.gelu_erf()?;
        let mlp = linear(&hidden, &self.fc2_w, Some(&self.fc2_b))?;
        Ok((&x + self.norm2.forward(&mlp)?)?)
    }
}

/// Cyclic shift of a `[B, H, W, C]` map by `-shift` along both spatial axes
/// (i.e. `torch.roll(x, (-shift, -shift), (1, 2))` for positive `shift`).
fn roll2d(x: &Tensor, shift: isize, h: usize, w: usize) -> Result<Tensor> {
    let roll = |t: &Tensor, dim: usize, len: usize| -> Result<Tensor> {
        let s = shift.rem_euclid(len as isize) as usize;
        if s == 0 {
            return Ok(t.clone());
        }
        Ok(Tensor::cat(&[t.narrow(dim, s, len - s)?, t.narrow(dim, 0, s)?], dim)?)
    };
    let y = roll(x, 1, h)?;
    roll(&y, 2, w)
}

struct Merge {
    reduction: Tensor,
    norm: Norm,
}

impl Merge {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let x = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.norm.forward(&linear(&x, &self.reduction, None)?)
    }
}

struct Stage {
    downsample: Option<Merge>,
    blocks: Vec<Block>,
}

pub struct SwinV2 {
    spec: BackboneSpec,
    weights: HashMap<String, Tensor>,
    patch_w: Tensor,
    patch_b: Tensor,
    patch_norm: Norm,
    stages: Vec<Stage>,
}

impl SwinV2 {
    pub fn load(spec: BackboneSpec, dtype: DType, device: &Device) -> Result<Self> {
        let cfg = SwinV2Config::by_name(&spec.arch)
            .ok_or_else(|| Error::Weights(format!("unknown architecture `{}`", spec.arch)))?;
        let path = &spec.pretrained_source;
        if !path.is_file() {
            return Err(Error::Weights(format!("weight file {} not found", path.display())));
        }
        let raw = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
        let mut weights = HashMap::new();
        let mut problems = Vec::new();
        for (name, shape) in cfg.parameter_shapes() {
            match raw.get(&name) {
                Some(t) if t.dims() == shape.as_slice() => {
                    weights.insert(name, t.to_dtype(dtype)?);
                }
                Some(t) => problems.push(format!("{name}: shape {:?}, expected {shape:?}", t.dims())),
                None => problems.push(format!("{name}: missing")),
            }
        }
        if !problems.is_empty() {
            let shown: Vec<_> = problems.iter().take(5).cloned().collect();
            return Err(Error::Weights(format!(
                "{} does not match `{}` ({} problems: {})",
                path.display(),
                spec.arch,
                problems.len(),
                shown.join("; ")
            )));
        }
        let get = |n: &str| weights[n].clone();
        let norm = |p: &str| Norm {
            w: get(&format!("{p}.weight")),
            b: get(&format!("{p}.bias")),
        };
        let mut stages = Vec::new();
        for (i, &depth) in cfg.depths.iter().enumerate() {
            let c = cfg.embed_dim << i;
            let downsample = (i > 0).then(|| Merge {
                reduction: get(&format!("layers.{i}.downsample.reduction.weight")),
                norm: norm(&format!("layers.{i}.downsample.norm")),
            });
            let blocks = (0..depth)
                .map(|j| {
                    let p = format!("layers.{i}.blocks.{j}");
                    let q_bias = get(&format!("{p}.attn.q_bias"));
                    let v_bias = get(&format!("{p}.attn.v_bias"));
                    let qkv_b = Tensor::cat(&[&q_bias, &q_bias.zeros_like()?, &v_bias], 0)?;
                    Ok(Block {
                        dim: c,
                        heads: cfg.num_heads[i],
                        qkv_w: get(&format!("{p}.attn.qkv.weight")),
                        qkv_b,
                        proj_w: get(&format!("{p}.attn.proj.weight")),
                        proj_b: get(&format!("{p}.attn.proj.bias")),
                        logit_scale: get(&format!("{p}.attn.logit_scale")),
                        cpb_w1: get(&format!("{p}.attn.cpb_mlp.0.weight")),
                        cpb_b1: get(&format!("{p}.attn.cpb_mlp.0.bias")),
                        cpb_w2: get(&format!("{p}.attn.cpb_mlp.2.weight")),
                        norm1: norm(&format!("{p}.norm1")),
                        fc1_w: get(&format!("{p}.mlp.fc1.weight")),
                        fc1_b: get(&format!("{p}.mlp.fc1.bias")),
                        fc2_w: get(&format!("{p}.mlp.fc2.weight")),
                        fc2_b: get(&format!("{p}.mlp.fc2.bias")),
                        norm2: norm(&format!("{p}.norm2")),
                        target_window: cfg.window_size,
                        shifted: j % 2 == 1,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
        }
        Ok(Self {
            patch_w: get("patch_embed.proj.weight"),
            patch_b: get("patch_embed.proj.bias"),
            patch_norm: norm("patch_embed.norm"),
            spec,
            weights,
            stages,
        })
    }
}

impl Backbone for SwinV2 {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let c0 = self.patch_w.dim(0)?;
        let x = x
            .to_dtype(self.patch_w.dtype())?
            .conv2d(&self.patch_w, 0, 4, 1, 1)?
            .broadcast_add(&self.patch_b.reshape((1, c0, 1, 1))?)?;
        let mut x = self.patch_norm.forward(&x.permute((0, 2, 3, 1))?.contiguous()?)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(m) = &stage.downsample {
                x = m.forward(&x)?;
            }
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
            outs.push(x.permute((0, 3, 1, 2))?.contiguous()?);
        }
        let stages: [Tensor; 4] = outs
            .try_into()
            .map_err(|_| Error::Shape("backbone must produce four stages".into()))?;
        Ok(FeaturePyramid { stages })
    }

    fn checksum(&self) -> Result<String> {
        let mut names: Vec<&String> = self.weights.keys().collect();
        names.sort();
        crate::params::checksum(names.into_iter().map(|n| (n.as_str(), &self.weights[n])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_index_covers_table() {
        let idx = relative_position_index(4);
        assert_eq!(idx.len(), 256);
        assert_eq!(*idx.iter().max().unwrap() as usize, 7 * 7 - 1);
        // token paired with itself sits at the centre of the table
        assert_eq!(idx[0], (3 * 7 + 3) as u32);
    }

    #[test]
    fn roll_is_inverted_by_negative_roll() {
        let x = Tensor::arange(0f32, 32.0, &Device::Cpu).unwrap().reshape((1, 4, 4, 2)).unwrap();
        let y = roll2d(&roll2d(&x, 1, 4, 4).unwrap(), -1, 4, 4).unwrap();
        let d = (x - y).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn roll_moves_first_row_to_end() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu).unwrap().reshape((1, 4, 1, 1)).unwrap();
        let y = roll2d(&x, 1, 4, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn shift_mask_blocks_cross_region_pairs() {
        let m = shift_mask(8, 8, 4, 2, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.dims3().unwrap(), (4, 16, 16));
        // the first window lies entirely in one region
        let first = m.i(0).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(first, 0.0);
        let last = m.i(3).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(last > 0.0);
    }
}
