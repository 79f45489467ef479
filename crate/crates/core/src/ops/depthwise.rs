use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

use super::{ensure_float, storage_slice, tensor_vec, Real};

/// Depthwise `k x k` convolution, stride one, "same" zero padding.
struct Depthwise {
    dilation: usize,
}

struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Depthwise {
    fn dims(&self, x: &Shape, weight: &Shape) -> Result<Dims> {
        let (b, c, h, w) = x.dims4()?;
        let (wc, one, kh, kw) = weight.dims4()?;
        if wc != c || one != 1 || kh != kw || kh % 2 == 0 {
            bail!("depthwise conv: weight {weight:?} does not fit input {x:?}")
        }
        Ok(Dims {
            b,
            c,
            h,
            w,
            k: kh,
            pad: self.dilation * (kh - 1) / 2,
        })
    }

    /// Valid output column range for kernel column `kx`.
    fn span(&self, d: &Dims, kx: usize) -> (usize, usize, isize) {
        let shift = (kx * self.dilation) as isize - d.pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((d.w as isize - shift).min(d.w as isize)).max(0) as usize;
        (lo, hi.max(lo), shift)
    }

    fn fwd<T: Real>(&self, d: &Dims, x: &[T], weight: &[T]) -> Result<(CpuStorage, Shape)> {
        let hw = d.h * d.w;
        let mut out = vec![T::zero(); d.b * d.c * hw];
        for bc in 0..d.b * d.c {
            let ci = bc % d.c;
            let src = &x[bc * hw..][..hw];
            let dst = &mut out[bc * hw..][..hw];
            for ky in 0..d.k {
                let dy = (ky * self.dilation) as isize - d.pad as isize;
                for kx in 0..d.k {
                    let wv = weight[(ci * d.k + ky) * d.k + kx];
                    let (lo, hi, dx) = self.span(d, kx);
                    for oy in 0..d.h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let row_in = &src[iy as usize * d.w..][..d.w];
                        let row_out = &mut dst[oy * d.w..][..d.w];
                        for ox in lo..hi {
                            row_out[ox] += wv * row_in[(ox as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        Ok((T::to_cpu_storage_owned(out), Shape::from((d.b, d.c, d.h, d.w))))
    }

    fn bwd_typed<T: Real>(&self, x: &Tensor, weight: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.dims(x.shape(), weight.shape())?;
        let hw = d.h * d.w;
        let (xv, wv, gv) = (
            tensor_vec::<T>(x)?,
            tensor_vec::<T>(weight)?,
            tensor_vec::<T>(grad)?,
        );
        let mut gx = vec![T::zero(); xv.len()];
        let mut gw = vec![T::zero(); wv.len()];
        for bc in 0..d.b * d.c {
            let ci = bc % d.c;
            let src = &xv[bc * hw..][..hw];
            let g = &gv[bc * hw..][..hw];
            let gsrc = &mut gx[bc * hw..][..hw];
            for ky in 0..d.k {
                let dy = (ky * self.dilation) as isize - d.pad as isize;
                for kx in 0..d.k {
                    let widx = (ci * d.k + ky) * d.k + kx;
                    let wt = wv[widx];
                    let (lo, hi, dx) = self.span(&d, kx);
                    let mut acc = T::zero();
                    for oy in 0..d.h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let base_in = iy as usize * d.w;
                        let row_g = &g[oy * d.w..][..d.w];
                        for ox in lo..hi {
                            let ix = base_in + (ox as isize + dx) as usize;
                            acc += row_g[ox] * src[ix];
                            gsrc[ix] += row_g[ox] * wt;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
        Ok((
            Tensor::from_vec(gx, x.shape(), x.device())?,
            Tensor::from_vec(gw, weight.shape(), x.device())?,
        ))
    }
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = self.dims(l1.shape(), l2.shape())?;
        match s1 {
            CpuStorage::F32(_) => self.fwd::<f32>(&d, storage_slice(s1, l1)?, storage_slice(s2, l2)?),
            CpuStorage::F64(_) => self.fwd::<f64>(&d, storage_slice(s1, l1)?, storage_slice(s2, l2)?),
            s => Err(candle_core::Error::UnsupportedDTypeForOp(s.dtype(), "depthwise-conv2d")),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (gx, gw) = match x.dtype() {
            candle_core::DType::F32 => self.bwd_typed::<f32>(x, weight, grad)?,
            _ => self.bwd_typed::<f64>(x, weight, grad)?,
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Depthwise convolution with kernel `[C, 1, k, k]` (odd `k`), stride one and
/// padding `dilation * (k - 1) / 2`, so the spatial size is preserved.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, dilation: usize) -> Result<Tensor> {
    ensure_float(x.dtype(), "depthwise-conv2d")?;
    if dilation == 0 {
        bail!("depthwise conv: dilation must be positive")
    }
    x.contiguous()?
        .apply_op2(&weight.contiguous()?, Depthwise { dilation })
}
