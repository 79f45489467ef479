//! Modulated deformable convolution.
//!
//! Offsets follow the usual `(dy, dx)` per-tap channel layout: channel `2k`
//! holds the vertical shift of tap `k` (row-major over the kernel window) and
//! channel `2k + 1` the horizontal one. Samples falling outside the input are
//! zero; bilinear corners outside the input contribute zero.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp3, Layout, Result, Shape, Tensor};

use super::{ensure_float, storage_slice, tensor_vec, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl DeformGeometry {
    /// Stride one with "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < span || pw < span || self.stride == 0 {
            return None;
        }
        Some(((ph - span) / self.stride + 1, (pw - span) / self.stride + 1))
    }
}

/// Bilinear sampling plan of one batch element, indexed by `tap * L + pixel`.
struct Plan<T> {
    idx: Vec<[usize; 4]>,
    wt: Vec<[T; 4]>,
    dy: Vec<[T; 4]>,
    dx: Vec<[T; 4]>,
}

impl<T: Real> Plan<T> {
    fn build(offset: &[T], geo: &DeformGeometry, h: usize, w: usize, ho: usize, wo: usize) -> Self {
        let l = ho * wo;
        let k = geo.taps();
        let zero = [T::zero(); 4];
        let mut plan = Plan {
            idx: vec![[0usize; 4]; k * l],
            wt: vec![zero; k * l],
            dy: vec![zero; k * l],
            dx: vec![zero; k * l],
        };
        let one = T::one();
        let (hf, wf) = (cast::<T>(h as f64), cast::<T>(w as f64));
        let pad = cast::<T>(geo.padding as f64);
        for tap in 0..k {
            let (ky, kx) = (tap / geo.kernel, tap % geo.kernel);
            for oy in 0..ho {
                for ox in 0..wo {
                    let p = oy * wo + ox;
                    let slot = tap * l + p;
                    let y = cast::<T>((oy * geo.stride + ky * geo.dilation) as f64) - pad
                        + offset[2 * tap * l + p];
                    let x = cast::<T>((ox * geo.stride + kx * geo.dilation) as f64) - pad
                        + offset[(2 * tap + 1) * l + p];
                    if !(y > -one && y < hf && x > -one && x < wf) {
                        continue;
                    }
                    let (y0, x0) = (y.floor(), x.floor());
                    let (ly, lx) = (y - y0, x - x0);
                    let (hy, hx) = (one - ly, one - lx);
                    let (y0, x0) = (y0.to_isize().unwrap_or(-1), x0.to_isize().unwrap_or(-1));
                    let corners = [
                        (y0, x0, hy * hx, -hx, -hy),
                        (y0, x0 + 1, hy * lx, -lx, hy),
                        (y0 + 1, x0, ly * hx, hx, -ly),
                        (y0 + 1, x0 + 1, ly * lx, lx, ly),
                    ];
                    for (j, &(cy, cx, wt, dy, dx)) in corners.iter().enumerate() {
                        if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                            plan.idx[slot][j] = cy as usize * w + cx as usize;
                            plan.wt[slot][j] = wt;
                            plan.dy[slot][j] = dy;
                            plan.dx[slot][j] = dx;
                        }
                    }
                }
            }
        }
        plan
    }

    #[inline]
    fn sample(&self, slot: usize, plane: &[T]) -> T {
        let (i, w) = (&self.idx[slot], &self.wt[slot]);
        w[0] * plane[i[0]] + w[1] * plane[i[1]] + w[2] * plane[i[2]] + w[3] * plane[i[3]]
    }

    #[inline]
    fn slopes(&self, slot: usize, plane: &[T]) -> (T, T) {
        let (i, a, b) = (&self.idx[slot], &self.dy[slot], &self.dx[slot]);
        let v = [plane[i[0]], plane[i[1]], plane[i[2]], plane[i[3]]];
        (
            a[0] * v[0] + a[1] * v[1] + a[2] * v[2] + a[3] * v[3],
            b[0] * v[0] + b[1] * v[1] + b[2] * v[2] + b[3] * v[3],
        )
    }

    #[inline]
    fn scatter(&self, slot: usize, coef: T, grad_plane: &mut [T]) {
        let (i, w) = (&self.idx[slot], &self.wt[slot]);
        for j in 0..4 {
            grad_plane[i[j]] += coef * w[j];
        }
    }
}

fn cast<T: Real>(v: f64) -> T {
    T::from(v).expect("finite cast")
}

struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn check_dims(
    geo: &DeformGeometry,
    x: &Shape,
    offset: &Shape,
    mask: &Shape,
    mask_channels_first: bool,
) -> Result<Dims> {
    let (b, c, h, w) = x.dims4()?;
    let Some((ho, wo)) = geo.output_hw(h, w) else {
        bail!("deformable conv: input {h}x{w} smaller than the kernel window")
    };
    let k = geo.taps();
    let expect_off = Shape::from((b, 2 * k, ho, wo));
    if offset.dims() != expect_off.dims() {
        bail!("deformable conv: offset shape {offset:?}, expected {expect_off:?}")
    }
    if mask_channels_first {
        let expect_mask = Shape::from((b, k, ho, wo));
        if mask.dims() != expect_mask.dims() {
            bail!("deformable conv: mask shape {mask:?}, expected {expect_mask:?}")
        }
    }
    Ok(Dims { b, c, h, w, ho, wo })
}

/// Gathers deformable, modulated samples into a `[B, C * K, L]` column matrix.
struct DeformIm2col {
    geo: DeformGeometry,
}

impl DeformIm2col {
    fn fwd<T: Real>(
        &self,
        d: &Dims,
        x: &[T],
        off: &[T],
        mask: &[T],
    ) -> Result<(CpuStorage, Shape)> {
        let k = self.geo.taps();
        let (l, hw) = (d.ho * d.wo, d.h * d.w);
        let mut out = vec![T::zero(); d.b * d.c * k * l];
        for bi in 0..d.b {
            let plan = Plan::build(&off[bi * 2 * k * l..], &self.geo, d.h, d.w, d.ho, d.wo);
            let m = &mask[bi * k * l..(bi + 1) * k * l];
            for ci in 0..d.c {
                let plane = &x[(bi * d.c + ci) * hw..][..hw];
                let dst = &mut out[(bi * d.c + ci) * k * l..][..k * l];
                for (s, o) in dst.iter_mut().enumerate() {
                    *o = m[s] * plan.sample(s, plane);
                }
            }
        }
        Ok((T::to_cpu_storage_owned(out), Shape::from((d.b, d.c * k, l))))
    }

    fn bwd_typed<T: Real>(
        &self,
        x: &Tensor,
        off: &Tensor,
        mask: &Tensor,
        grad: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let d = check_dims(&self.geo, x.shape(), off.shape(), mask.shape(), true)?;
        let k = self.geo.taps();
        let (l, hw) = (d.ho * d.wo, d.h * d.w);
        let (xv, ov, mv, gv) = (
            tensor_vec::<T>(x)?,
            tensor_vec::<T>(off)?,
            tensor_vec::<T>(mask)?,
            tensor_vec::<T>(grad)?,
        );
        let mut gx = vec![T::zero(); xv.len()];
        let mut goff = vec![T::zero(); ov.len()];
        let mut gmask = vec![T::zero(); mv.len()];
        for bi in 0..d.b {
            let plan = Plan::build(&ov[bi * 2 * k * l..], &self.geo, d.h, d.w, d.ho, d.wo);
            let m = &mv[bi * k * l..(bi + 1) * k * l];
            let go = &mut goff[bi * 2 * k * l..(bi + 1) * 2 * k * l];
            let gm = &mut gmask[bi * k * l..(bi + 1) * k * l];
            for ci in 0..d.c {
                let plane = &xv[(bi * d.c + ci) * hw..][..hw];
                let gplane = &mut gx[(bi * d.c + ci) * hw..][..hw];
                let g = &gv[(bi * d.c + ci) * k * l..][..k * l];
                for s in 0..k * l {
                    let gs = g[s];
                    if gs == T::zero() {
                        continue;
                    }
                    let tap = s / l;
                    gm[s] += gs * plan.sample(s, plane);
                    let (sy, sx) = plan.slopes(s, plane);
                    let scale = gs * m[s];
                    go[s + tap * l] += scale * sy;
                    go[s + (tap + 1) * l] += scale * sx;
                    plan.scatter(s, scale, gplane);
                }
            }
        }
        let dev = x.device();
        Ok((
            Tensor::from_vec(gx, x.shape(), dev)?,
            Tensor::from_vec(goff, off.shape(), dev)?,
            Tensor::from_vec(gmask, mask.shape(), dev)?,
        ))
    }
}

impl CustomOp3 for DeformIm2col {
    fn name(&self) -> &'static str {
        "deform-im2col"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = check_dims(&self.geo, l1.shape(), l2.shape(), l3.shape(), true)?;
        match s1 {
            CpuStorage::F32(_) => self.fwd::<f32>(
                &d,
                storage_slice(s1, l1)?,
                storage_slice(s2, l2)?,
                storage_slice(s3, l3)?,
            ),
            CpuStorage::F64(_) => self.fwd::<f64>(
                &d,
                storage_slice(s1, l1)?,
                storage_slice(s2, l2)?,
                storage_slice(s3, l3)?,
            ),
            s => Err(candle_core::Error::UnsupportedDTypeForOp(s.dtype(), "deform-im2col")),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        off: &Tensor,
        mask: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (gx, go, gm) = match x.dtype() {
            candle_core::DType::F32 => self.bwd_typed::<f32>(x, off, mask, grad)?,
            _ => self.bwd_typed::<f64>(x, off, mask, grad)?,
        };
        Ok((Some(gx), Some(go), Some(gm)))
    }
}

/// Depthwise deformable convolution evaluated directly, without a column buffer.
/// The second operand packs offsets then modulation: `[B, 3K, Ho, Wo]`.
struct DepthwiseDeform {
    geo: DeformGeometry,
}

impl DepthwiseDeform {
    fn split_dims(&self, x: &Shape, om: &Shape, weight: &Shape) -> Result<Dims> {
        let (b, _, ho, wo) = om.dims4()?;
        let k = self.geo.taps();
        let off = Shape::from((b, 2 * k, ho, wo));
        let d = check_dims(&self.geo, x, &off, &off, false)?;
        if om.dims() != [d.b, 3 * k, d.ho, d.wo] {
            bail!("depthwise deformable conv: packed offset/mask shape {om:?}")
        }
        if weight.dims() != [d.c, 1, self.geo.kernel, self.geo.kernel] {
            bail!("depthwise deformable conv: weight shape {weight:?} for {} channels", d.c)
        }
        Ok(d)
    }

    fn fwd<T: Real>(
        &self,
        d: &Dims,
        x: &[T],
        om: &[T],
        weight: &[T],
    ) -> Result<(CpuStorage, Shape)> {
        let k = self.geo.taps();
        let (c, l, hw) = (d.c, d.ho * d.wo, d.h * d.w);
        let wt = transpose(weight, c, k);
        let mut out = vec![T::zero(); d.b * c * l];
        let mut acc = vec![T::zero(); l * c];
        for bi in 0..d.b {
            let packed = &om[bi * 3 * k * l..(bi + 1) * 3 * k * l];
            let plan = Plan::build(packed, &self.geo, d.h, d.w, d.ho, d.wo);
            let m = &packed[2 * k * l..];
            let xt = transpose(&x[bi * c * hw..(bi + 1) * c * hw], c, hw);
            acc.iter_mut().for_each(|v| *v = T::zero());
            for tap in 0..k {
                let wrow = &wt[tap * c..(tap + 1) * c];
                for p in 0..l {
                    let s = tap * l + p;
                    let (idx, bw) = (&plan.idx[s], &plan.wt[s]);
                    let ms = m[s];
                    let rows = [
                        &xt[idx[0] * c..][..c],
                        &xt[idx[1] * c..][..c],
                        &xt[idx[2] * c..][..c],
                        &xt[idx[3] * c..][..c],
                    ];
                    let dst = &mut acc[p * c..(p + 1) * c];
                    for ci in 0..c {
                        let val = bw[0] * rows[0][ci] + bw[1] * rows[1][ci] + bw[2] * rows[2][ci] + bw[3] * rows[3][ci];
                        dst[ci] += wrow[ci] * ms * val;
                    }
                }
            }
            out[bi * c * l..(bi + 1) * c * l].copy_from_slice(&transpose(&acc, l, c));
        }
        Ok((T::to_cpu_storage_owned(out), Shape::from((d.b, d.c, d.ho, d.wo))))
    }

    fn bwd_typed<T: Real>(
        &self,
        x: &Tensor,
        om: &Tensor,
        weight: &Tensor,
        grad: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let d = self.split_dims(x.shape(), om.shape(), weight.shape())?;
        let k = self.geo.taps();
        let (c, l, hw) = (d.c, d.ho * d.wo, d.h * d.w);
        let (xv, omv, wv, gv) = (
            tensor_vec::<T>(x)?,
            tensor_vec::<T>(om)?,
            tensor_vec::<T>(weight)?,
            tensor_vec::<T>(grad)?,
        );
        let wt = transpose(&wv, c, k);
        let mut gx = vec![T::zero(); xv.len()];
        let mut gom = vec![T::zero(); omv.len()];
        let mut gwt = vec![T::zero(); wv.len()];
        let mut gxt = vec![T::zero(); hw * c];
        for bi in 0..d.b {
            let packed = &omv[bi * 3 * k * l..(bi + 1) * 3 * k * l];
            let plan = Plan::build(packed, &self.geo, d.h, d.w, d.ho, d.wo);
            let m = &packed[2 * k * l..];
            let gpacked = &mut gom[bi * 3 * k * l..(bi + 1) * 3 * k * l];
            let xt = transpose(&xv[bi * c * hw..(bi + 1) * c * hw], c, hw);
            let gt = transpose(&gv[bi * c * l..(bi + 1) * c * l], c, l);
            gxt.iter_mut().for_each(|v| *v = T::zero());
            for tap in 0..k {
                let wrow = &wt[tap * c..(tap + 1) * c];
                let gwrow = &mut gwt[tap * c..(tap + 1) * c];
                for p in 0..l {
                    let s = tap * l + p;
                    let (idx, bw, by, bx) = (plan.idx[s], plan.wt[s], plan.dy[s], plan.dx[s]);
                    let ms = m[s];
                    let g = &gt[p * c..(p + 1) * c];
                    let (mut g_mask, mut g_y, mut g_x) = (T::zero(), T::zero(), T::zero());
                    for ci in 0..c {
                        let v = [
                            xt[idx[0] * c + ci],
                            xt[idx[1] * c + ci],
                            xt[idx[2] * c + ci],
                            xt[idx[3] * c + ci],
                        ];
                        let val = bw[0] * v[0] + bw[1] * v[1] + bw[2] * v[2] + bw[3] * v[3];
                        let sy = by[0] * v[0] + by[1] * v[1] + by[2] * v[2] + by[3] * v[3];
                        let sx = bx[0] * v[0] + bx[1] * v[1] + bx[2] * v[2] + bx[3] * v[3];
                        let a = g[ci] * wrow[ci];
                        gwrow[ci] += g[ci] * ms * val;
                        g_mask += a * val;
                        g_y += a * sy;
                        g_x += a * sx;
                    }
                    for j in 0..4 {
                        let coef = ms * bw[j];
                        if coef == T::zero() {
                            continue;
                        }
                        let dst = &mut gxt[idx[j] * c..(idx[j] + 1) * c];
                        for ci in 0..c {
                            dst[ci] += coef * g[ci] * wrow[ci];
                        }
                    }
                    gpacked[2 * k * l + s] += g_mask;
                    gpacked[s + tap * l] += ms * g_y;
                    gpacked[s + (tap + 1) * l] += ms * g_x;
                }
            }
            gx[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(&transpose(&gxt, hw, c));
        }
        let dev = x.device();
        Ok((
            Tensor::from_vec(gx, x.shape(), dev)?,
            Tensor::from_vec(gom, om.shape(), dev)?,
            Tensor::from_vec(transpose(&gwt, k, c), weight.shape(), dev)?,
        ))
    }
}

/// Row-major `[rows, cols]` to `[cols, rows]`.
fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        out.extend((0..rows).map(|i| src[i * cols + j]));
    }
    out
}

impl CustomOp3 for DepthwiseDeform {
    fn name(&self) -> &'static str {
        "depthwise-deform-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = self.split_dims(l1.shape(), l2.shape(), l3.shape())?;
        match s1 {
            CpuStorage::F32(_) => self.fwd::<f32>(
                &d,
                storage_slice(s1, l1)?,
                storage_slice(s2, l2)?,
                storage_slice(s3, l3)?,
            ),
            CpuStorage::F64(_) => self.fwd::<f64>(
                &d,
                storage_slice(s1, l1)?,
                storage_slice(s2, l2)?,
                storage_slice(s3, l3)?,
            ),
            s => Err(candle_core::Error::UnsupportedDTypeForOp(
                s.dtype(),
                "depthwise-deform-conv2d",
            )),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        om: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (gx, gom, gw) = match x.dtype() {
            candle_core::DType::F32 => self.bwd_typed::<f32>(x, om, weight, grad)?,
            _ => self.bwd_typed::<f64>(x, om, weight, grad)?,
        };
        Ok((Some(gx), Some(gom), Some(gw)))
    }
}

/// Deformable column matrix `[B, C * K, Ho * Wo]`, rows ordered channel-major
/// so that a `[O, C, k, k]` kernel reshaped to `[O, C * K]` multiplies it.
pub fn deform_im2col(
    x: &Tensor,
    offset: &Tensor,
    mask: &Tensor,
    geo: DeformGeometry,
) -> Result<Tensor> {
    ensure_float(x.dtype(), "deform-im2col")?;
    x.contiguous()?
        .apply_op3(&offset.contiguous()?, &mask.contiguous()?, DeformIm2col { geo })
}

/// Modulated deformable convolution with a grouped kernel `[O, C / groups, k, k]`.
pub fn deform_conv2d(
    x: &Tensor,
    offset: &Tensor,
    mask: &Tensor,
    weight: &Tensor,
    groups: usize,
    geo: DeformGeometry,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, cg, kh, kw) = weight.dims4()?;
    if kh != geo.kernel || kw != geo.kernel || groups == 0 || c % groups != 0 || o % groups != 0 {
        bail!("deform_conv2d: weight {:?} incompatible with {c} channels in {groups} groups", weight.shape())
    }
    if cg * groups != c {
        bail!("deform_conv2d: weight expects {} input channels, got {c}", cg * groups)
    }
    let (ho, wo) = geo
        .output_hw(h, w)
        .ok_or_else(|| candle_core::Error::Msg("deform_conv2d: input smaller than kernel".into()))?;
    let k = geo.taps();
    let cols = deform_im2col(x, offset, mask, geo)?;
    let out = if groups == 1 {
        weight.reshape((o, c * k))?.broadcast_matmul(&cols)?
    } else {
        let cols = cols.reshape((b, groups, cg * k, ho * wo))?;
        weight
            .reshape((groups, o / groups, cg * k))?
            .broadcast_matmul(&cols)?
    };
    out.reshape((b, o, ho, wo))
}

/// Depthwise modulated deformable convolution, kernel `[C, 1, k, k]`.
pub fn depthwise_deform_conv2d(
    x: &Tensor,
    offset: &Tensor,
    mask: &Tensor,
    weight: &Tensor,
    geo: DeformGeometry,
) -> Result<Tensor> {
    ensure_float(x.dtype(), "depthwise-deform-conv2d")?;
    let packed = Tensor::cat(&[offset, mask], 1)?;
    x.contiguous()?
        .apply_op3(&packed.contiguous()?, &weight.contiguous()?, DepthwiseDeform { geo })
}
