//! Tensor kernels that candle does not ship with gradients, plus small
//! composed helpers shared by the model blocks.
//!
//! Every custom kernel runs on CPU storage in `f32` or `f64` and expects
//! contiguous inputs; the public wrappers take care of that.

mod conv;
mod deform;
mod depthwise;
mod interp;
mod norm;

pub use conv::conv2d_same;
pub use deform::{deform_conv2d, deform_im2col, depthwise_deform_conv2d, DeformGeometry};
pub use depthwise::depthwise_conv2d;
pub use interp::{bilinear_matrix, resize_bilinear, upsample_bilinear2x};
pub use norm::{channel_layer_norm, gelu, l2_normalize_last, relu, sigmoid, softmax_last};

use candle_core::{CpuStorage, DType, Layout, Result, Tensor, WithDType};

pub(crate) trait Real: WithDType + num_traits::Float {}
impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn storage_slice<'a, T: Real>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom kernel requires a contiguous input"),
    }
}

pub(crate) fn tensor_vec<T: Real>(t: &Tensor) -> Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

pub(crate) fn ensure_float(dtype: DType, op: &'static str) -> Result<()> {
    match dtype {
        DType::F32 | DType::F64 => Ok(()),
        dt => Err(candle_core::Error::UnsupportedDTypeForOp(dt, op)),
    }
}
