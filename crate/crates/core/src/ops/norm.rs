use candle_core::{Result, Tensor, D};

/// Layer normalization across the channel axis of a `[B, C, H, W]` map,
/// independently at every spatial location, with per-channel affine terms.
pub fn channel_layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.dim(1)?;
    let mean = x.mean_keepdim(1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    normed
        .broadcast_mul(&weight.reshape((1, c, 1, 1))?)?
        .broadcast_add(&bias.reshape((1, c, 1, 1))?)
}

/// Divides each vector along the last axis by `max(||v||, eps)`.
pub fn l2_normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    x.broadcast_div(&norm.clamp(eps, f64::INFINITY)?)
}

/// Softmax over the last axis, shifted by the row maximum.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(D::Minus1)?.detach())?;
    let e = shifted.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Exact (erf) GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.gelu_erf()
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.relu()
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn layer_norm_zero_mean_unit_variance_per_pixel() {
        let x = Tensor::arange(0f64, 24.0, &Device::Cpu).unwrap().reshape((1, 3, 2, 4)).unwrap();
        let x = (x.sqr().unwrap() * 0.1).unwrap();
        let ones = Tensor::ones(3, DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let y = channel_layer_norm(&x, &ones, &zeros, 0.0).unwrap();
        let mean = y.mean_keepdim(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let var = y.sqr().unwrap().mean_keepdim(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f32, 2.0, 3.0], [100.0, -100.0, 0.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let x = Tensor::new(&[[3f64, 4.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let y = l2_normalize_last(&x, 1e-12).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(y[0], vec![0.6, 0.8]);
        assert_eq!(y[1], vec![0.0, 0.0]);
    }
}
