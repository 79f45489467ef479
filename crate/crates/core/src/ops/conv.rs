use candle_core::{bail, Result, Tensor};

/// Stride-one "same" convolution computed as one matrix product against all
/// kernel taps followed by a sum of shifted slices. Efficient when the output
/// width is small relative to the input width (e.g. offset predictors).
pub fn conv2d_same(x: &Tensor, weight: &Tensor, dilation: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != kw || kh % 2 == 0 || dilation == 0 {
        bail!("conv2d_same: weight {:?} does not fit input {:?}", weight.shape(), x.shape())
    }
    let k = kh;
    let pad = dilation * (k - 1) / 2;
    let taps = weight.permute((2, 3, 0, 1))?.contiguous()?.reshape((k * k * o, c))?;
    let all = taps
        .broadcast_matmul(&x.contiguous()?.reshape((b, c, h * w))?)?
        .reshape((b, k * k * o, h, w))?
        .pad_with_zeros(2, pad, pad)?
        .pad_with_zeros(3, pad, pad)?;
    let mut out: Option<Tensor> = None;
    for ky in 0..k {
        for kx in 0..k {
            let tap = all
                .narrow(1, (ky * k + kx) * o, o)?
                .narrow(2, ky * dilation, h)?
                .narrow(3, kx * dilation, w)?;
            out = Some(match out {
                None => tap,
                Some(acc) => (acc + tap)?,
            });
        }
    }
    out.expect("kernel has at least one tap").contiguous()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn matches_candle_conv() {
        for (k, dil) in [(1, 1), (3, 1), (3, 2), (5, 1)] {
            let x = rand(&[2, 5, 9, 7], 1);
            let w = rand(&[4, 5, k, k], 2);
            let a = conv2d_same(&x, &w, dil).unwrap();
            let b = x.conv2d(&w, dil * (k - 1) / 2, 1, dil, 1).unwrap();
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "k={k} dil={dil}: {d}");
        }
    }

    #[test]
    fn gradients_match_candle_conv() {
        let x = Var::from_tensor(&rand(&[1, 3, 6, 5], 3)).unwrap();
        let w = Var::from_tensor(&rand(&[2, 3, 3, 3], 4)).unwrap();
        let probe = rand(&[1, 2, 6, 5], 5);
        let ga = (conv2d_same(&x, &w, 1).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (x.conv2d(&w, 1, 1, 1, 1).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [x.as_tensor(), w.as_tensor()] {
            let d = (ga.get(v).unwrap() - gb.get(v).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }
}
