use candle_core::{Result, Tensor};

/// Dense `[out, in]` bilinear interpolation matrix with half-pixel centres and
/// edge clamping. Every row sums to one, and `in == out` gives the identity.
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let (lo, hi, frac) = source_taps(i, scale, input);
        m[i * input + lo] += 1.0 - frac;
        m[i * input + hi] += frac;
    }
    m
}

fn source_taps(i: usize, scale: f64, input: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(input - 1);
    let hi = (lo + 1).min(input - 1);
    let frac = if hi == lo { 0.0 } else { src - lo as f64 };
    (lo, hi, frac)
}

/// Separable bilinear resize of a planar `[channels, h, w]` buffer.
pub fn resize_bilinear(src: &[f32], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), channels * h * w);
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let cols: Vec<_> = (0..out_w)
        .map(|x| source_taps(x, w as f64 / out_w as f64, w))
        .collect();
    let rows: Vec<_> = (0..out_h)
        .map(|y| source_taps(y, h as f64 / out_h as f64, h))
        .collect();
    let mut tmp = vec![0f32; channels * h * out_w];
    for c in 0..channels {
        for y in 0..h {
            let row = &src[(c * h + y) * w..][..w];
            let dst = &mut tmp[(c * h + y) * out_w..][..out_w];
            for (o, &(lo, hi, f)) in dst.iter_mut().zip(&cols) {
                *o = ((1.0 - f) * row[lo] as f64 + f * row[hi] as f64) as f32;
            }
        }
    }
    let mut out = vec![0f32; channels * out_h * out_w];
    for c in 0..channels {
        for (y, &(lo, hi, f)) in rows.iter().enumerate() {
            let a = &tmp[(c * h + lo) * out_w..][..out_w];
            let b = &tmp[(c * h + hi) * out_w..][..out_w];
            let dst = &mut out[(c * out_h + y) * out_w..][..out_w];
            for x in 0..out_w {
                dst[x] = ((1.0 - f) * a[x] as f64 + f * b[x] as f64) as f32;
            }
        }
    }
    out
}

/// Bilinear x2 upsampling of a `[B, C, H, W]` map, built from two matrix
/// products so that gradients flow through the standard matmul backward.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let dev = x.device();
    let mw = Tensor::from_vec(bilinear_matrix(w, 2 * w), (2 * w, w), dev)?.to_dtype(x.dtype())?;
    let mh = Tensor::from_vec(bilinear_matrix(h, 2 * h), (2 * h, h), dev)?.to_dtype(x.dtype())?;
    let wide = x
        .contiguous()?
        .reshape((b * c * h, w))?
        .matmul(&mw.t()?)?
        .reshape((b * c, h, 2 * w))?;
    wide.transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * 2 * w, h))?
        .matmul(&mh.t()?)?
        .reshape((b * c, 2 * w, 2 * h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn matrix_rows_are_stochastic() {
        for (i, o) in [(7, 14), (3, 5), (10, 4), (1, 2)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        let m = bilinear_matrix(5, 5);
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(m[r * 5 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn upsample_matches_reference_values() {
        // half-pixel bilinear x2 of [0, 1]: 0, 0.25, 0.75, 1
        let x = Tensor::new(&[[[[0f64, 1.0]]]], &Device::Cpu).unwrap();
        let y = upsample_bilinear2x(&x).unwrap();
        assert_eq!(y.dims4().unwrap(), (1, 1, 2, 4));
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::full(2.5f32, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let y = upsample_bilinear2x(&x).unwrap();
        assert_eq!(y.dims4().unwrap(), (1, 3, 4, 4));
        for v in y.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert_eq!(v, 2.5);
        }
    }

    #[test]
    fn resize_downsamples_by_averaging_pairs() {
        // 4 -> 2 with half-pixel centres lands exactly between source pixels
        let src = [0f32, 2.0, 4.0, 6.0];
        let out = resize_bilinear(&src, 1, 1, 4, 1, 2);
        assert_eq!(out, vec![1.0, 5.0]);
    }
}
