//! Synthetic quality datasets: one procedural source degraded by Gaussian
//! blur at increasing strength, scored `mos = -sigma`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_manifest, DatasetManifest, ErpImage, QualityRecord, SourceKind};
use crate::{Error, Result};

/// Textured test pattern: gratings, discs, rectangles and fine noise.
pub fn procedural_source(height: usize, width: usize, seed: u64) -> Result<ErpImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![0f32; height * width * 3];
    let gratings: Vec<(f32, f32, f32, [f32; 3])> = (0..6)
        .map(|_| {
            let freq = rng.gen_range(0.02..0.35f32);
            let angle = rng.gen_range(0.0..std::f32::consts::PI);
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            (freq, angle, phase, [rng.gen_range(0.0..0.12), rng.gen_range(0.0..0.12), rng.gen_range(0.0..0.12)])
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let i = (y * width + x) * 3;
            for (f, a, p, amp) in &gratings {
                let t = (x as f32 * a.cos() + y as f32 * a.sin()) * f + p;
                for c in 0..3 {
                    px[i + c] += amp[c] * t.sin();
                }
            }
        }
    }
    for _ in 0..40 {
        let color = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        let (cy, cx) = (rng.gen_range(0..height) as f32, rng.gen_range(0..width) as f32);
        let r = rng.gen_range(3.0..(height as f32 / 6.0).max(4.0));
        let disc = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = ((y as f32 - cy).abs(), (x as f32 - cx).abs());
                let inside = if disc { dy * dy + dx * dx <= r * r } else { dy <= r && dx <= 1.6 * r };
                if inside {
                    let i = (y * width + x) * 3;
                    for c in 0..3 {
                        px[i + c] = 0.4 * px[i + c] + 0.6 * (color[c] - 0.5);
                    }
                }
            }
        }
    }
    for v in px.iter_mut() {
        *v = (*v + 0.5 + rng.gen_range(-0.04..0.04f32)).clamp(0.0, 1.0);
    }
    let kind = if width == 2 * height { SourceKind::Equirectangular } else { SourceKind::Planar };
    ErpImage::new(px, height, width, kind, PathBuf::from(format!("procedural:{seed}")))
}

/// Separable Gaussian blur with reflected borders; `sigma == 0` copies.
pub fn gaussian_blur(img: &ErpImage, sigma: f64) -> Result<ErpImage> {
    if !(sigma >= 0.0) {
        return Err(Error::Validation(format!("blur sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (img.height as isize, img.width as isize);
    let reflect = |i: isize, n: isize| -> usize {
        let period = 2 * n;
        let mut j = i.rem_euclid(period.max(1));
        if j >= n {
            j = period - 1 - j;
        }
        j as usize
    };
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for (t, k) in kernel.iter().enumerate() {
                    let d = t as isize - radius;
                    let (sy, sx) = if horizontal { (y as usize, reflect(x + d, w)) } else { (reflect(y + d, h), x as usize) };
                    let i = (sy * w as usize + sx) * 3;
                    for c in 0..3 {
                        acc[c] += k * src[i + c];
                    }
                }
                let o = (y as usize * w as usize + x as usize) * 3;
                dst[o..o + 3].copy_from_slice(&acc);
            }
        }
        dst
    };
    let pixels = pass(&pass(&img.pixels, true), false)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    ErpImage::new(pixels, img.height, img.width, img.source_kind, img.source_path.clone())
}

/// `n` blur strengths `0, step, 2 * step, ...`.
pub fn blur_levels(n: usize, step: f64) -> Vec<f64> {
    (0..n).map(|i| i as f64 * step).collect()
}

/// Writes `{name}_{i}.png` for each sigma plus `{name}.csv` into `dir`.
pub fn write_blur_dataset(
    dir: &Path,
    name: &str,
    source_seed: u64,
    sigmas: &[f64],
    height: usize,
    width: usize,
) -> Result<(DatasetManifest, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let source = procedural_source(height, width, source_seed)?;
    let mut records = Vec::with_capacity(sigmas.len());
    for (i, &sigma) in sigmas.iter().enumerate() {
        let path = dir.join(format!("{name}_{i:02}.png"));
        gaussian_blur(&source, sigma)?.save_png(&path)?;
        records.push(QualityRecord {
            image_id: format!("{name}_{i:02}"),
            path,
            mos: -sigma,
            split: None,
        });
    }
    let manifest = DatasetManifest::new(name, records)?;
    let csv = dir.join(format!("{name}.csv"));
    write_manifest(&manifest, &csv)?;
    Ok((manifest, csv))
}
