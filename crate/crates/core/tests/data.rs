use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;
use vuga::data::synth::{blur_levels, gaussian_blur, procedural_source, write_blur_dataset};
use vuga::data::{
    denormalize, load_manifest, preprocess, split_dataset, write_manifest, DatasetManifest, ErpImage, PreprocessConfig,
    QualityRecord, SourceKind, Split, IMAGENET_MEAN, IMAGENET_STD,
};
use vuga::Error;

fn records(n: usize) -> Vec<QualityRecord> {
    (0..n)
        .map(|i| QualityRecord {
            image_id: format!("img_{i:03}"),
            path: PathBuf::from(format!("img_{i:03}.png")),
            mos: i as f64 * 0.5,
            split: None,
        })
        .collect()
}

fn manifest(n: usize) -> DatasetManifest {
    DatasetManifest::new("m", records(n)).unwrap()
}

fn write_csv(body: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("db.csv");
    fs::write(&path, body).unwrap();
    (dir, path)
}

fn constant(h: usize, w: usize, rgb: [f32; 3]) -> ErpImage {
    let px = (0..h * w).flat_map(|_| rgb).collect();
    ErpImage::new(px, h, w, SourceKind::Planar, "const".into()).unwrap()
}

#[test]
fn three_row_manifest() {
    let (dir, path) = write_csv("image_id,path,mos\nimg_001,a.png,3.5\nimg_002,b.png,1.25\nimg_003,sub/c.png,4\n");
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m.records[2].path, dir.path().join("sub/c.png"));
    assert!(m.records.iter().all(|r| r.split.is_none()));
    assert_eq!(m.mos_range, (1.25, 4.0));
}

#[test]
fn split_column_is_parsed() {
    let (_dir, path) = write_csv("image_id,path,mos,split\na,a.png,1,train\nb,b.png,2,test\n");
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.records[0].split, Some(Split::Train));
    assert_eq!(m.records[1].split, Some(Split::Test));
}

#[test]
fn duplicate_id_is_a_validation_error() {
    let (_dir, path) = write_csv("image_id,path,mos\nimg_001,a.png,1\nimg_001,b.png,2\n");
    assert!(matches!(load_manifest(&path), Err(Error::Validation(m)) if m.contains("img_001")));
}

#[test]
fn non_numeric_mos_names_the_line() {
    let (_dir, path) = write_csv("image_id,path,mos\na,a.png,1\nb,b.png,abc\nc,c.png,3\n");
    match load_manifest(&path) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 3);
            assert!(msg.contains("abc"));
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_column_and_missing_file() {
    let (_dir, path) = write_csv("image_id,path\na,a.png\n");
    assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(load_manifest(std::path::Path::new("/nonexistent/x.csv")), Err(Error::Io { .. })));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = split_dataset(&manifest(5), 0.6, 1).unwrap();
    for r in &mut m.records {
        r.path = dir.path().join(&r.path);
    }
    let path = dir.path().join("db.csv");
    write_manifest(&m, &path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.records, m.records);
}

#[test]
fn split_eight_two() {
    let s = split_dataset(&manifest(10), 0.8, 7).unwrap();
    assert_eq!(s.subset(Split::Train).len(), 8);
    assert_eq!(s.subset(Split::Test).len(), 2);
    assert_eq!(split_dataset(&manifest(10), 0.8, 7).unwrap(), s);
    let other = split_dataset(&manifest(10), 0.8, 8).unwrap();
    assert_ne!(other, s);
}

#[test]
fn split_rejects_degenerate_inputs() {
    assert!(matches!(split_dataset(&manifest(1), 0.8, 0), Err(Error::Precondition(_))));
    assert!(split_dataset(&manifest(10), 1.0, 0).is_err());
    assert!(split_dataset(&manifest(10), 0.0, 0).is_err());
    let s = split_dataset(&manifest(2), 0.99, 0).unwrap();
    assert_eq!(s.subset(Split::Test).len(), 1);
}

#[test]
fn equirectangular_to_square() {
    let img = constant(2048, 4096, [0.2, 0.5, 0.9]);
    let x = preprocess(&img, &PreprocessConfig::new(1024)).unwrap();
    assert_eq!(x.dims(), &[3, 1024, 1024]);
}

#[test]
fn mean_colored_image_normalizes_to_zero() {
    let img = constant(37, 80, IMAGENET_MEAN);
    let x = preprocess(&img, &PreprocessConfig::new(64)).unwrap();
    let max = x.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
    assert!(max <= 1e-6, "{max}");
}

#[test]
fn same_size_resize_is_identity() {
    let img = procedural_source(224, 224, 3).unwrap();
    let x = preprocess(&img, &PreprocessConfig::new(224)).unwrap();
    let got = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let hw = 224 * 224;
    let mut max = 0f32;
    for c in 0..3 {
        for i in 0..hw {
            let direct = (img.pixels[i * 3 + c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            max = max.max((direct - got[c * hw + i]).abs());
        }
    }
    assert!(max <= 1e-6, "{max}");
}

#[test]
fn invalid_images_and_configs() {
    assert!(ErpImage::new(vec![0.5; 12], 2, 2, SourceKind::Planar, "x".into()).is_ok());
    assert!(ErpImage::new(vec![0.5; 11], 2, 2, SourceKind::Planar, "x".into()).is_err());
    assert!(ErpImage::new(vec![f32::NAN; 12], 2, 2, SourceKind::Planar, "x".into()).is_err());
    assert!(ErpImage::new(vec![1.5; 12], 2, 2, SourceKind::Planar, "x".into()).is_err());
    let img = constant(4, 4, [0.1, 0.2, 0.3]);
    assert!(preprocess(&img, &PreprocessConfig::new(100)).is_err());
    let mut cfg = PreprocessConfig::new(32);
    cfg.normalization_std[1] = 0.0;
    assert!(preprocess(&img, &cfg).is_err());
}

#[test]
fn decode_marks_panoramas() {
    let dir = tempfile::tempdir().unwrap();
    let pano = dir.path().join("p.png");
    procedural_source(32, 64, 1).unwrap().save_png(&pano).unwrap();
    let img = ErpImage::open(&pano).unwrap();
    assert_eq!((img.height, img.width, img.source_kind), (32, 64, SourceKind::Equirectangular));
    let bad = dir.path().join("bad.png");
    fs::write(&bad, b"not an image").unwrap();
    assert!(matches!(ErpImage::open(&bad), Err(Error::Image { .. })));
}

#[test]
fn blur_dataset_scores_follow_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let sigmas = blur_levels(4, 0.5);
    let (m, csv) = write_blur_dataset(dir.path(), "blur", 9, &sigmas, 32, 64).unwrap();
    assert_eq!(load_manifest(&csv).unwrap(), m);
    assert_eq!(m.records.iter().map(|r| r.mos).collect::<Vec<_>>(), vec![0.0, -0.5, -1.0, -1.5]);
    // stronger blur removes more high-frequency energy
    let energy = |img: &ErpImage| -> f64 {
        img.pixels
            .chunks_exact(3)
            .zip(img.pixels.chunks_exact(3).skip(1))
            .map(|(a, b)| ((a[0] - b[0]) as f64).powi(2))
            .sum()
    };
    let e: Vec<f64> = m.records.iter().map(|r| energy(&ErpImage::open(&r.path).unwrap())).collect();
    assert!(e.windows(2).all(|w| w[0] > w[1]), "{e:?}");
}

#[test]
fn blur_preserves_constant_images() {
    let img = constant(9, 13, [0.25, 0.5, 0.75]);
    let out = gaussian_blur(&img, 2.0).unwrap();
    assert!(out.pixels.iter().zip(&img.pixels).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(gaussian_blur(&img, -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_is_deterministic_and_sized(n in 2usize..60, f in 0.05f64..0.95, seed in any::<u64>()) {
        let a = split_dataset(&manifest(n), f, seed).unwrap();
        let b = split_dataset(&manifest(n), f, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let train = a.subset(Split::Train).len();
        prop_assert_eq!(train, ((f * n as f64).round() as usize).clamp(1, n - 1));
        prop_assert_eq!(train + a.subset(Split::Test).len(), n);
    }

    #[test]
    fn denormalize_recovers_pixels(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let src = procedural_source(h.max(1), w.max(1), seed).unwrap();
        let cfg = PreprocessConfig::new(32);
        let x = preprocess(&src, &cfg).unwrap();
        let back = denormalize(&x, &cfg).unwrap();
        let resized = vuga::ops::resize_bilinear(&src.planes(), 3, h, w, 32, 32);
        for (a, b) in back.iter().zip(&resized) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn preprocess_output_is_finite(h in 1usize..40, w in 1usize..40, r in 1usize..3) {
        let src = procedural_source(h, w, (h * w) as u64).unwrap();
        let x = preprocess(&src, &PreprocessConfig::new(32 * r)).unwrap();
        prop_assert_eq!(x.dims(), &[3, 32 * r, 32 * r]);
        let v = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        prop_assert!(v.iter().all(|v| v.is_finite()));
    }
}
