#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vuga::backbone::{load_backbone, write_seeded_weights, BackboneSpec, SwinV2};
use vuga::data::synth::{blur_levels, write_blur_dataset};
use vuga::data::DatasetManifest;
use vuga::gmad::{GmadPair, GmadQuery};
use vuga::model::ModelConfig;
use vuga::train::TrainConfig;

pub fn backbone(dir: &Path, arch: &str) -> SwinV2 {
    let w = dir.join(format!("{arch}.safetensors"));
    if !w.exists() {
        write_seeded_weights(arch, 0, &w).unwrap();
    }
    load_backbone(&BackboneSpec::new(arch, &w).unwrap(), DType::F32, &Device::Cpu).unwrap()
}

/// `n` blurred copies of one procedural source, 64x128.
pub fn blur_set(dir: &Path, name: &str, source_seed: u64, n: usize) -> DatasetManifest {
    write_blur_dataset(&dir.join(name), name, source_seed, &blur_levels(n, 0.5), 64, 128).unwrap().0
}

pub fn pico_model() -> ModelConfig {
    ModelConfig {
        resolution: 64,
        backbone: "swinv2_pico".into(),
        fusion_channels: 16,
        regressor_hidden: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn pico_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr: 1e-3,
        seed,
        resolution: 64,
        ..TrainConfig::default()
    }
}

/// Band of each id by brute force: position relative to linearly
/// interpolated quantiles of the sorted scores.
fn oracle_band(all: &[f64], s: f64, levels: usize) -> usize {
    let mut sorted = all.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut band = 0;
    for k in 1..levels {
        let pos = (n - 1) as f64 * k as f64 / levels as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let cut = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
        if s >= cut {
            band += 1;
        }
    }
    band
}

/// Exhaustive search: repeatedly take the best remaining pair of each band.
pub fn gmad_oracle(q: &GmadQuery) -> Vec<GmadPair> {
    let ids: Vec<&String> = q.defender_scores.keys().collect();
    let all: Vec<f64> = q.defender_scores.values().cloned().collect();
    let mut out = Vec::new();
    for level in 0..q.num_levels {
        let mut taken: Vec<(usize, usize)> = Vec::new();
        for _ in 0..q.pairs_per_level {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    let (a, b) = (ids[i], ids[j]);
                    let (da, db) = (q.defender_scores[a], q.defender_scores[b]);
                    if oracle_band(&all, da, q.num_levels) != level
                        || oracle_band(&all, db, q.num_levels) != level
                        || (da - db).abs() > q.tolerance
                        || taken.contains(&(i, j))
                    {
                        continue;
                    }
                    let gap = (q.attacker_scores[a] - q.attacker_scores[b]).abs();
                    // ids are sorted, so the first pair found at a gap is the lexicographic minimum
                    if best.is_none_or(|(g, _, _)| gap > g) {
                        best = Some((gap, i, j));
                    }
                }
            }
            let Some((gap, i, j)) = best else { break };
            taken.push((i, j));
            out.push(GmadPair {
                level: level + 1,
                image_a: ids[i].clone(),
                image_b: ids[j].clone(),
                defender_gap: (q.defender_scores[ids[i]] - q.defender_scores[ids[j]]).abs(),
                attacker_gap: gap,
            });
        }
    }
    out
}

pub fn random_gmad_query(seed: u64) -> GmadQuery {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=200);
    // coarse grids create ties in both models
    let grid = [0.0, 0.5, 0.05, 0.01][rng.gen_range(0..4)];
    let draw = |rng: &mut ChaCha8Rng| {
        let v: f64 = rng.gen_range(0.0..10.0);
        if grid > 0.0 { (v / grid).round() * grid } else { v }
    };
    let mut d = BTreeMap::new();
    let mut a = BTreeMap::new();
    for i in 0..n {
        let id = format!("img{:03}", rng.gen_range(0..1000) * 1000 + i);
        d.insert(id.clone(), draw(&mut rng));
        a.insert(id, draw(&mut rng));
    }
    let mut q = GmadQuery::new(d, a);
    q.num_levels = rng.gen_range(1..=4);
    q.pairs_per_level = rng.gen_range(1..=3);
    q.tolerance = [0.0, q.tolerance, rng.gen_range(0.0..1.0)][rng.gen_range(0..3)];
    q
}
