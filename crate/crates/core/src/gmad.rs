//! Group maximum differentiation: pairs one model (the defender) rates
//! alike while another (the attacker) rates far apart.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ErpImage, SourceKind};
use crate::ops::resize_bilinear;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmadQuery {
    pub defender_scores: BTreeMap<String, f64>,
    pub attacker_scores: BTreeMap<String, f64>,
    pub num_levels: usize,
    pub tolerance: f64,
    pub pairs_per_level: usize,
}

impl GmadQuery {
    /// Two levels, one pair per level, tolerance 1% of the defender's score range.
    pub fn new(defender_scores: BTreeMap<String, f64>, attacker_scores: BTreeMap<String, f64>) -> Self {
        let tolerance = default_tolerance(&defender_scores);
        Self {
            defender_scores,
            attacker_scores,
            num_levels: 2,
            tolerance,
            pairs_per_level: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.defender_scores.keys().eq(self.attacker_scores.keys()) {
            return Err(Error::Validation("defender and attacker must score the same images".into()));
        }
        if self.defender_scores.len() < 2 {
            return Err(Error::Precondition("gMAD needs at least two images".into()));
        }
        if self.defender_scores.values().chain(self.attacker_scores.values()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("scores must be finite".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Validation(format!("tolerance {} must be non-negative", self.tolerance)));
        }
        if self.num_levels == 0 || self.pairs_per_level == 0 {
            return Err(Error::Validation("num_levels and pairs_per_level must be at least 1".into()));
        }
        Ok(())
    }
}

/// 1% of `max − min` of the scores.
pub fn default_tolerance(scores: &BTreeMap<String, f64>) -> f64 {
    let lo = scores.values().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() {
        0.01 * (hi - lo)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmadPair {
    /// 1 is the lowest-quality band.
    pub level: usize,
    pub image_a: String,
    pub image_b: String,
    pub defender_gap: f64,
    pub attacker_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmadReport {
    pub pairs: Vec<GmadPair>,
    pub warnings: Vec<String>,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Band index in `0..levels` of each score: the number of interior
/// quantile cut points `q(k / levels)` it reaches.
pub fn quantile_bands(scores: &BTreeMap<String, f64>, levels: usize) -> BTreeMap<String, usize> {
    let mut sorted: Vec<f64> = scores.values().cloned().collect();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..levels).map(|k| quantile(&sorted, k as f64 / levels as f64)).collect();
    scores
        .iter()
        .map(|(id, &s)| (id.clone(), cuts.iter().filter(|&&c| s >= c).count()))
        .collect()
}

/// For each band, the `pairs_per_level` pairs within defender tolerance with
/// the largest attacker gap. Ties go to the lexicographically smaller
/// `(image_a, image_b)`, with `image_a < image_b`.
pub fn select_pairs(q: &GmadQuery) -> Result<GmadReport> {
    q.validate()?;
    let bands = quantile_bands(&q.defender_scores, q.num_levels);
    let mut members: Vec<Vec<&str>> = vec![Vec::new(); q.num_levels];
    for (id, &b) in &bands {
        members[b].push(id.as_str());
    }
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (band, ids) in members.iter().enumerate() {
        let mut eligible: Vec<GmadPair> = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let defender_gap = (q.defender_scores[*a] - q.defender_scores[*b]).abs();
                if defender_gap <= q.tolerance {
                    eligible.push(GmadPair {
                        level: band + 1,
                        image_a: a.to_string(),
                        image_b: b.to_string(),
                        defender_gap,
                        attacker_gap: (q.attacker_scores[*a] - q.attacker_scores[*b]).abs(),
                    });
                }
            }
        }
        if eligible.is_empty() {
            let msg = format!("level {}: no pair within defender tolerance {}", band + 1, q.tolerance);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        eligible.sort_by(|x, y| {
            y.attacker_gap
                .total_cmp(&x.attacker_gap)
                .then_with(|| (&x.image_a, &x.image_b).cmp(&(&y.image_a, &y.image_b)))
        });
        eligible.truncate(q.pairs_per_level);
        pairs.extend(eligible);
    }
    Ok(GmadReport { pairs, warnings })
}

/// Two images scaled to a common height and placed side by side with a
/// white gutter.
pub fn montage(a: &ErpImage, b: &ErpImage, height: usize) -> Result<ErpImage> {
    let scale = |img: &ErpImage| -> (Vec<f32>, usize) {
        let w = ((img.width as f64 * height as f64 / img.height as f64).round() as usize).max(1);
        (resize_bilinear(&img.planes(), 3, img.height, img.width, height, w), w)
    };
    let ((pa, wa), (pb, wb)) = (scale(a), scale(b));
    let gutter = (height / 32).max(2);
    let width = wa + gutter + wb;
    let mut px = vec![1.0f32; height * width * 3];
    for (planes, w, x0) in [(&pa, wa, 0), (&pb, wb, wa + gutter)] {
        for y in 0..height {
            for x in 0..w {
                for c in 0..3 {
                    px[(y * width + x0 + x) * 3 + c] = planes[c * height * w + y * w + x].clamp(0.0, 1.0);
                }
            }
        }
    }
    ErpImage::new(px, height, width, SourceKind::Planar, "montage".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[(&str, f64)]) -> BTreeMap<String, f64> {
        v.iter().map(|(k, s)| (k.to_string(), *s)).collect()
    }

    #[test]
    fn bands_split_at_median() {
        let b = quantile_bands(&scores(&[("a", 1.0), ("b", 2.0), ("c", 3.0), ("d", 4.0)]), 2);
        assert_eq!(b.values().cloned().collect::<Vec<_>>(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn equal_scores_share_a_band() {
        let b = quantile_bands(&scores(&[("a", 1.0), ("b", 1.0), ("c", 1.0)]), 3);
        assert!(b.values().all(|&v| v == 2));
    }

    #[test]
    fn mismatched_keys_are_rejected() {
        let q = GmadQuery::new(scores(&[("a", 1.0), ("b", 2.0)]), scores(&[("a", 1.0), ("c", 2.0)]));
        assert!(select_pairs(&q).is_err());
    }
}
