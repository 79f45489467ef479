//! Correlation metrics between predicted and subjective scores.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_pair(pred: &[f64], mos: &[f64], min_len: usize) -> Result<()> {
    if pred.len() != mos.len() {
        return Err(Error::Precondition(format!("{} predictions for {} scores", pred.len(), mos.len())));
    }
    if pred.len() < min_len {
        return Err(Error::Precondition(format!("need at least {min_len} samples, got {}", pred.len())));
    }
    if pred.iter().chain(mos).any(|v| !v.is_finite()) {
        return Err(Error::Precondition("scores must be finite".into()));
    }
    Ok(())
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; errors when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Precondition("correlation undefined for a constant vector".into()));
    }
    // one square root keeps rank correlations exact for small n
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank-order correlation (Pearson correlation of average ranks).
pub fn srcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos, 3)?;
    pearson(&average_ranks(pred), &average_ranks(mos))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// `(β1, β2, β3, β4)` of `(β1 − β2) / (1 + exp(−(x − β3) / |β4|)) + β2`.
    pub params: [f64; 4],
    pub converged: bool,
    pub iterations: usize,
    pub rss: f64,
}

pub const LOGISTIC_MAX_ITER: usize = 500;
pub const LOGISTIC_STEP_TOL: f64 = 1e-8;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logistic(params: &[f64; 4], x: f64) -> f64 {
    let [b1, b2, b3, b4] = *params;
    (b1 - b2) * sigmoid((x - b3) / b4.abs()) + b2
}

fn rss(params: &[f64; 4], pred: &[f64], mos: &[f64]) -> f64 {
    pred.iter().zip(mos).map(|(&x, &y)| (logistic(params, x) - y).powi(2)).sum()
}

/// Levenberg–Marquardt least squares from `β = (max mos, min mos, mean pred, std pred)`,
/// with `β3` kept within the range of `pred`.
pub fn logistic_fit(pred: &[f64], mos: &[f64]) -> Result<LogisticFit> {
    check_pair(pred, mos, 5)?;
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let std = (pred.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(Error::Precondition("logistic fit needs non-constant predictions".into()));
    }
    let hi = mos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = mos.iter().cloned().fold(f64::INFINITY, f64::min);
    let p_lo = pred.iter().cloned().fold(f64::INFINITY, f64::min);
    let p_hi = pred.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut beta = [hi, lo, mean, std];
    let mut cost = rss(&beta, pred, mos);
    let mut damping = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < LOGISTIC_MAX_ITER {
        iterations += 1;
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        let [b1, b2, b3, b4] = beta;
        let s = b4.abs();
        for (&x, &y) in pred.iter().zip(mos) {
            let z = (x - b3) / s;
            let g = sigmoid(z);
            let slope = (b1 - b2) * g * (1.0 - g);
            let j = Vector4::new(g, 1.0 - g, -slope / s, -slope * z / s * b4.signum());
            let r = y - ((b1 - b2) * g + b2);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        while damping < 1e12 {
            let mut a = jtj;
            for d in 0..4 {
                a[(d, d)] += damping * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                damping *= 10.0;
                continue;
            };
            // the centre stays inside the data; outside it the curve saturates
            // to a constant and the correlation is undefined
            let centre = (beta[2] + step[2]).clamp(p_lo, p_hi);
            let candidate = [beta[0] + step[0], beta[1] + step[1], centre, beta[3] + step[3]];
            let c = rss(&candidate, pred, mos);
            if c.is_finite() && c <= cost && candidate[3] != 0.0 {
                let small = candidate.iter().zip(&beta).all(|(a, b)| (a - b).abs() < LOGISTIC_STEP_TOL);
                beta = candidate;
                cost = c;
                damping = (damping / 10.0).max(1e-12);
                improved = true;
                converged = small;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            // no descent direction left at any damping: a stationary point
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        log::warn!("logistic fit stopped after {iterations} iterations without converging");
    }
    Ok(LogisticFit {
        params: beta,
        converged,
        iterations,
        rss: cost,
    })
}

/// Pearson correlation between the logistic-mapped predictions and the scores.
pub fn plcc(pred: &[f64], mos: &[f64]) -> Result<(f64, LogisticFit)> {
    let fit = logistic_fit(pred, mos)?;
    let mapped: Vec<f64> = pred.iter().map(|&x| logistic(&fit.params, x)).collect();
    Ok((pearson(&mapped, mos)?, fit))
}

/// Median with the mean-of-middle-pair rule for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}
