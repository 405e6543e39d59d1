// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub value: f64,
    pub probability: f64,
}

/// Empirical CDF evaluated at each distinct sample value.
pub fn compute_cdf(samples: &[f64]) -> Vec<CdfPoint> {
    let mut xs: Vec<f64> = samples.iter().copied().filter(|x| !x.is_nan()).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        let p = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.value == *x => last.probability = p,
            _ => out.push(CdfPoint { value: *x, probability: p }),
        }
    }
    out
}

/// Keeps at most `max_points` points, always including the last.
pub fn thin_cdf(cdf: &[CdfPoint], max_points: usize) -> Vec<CdfPoint> {
    if cdf.len() <= max_points || max_points < 2 {
        return cdf.to_vec();
    }
    let step = (cdf.len() - 1) as f64 / (max_points - 1) as f64;
    let mut out: Vec<CdfPoint> = (0..max_points).map(|i| cdf[(i as f64 * step).round() as usize]).collect();
    out.dedup_by(|a, b| a.value == b.value);
    *out.last_mut().expect("non-empty") = *cdf.last().expect("non-empty");
    out
}

/// Nearest-rank quantile of an ascending slice; NaN when empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
