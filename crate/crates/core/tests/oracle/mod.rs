//! Naive threshold sweep used as an oracle: every step is recomputed from
//! scratch with plain loops and materialized intermediate vectors.

#![allow(dead_code)]

pub mod mac;

use dfpq::FloatFormat;

pub struct OracleSweep {
    pub gamma: f64,
    pub delta: f64,
    pub index: usize,
    pub scores: Vec<(usize, f64)>,
}

/// Non-negative values of the format over its largest positive value,
/// taken from per-code decoding.
pub fn normalized_grid(format: &FloatFormat) -> Vec<f64> {
    let mut values: Vec<f64> = (0..format.code_count()).map(|c| c as u16).filter_map(|c| format.value_of(c)).collect();
    let top = values.iter().copied().fold(0.0f64, f64::max);
    values.retain(|v| *v >= 0.0 && *v <= top);
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    values.iter().map(|v| v / top).collect()
}

pub fn histogram_cdf(x: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>) {
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let width = max / bins as f64;
    let mut counts = vec![0u64; bins];
    for v in x {
        let k = ((v.abs() / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let mut cdf = Vec::with_capacity(bins);
    let mut acc = 0u64;
    for c in &counts {
        acc += c;
        cdf.push(acc as f64 / x.len() as f64);
    }
    let edges = (0..=bins).map(|k| if k == bins { max } else { max * k as f64 / bins as f64 }).collect();
    (edges, cdf)
}

fn interp(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    let last = xp.len() - 1;
    if x <= xp[0] {
        return fp[0];
    }
    if x >= xp[last] {
        return fp[last];
    }
    // first j with xp[j + 1] >= x
    let j = xp.partition_point(|&v| v < x) - 1;
    if xp[j + 1] == x {
        return fp[j + 1];
    }
    fp[j] + (x - xp[j]) * (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j])
}

fn pdf(cdf: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    cdf.iter()
        .map(|&c| {
            let d = (c - prev).max(0.0);
            prev = c;
            d
        })
        .collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let needs = p.iter().zip(q).any(|(a, b)| *a > 0.0 && *b <= 0.0);
    let q: Vec<f64> = if needs {
        let raised: Vec<f64> = p.iter().zip(q).map(|(a, b)| if *b <= 0.0 && *a > 0.0 { 1e-12 } else { *b }).collect();
        let total: f64 = raised.iter().sum();
        raised.iter().map(|v| v / total).collect()
    } else {
        q.to_vec()
    };
    p.iter().zip(&q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Clipped CDF at bin `i`, sent through the normalized grid and back.
pub fn candidate(cdf: &[f64], i: usize, grid: &[f64]) -> Vec<f64> {
    let mut r = cdf.to_vec();
    for v in r.iter_mut().skip(i - 1) {
        *v = 1.0;
    }
    let uniform: Vec<f64> = (0..i).map(|k| k as f64 / (i - 1) as f64).collect();
    let on_grid: Vec<f64> = grid.iter().map(|&g| interp(g, &uniform, &r[..i])).collect();
    for k in 0..i {
        r[k] = interp(uniform[k], grid, &on_grid);
    }
    r
}

/// Scores every candidate with Kullback-Leibler-I; first minimum wins.
pub fn sweep(x: &[f64], format: &FloatFormat, bins: usize) -> OracleSweep {
    let (edges, cdf) = histogram_cdf(x, bins);
    let grid = normalized_grid(format);
    let p = pdf(&cdf);
    let start = (1usize << (format.bits() - 1)) + 1;
    let scores: Vec<(usize, f64)> = (start..=bins).map(|i| (i, kl(&p, &pdf(&candidate(&cdf, i, &grid))))).collect();
    let (index, delta) = scores.iter().copied().fold((0, f64::INFINITY), |best, s| if s.1 < best.1 { s } else { best });
    OracleSweep { gamma: edges[index], delta, index, scores }
}
