//! Distances between a reference CDF and a candidate CDF.

use super::CalibrationError;

/// Mass given to empty bins of a distribution that appears in a denominator
/// or a logarithm, where the other distribution has mass, before
/// renormalization.
pub const SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Measure {
    /// `Σ P ln(P / Q)` with `P` the reference.
    KullbackLeiblerI,
    /// `Σ Q ln(Q / P)`.
    KullbackLeiblerII,
    JensenShannon,
    TotalVariation,
    Hellinger,
    /// Largest CDF gap.
    KolmogorovSmirnov,
    /// `Σ (P - Q)² / Q`.
    ChiSquared,
    /// 1-D earth mover's distance on the normalized bin axis.
    EarthMover,
}

impl Measure {
    pub const ALL: [Measure; 8] = [
        Measure::KullbackLeiblerI,
        Measure::KullbackLeiblerII,
        Measure::JensenShannon,
        Measure::TotalVariation,
        Measure::Hellinger,
        Measure::KolmogorovSmirnov,
        Measure::ChiSquared,
        Measure::EarthMover,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Measure::KullbackLeiblerI => "kl1",
            Measure::KullbackLeiblerII => "kl2",
            Measure::JensenShannon => "js",
            Measure::TotalVariation => "tv",
            Measure::Hellinger => "hellinger",
            Measure::KolmogorovSmirnov => "ks",
            Measure::ChiSquared => "chi2",
            Measure::EarthMover => "emd",
        }
    }

    /// Distance between two pdfs (with their cdfs for the CDF-based measures).
    pub fn between(&self, p: &[f64], q: &[f64], p_cdf: &[f64], q_cdf: &[f64]) -> f64 {
        match self {
            Measure::KullbackLeiblerI => kl_smoothed(p, q),
            Measure::KullbackLeiblerII => kl_smoothed(q, p),
            Measure::JensenShannon => {
                let mid = |a: f64, b: f64| 0.5 * (a + b);
                let left: f64 = p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / mid(*a, *b)).ln()).sum();
                let right: f64 = q.iter().zip(p).filter(|(b, _)| **b > 0.0).map(|(b, a)| b * (b / mid(*a, *b)).ln()).sum();
                0.5 * left + 0.5 * right
            }
            Measure::TotalVariation => 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>(),
            Measure::Hellinger => {
                let s: f64 = p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
                (0.5 * s).sqrt()
            }
            Measure::KolmogorovSmirnov => p_cdf.iter().zip(q_cdf).fold(0.0, |m, (a, b)| m.max((a - b).abs())),
            Measure::ChiSquared => {
                let total = smoothing_total(q, p);
                p.iter()
                    .zip(q)
                    .map(|(&a, &b)| (a, smoothed_at(b, a, total)))
                    .filter(|(_, b)| *b > 0.0)
                    .map(|(a, b)| (a - b).powi(2) / b)
                    .sum()
            }
            Measure::EarthMover => {
                let len = p_cdf.len() as f64;
                p_cdf.iter().zip(q_cdf).map(|(a, b)| (a - b).abs()).sum::<f64>() / len
            }
        }
    }
}

/// Normalizer of `d` once its empty bins under mass of `other` are raised to
/// [`SMOOTHING`]; `None` when no bin needs raising.
fn smoothing_total(d: &[f64], other: &[f64]) -> Option<f64> {
    if d.iter().zip(other).all(|(v, o)| *v > 0.0 || *o <= 0.0) {
        return None;
    }
    Some(d.iter().zip(other).map(|(&v, &o)| if v <= 0.0 && o > 0.0 { SMOOTHING } else { v }).sum())
}

#[inline]
fn smoothed_at(v: f64, other: f64, total: Option<f64>) -> f64 {
    match total {
        None => v,
        Some(t) => (if v <= 0.0 && other > 0.0 { SMOOTHING } else { v }) / t,
    }
}

/// `Σ P ln(P / Q')` over bins with `P > 0`, where `Q'` is `q` smoothed
/// against `p`.
fn kl_smoothed(p: &[f64], q: &[f64]) -> f64 {
    let total = smoothing_total(q, p);
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(&a, &b)| a * (a / smoothed_at(b, a, total)).ln()).sum()
}

/// Adjacent differences of a CDF, with round-off negatives cleared.
pub fn pdf_from_cdf(cdf: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(cdf.len());
    pdf_into(cdf, &mut out);
    out
}

pub(crate) fn pdf_into(cdf: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let mut prev = 0.0;
    out.extend(cdf.iter().map(|&c| {
        let d = (c - prev).max(0.0);
        prev = c;
        d
    }));
}

/// Weighted sum of measures.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureConfig {
    pub terms: Vec<(Measure, f64)>,
}

impl Default for MeasureConfig {
    /// Kullback-Leibler-I alone.
    fn default() -> Self {
        MeasureConfig { terms: vec![(Measure::KullbackLeiblerI, 1.0)] }
    }
}

impl MeasureConfig {
    /// All implemented measures with equal weights.
    pub fn composite() -> Self {
        let w = 1.0 / Measure::ALL.len() as f64;
        MeasureConfig { terms: Measure::ALL.iter().map(|m| (*m, w)).collect() }
    }

    pub fn score(&self, reference_cdf: &[f64], candidate_cdf: &[f64]) -> Result<f64, CalibrationError> {
        if reference_cdf.len() != candidate_cdf.len() {
            return Err(CalibrationError::LengthMismatch(reference_cdf.len(), candidate_cdf.len()));
        }
        let p = pdf_from_cdf(reference_cdf);
        let q = pdf_from_cdf(candidate_cdf);
        Ok(self.score_pdfs(&p, &q, reference_cdf, candidate_cdf))
    }

    /// [`MeasureConfig::score`] on precomputed pdfs of equal length.
    pub fn score_pdfs(&self, p: &[f64], q: &[f64], p_cdf: &[f64], q_cdf: &[f64]) -> f64 {
        self.terms.iter().map(|(m, w)| w * m.between(p, q, p_cdf, q_cdf)).sum()
    }
}
