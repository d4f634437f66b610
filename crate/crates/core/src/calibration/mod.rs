//! Threshold selection.
//!
//! Weights use per-output-channel max-abs thresholds. Activations use a
//! histogram sweep: for every candidate clipping bin the clipped CDF is
//! resampled onto the format's normalized value grid and back, and the
//! candidate whose round-trip CDF is closest to the observed one wins.

mod measure;
mod network;

pub use measure::{Measure, MeasureConfig};
pub use network::{calibrate_network, quantize_model, BiasMode, CalibrationConfig, CalibrationRecord, NetworkCalibration};

use thiserror::Error;

use crate::engine::EngineError;
use crate::format::{FloatFormat, FormatError};
use crate::graph::GraphError;
use crate::tensor::Tensor;

/// Default histogram resolution.
pub const DEFAULT_BINS: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("cannot build a histogram of an empty tensor")]
    Empty,
    #[error("tensor contains a non-finite value")]
    NonFinite,
    #[error("all-zero tensor has no usable histogram")]
    Degenerate,
    #[error("{bins} bins is too few for a {n}-bit format (need more than {min})")]
    TooFewBins { bins: usize, n: u32, min: usize },
    #[error("distributions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("calibration batch is empty")]
    EmptyBatch,
    #[error("calibration input has shape {got:?}, graph expects {expected:?}")]
    BatchShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("node `{node}`: {kind} layers must be folded before calibration")]
    Unthresholdable { node: String, kind: &'static str },
    #[error("node `{0}` feeds its own scale group")]
    ScaleCycle(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Equal-width histogram of `|x|` over `[0, max |x|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub pdf: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.pdf.len()
    }
}

/// Histogram of absolute values with `num_bins` equal-width bins.
pub fn build_histogram(x: &[f64], num_bins: usize) -> Result<Histogram, CalibrationError> {
    if x.is_empty() || num_bins == 0 {
        return Err(CalibrationError::Empty);
    }
    let mut max = 0.0f64;
    for v in x {
        if !v.is_finite() {
            return Err(CalibrationError::NonFinite);
        }
        max = max.max(v.abs());
    }
    if max == 0.0 {
        return Err(CalibrationError::Degenerate);
    }
    let mut counts = vec![0u64; num_bins];
    let width = max / num_bins as f64;
    for v in x {
        // the right edge belongs to the last bin
        let idx = ((v.abs() / width) as usize).min(num_bins - 1);
        counts[idx] += 1;
    }
    let total = x.len() as f64;
    let pdf: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    // cumulative counts keep cdf[last] exactly 1
    let mut acc = 0u64;
    let cdf = counts
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / total
        })
        .collect();
    let bin_edges = (0..=num_bins)
        .map(|k| if k == num_bins { max } else { max * k as f64 / num_bins as f64 })
        .collect();
    Ok(Histogram { bin_edges, pdf, cdf })
}

/// Parameters of the activation threshold sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub bins: usize,
    pub measure: MeasureConfig,
    /// Disable to replace the grid round-trip by the identity (diagnostics).
    pub resample: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { bins: DEFAULT_BINS, measure: MeasureConfig::default(), resample: true }
    }
}

/// How activation thresholds are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum ActivationThreshold {
    /// Histogram sweep over clipping candidates.
    Sweep(SweepConfig),
    /// Largest magnitude seen, so nothing is clipped.
    MaxAbs,
}

impl Default for ActivationThreshold {
    fn default() -> Self {
        ActivationThreshold::Sweep(SweepConfig::default())
    }
}

/// Outcome of a threshold sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub gamma: f64,
    pub delta: f64,
    /// Winning candidate bin index, `None` when no candidate beat the fallback.
    pub index: Option<usize>,
}

/// Evenly spaced points on `[0, 1]`.
pub fn linspace01(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => {
            let last = (count - 1) as f64;
            (0..count).map(|k| k as f64 / last).collect()
        }
    }
}

/// Piecewise-linear interpolation of `(xp, fp)` evaluated at ascending `xs`,
/// holding the end values outside `[xp[0], xp[last]]`.
pub fn interp_sorted(xs: &[f64], xp: &[f64], fp: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    interp_into(xs, xp, fp, &mut out);
    out
}

fn interp_into(xs: &[f64], xp: &[f64], fp: &[f64], out: &mut Vec<f64>) {
    debug_assert_eq!(xp.len(), fp.len());
    out.clear();
    let last = xp.len() - 1;
    let mut j = 0;
    out.extend(xs.iter().map(|&x| {
        if x <= xp[0] {
            return fp[0];
        }
        if x >= xp[last] {
            return fp[last];
        }
        while xp[j + 1] < x {
            j += 1;
        }
        if xp[j + 1] == x {
            return fp[j + 1];
        }
        fp[j] + (x - xp[j]) * (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j])
    }));
}

/// First candidate bin index of the sweep, `2^(n-1) + 1`.
pub fn first_candidate(format: &FloatFormat) -> usize {
    (1usize << (format.bits() - 1)) + 1
}

/// CDF modeled for clipping at candidate bin `i`.
pub fn candidate_cdf(cdf: &[f64], i: usize, grid: &[f64], resample: bool) -> Vec<f64> {
    let mut r = Vec::with_capacity(cdf.len());
    candidate_cdf_into(cdf, i, grid, resample, &mut r, &mut Scratch::default());
    r
}

#[derive(Default)]
struct Scratch {
    uniform: Vec<f64>,
    on_grid: Vec<f64>,
    back: Vec<f64>,
}

fn candidate_cdf_into(cdf: &[f64], i: usize, grid: &[f64], resample: bool, r: &mut Vec<f64>, s: &mut Scratch) {
    r.clear();
    r.extend_from_slice(cdf);
    for v in &mut r[i - 1..] {
        *v = 1.0;
    }
    if resample {
        s.uniform.clear();
        let last = (i - 1) as f64;
        s.uniform.extend((0..i).map(|k| k as f64 / last));
        interp_into(grid, &s.uniform, &r[..i], &mut s.on_grid);
        interp_into(&s.uniform, grid, &s.on_grid, &mut s.back);
        r[..i].copy_from_slice(&s.back);
    }
}

/// Runs the sweep on a prepared histogram.
pub fn sweep_histogram(hist: &Histogram, format: &FloatFormat, config: &SweepConfig) -> Result<SweepResult, CalibrationError> {
    let bins = hist.bins();
    let start = first_candidate(format);
    if bins <= start {
        return Err(CalibrationError::TooFewBins { bins, n: format.bits(), min: start });
    }
    let grid = format.fpspace_normalized();
    let mut best = SweepResult { gamma: hist.bin_edges[bins], delta: f64::INFINITY, index: None };
    let p = measure::pdf_from_cdf(&hist.cdf);
    let (mut r, mut q, mut scratch) = (Vec::with_capacity(bins), Vec::with_capacity(bins), Scratch::default());
    for i in start..=bins {
        candidate_cdf_into(&hist.cdf, i, &grid, config.resample, &mut r, &mut scratch);
        measure::pdf_into(&r, &mut q);
        let delta = config.measure.score_pdfs(&p, &q, &hist.cdf, &r);
        if best.delta > delta {
            best = SweepResult { gamma: hist.bin_edges[i], delta, index: Some(i) };
        }
    }
    Ok(best)
}

/// Histogram sweep over the absolute values of `x`.
pub fn threshold_sweep(x: &[f64], format: &FloatFormat, config: &SweepConfig) -> Result<SweepResult, CalibrationError> {
    let hist = build_histogram(x, config.bins)?;
    sweep_histogram(&hist, format, config)
}

/// Threshold of `x` under `rule`, plus the sweep outcome when one ran.
pub fn activation_threshold(x: &[f64], format: &FloatFormat, rule: &ActivationThreshold) -> Result<(f64, Option<SweepResult>), CalibrationError> {
    match rule {
        ActivationThreshold::Sweep(config) => threshold_sweep(x, format, config).map(|r| (r.gamma, Some(r))),
        ActivationThreshold::MaxAbs => {
            let hist = build_histogram(x, 1)?;
            Ok((hist.bin_edges[1], None))
        }
    }
}

/// Per-output-channel max-abs thresholds of a weight tensor (leading axis).
/// All-zero channels get 1; their indices are returned alongside.
pub fn weight_thresholds(w: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let stride = w.channel_stride().max(1);
    let mut gammas = Vec::with_capacity(w.channels());
    let mut degenerate = Vec::new();
    for (c, chunk) in w.data.chunks(stride).enumerate() {
        let m = chunk.iter().fold(0.0f32, |a, v| a.max(v.abs())) as f64;
        if m > 0.0 {
            gammas.push(m);
        } else {
            gammas.push(1.0);
            degenerate.push(c);
        }
    }
    (gammas, degenerate)
}
