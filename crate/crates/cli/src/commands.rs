//! The `dfpq` subcommands. Each returns a report that renders to text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dfpq::calibration::{quantize_model, ActivationThreshold, BiasMode, CalibrationConfig, MeasureConfig, NetworkCalibration, SweepConfig};
use dfpq::engine::{compare_outputs, quantized_forward, reference_forward, reference_outputs, EngineConfig, ExecutionPlan, QuantizedModel};
use dfpq::graph::Graph;
use dfpq::{Encoding, FloatFormat, SpecialValues, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::container::{load_model, QuantizedContainer};
use crate::dataset::Dataset;

pub const REPORT: &str = "calibration.txt";

#[derive(Debug, Parser)]
#[command(name = "dfpq", version, about = "Dynamic floating-point quantization of CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate a float model and write a quantized container.
    Calibrate(CalibrateArgs),
    /// Run a quantized container on a labelled dataset.
    Infer(InferArgs),
    /// Accuracy over a grid of formats and calibration sizes.
    Sweep(SweepArgs),
    /// Describe (n, p) formats.
    Formats(FormatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncodingArg {
    SignMagnitude,
    TwosComplement,
}

impl From<EncodingArg> for Encoding {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::SignMagnitude => Encoding::SignMagnitude,
            EncodingArg::TwosComplement => Encoding::TwosComplement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MeasureArg {
    /// KL divergence of the candidate from the reference.
    Kl1,
    /// Weighted sum of distances and divergences.
    Composite,
    /// No sweep: the largest magnitude seen, nothing clipped.
    MaxAbs,
}

impl MeasureArg {
    pub fn rule(self, bins: usize) -> ActivationThreshold {
        let measure = match self {
            MeasureArg::Kl1 => MeasureConfig::default(),
            MeasureArg::Composite => MeasureConfig::composite(),
            MeasureArg::MaxAbs => return ActivationThreshold::MaxAbs,
        };
        ActivationThreshold::Sweep(SweepConfig { bins, measure, resample: true })
    }

    fn name(self) -> String {
        self.to_possible_value().map_or(String::new(), |v| v.get_name().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BiasArg {
    Accumulator,
    Output,
}

impl From<BiasArg> for BiasMode {
    fn from(b: BiasArg) -> Self {
        match b {
            BiasArg::Accumulator => BiasMode::Accumulator,
            BiasArg::Output => BiasMode::Output,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

/// Options shared by every format of a run.
#[derive(Debug, Clone, Args)]
pub struct FormatOptions {
    /// Flush values below the normal range to zero.
    #[arg(long)]
    pub no_subnormals: bool,
    /// Reserve the all-ones exponent for Inf and NaN.
    #[arg(long)]
    pub reserve_inf_nan: bool,
    #[arg(long, value_enum, default_value = "sign-magnitude")]
    pub encoding: EncodingArg,
}

impl FormatOptions {
    pub fn format(&self, n: u32, p: u32) -> Result<FloatFormat> {
        let specials = if self.reserve_inf_nan { SpecialValues::ReserveInfNaN } else { SpecialValues::ExtendNumeric };
        Ok(FloatFormat::with_options(n, p, self.encoding.into(), !self.no_subnormals, specials)?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Float model container.
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration image set.
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub calib_size: usize,
    /// Bits per code.
    #[arg(long)]
    pub n: u32,
    /// Significand bits.
    #[arg(long)]
    pub p: u32,
    #[command(flatten)]
    pub options: FormatOptions,
    /// Weight bits, when weights use a different format.
    #[arg(long)]
    pub weight_n: Option<u32>,
    #[arg(long)]
    pub weight_p: Option<u32>,
    #[arg(long, value_enum, default_value = "kl1")]
    pub measure: MeasureArg,
    #[arg(long, default_value_t = 2048)]
    pub bins: usize,
    /// Seed of the calibration subset selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "accumulator")]
    pub bias: BiasArg,
    /// Reject layers whose accumulator would exceed this many bits.
    #[arg(long)]
    pub accumulator_bits: Option<u32>,
    /// Output container directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl CalibrateArgs {
    pub fn config(&self) -> Result<CalibrationConfig> {
        let activation_format = self.options.format(self.n, self.p)?;
        let weight_format = match (self.weight_n, self.weight_p) {
            (None, None) => activation_format,
            (n, p) => self.options.format(n.unwrap_or(self.n), p.unwrap_or(self.p))?,
        };
        Ok(CalibrationConfig {
            activation_format,
            weight_format,
            activation_threshold: self.measure.rule(self.bins),
            bias_mode: self.bias.into(),
            accumulator_bits: self.accumulator_bits,
        })
    }
}

/// `size` images of `data` chosen by a seeded shuffle.
pub fn select_calibration(data: &Dataset, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    ensure!(size > 0, "calibration size must be positive");
    ensure!(size <= data.len(), "calibration size {size} exceeds the {} available images", data.len());
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx[..size].iter().map(|&i| data.images[i].clone()).collect())
}

pub struct CalibrateOutcome {
    pub model: QuantizedModel,
    pub calibration: NetworkCalibration,
    pub container: QuantizedContainer,
    pub report: String,
}

pub fn calibrate(args: &CalibrateArgs) -> Result<CalibrateOutcome> {
    let graph = load_model(&args.model).with_context(|| format!("reading model {}", args.model.display()))?;
    let data = Dataset::read(&args.calib).with_context(|| format!("reading calibration set {}", args.calib.display()))?;
    let batch = select_calibration(&data, args.calib_size, args.seed)?;
    let config = args.config()?;
    let (model, calibration) = quantize_model(&graph, &batch, &config)?;
    let engine = EngineConfig { accumulator_bits: config.accumulator_bits, bias_mode: config.bias_mode };
    let container = QuantizedContainer::from_model(&model, &engine)?;
    container.write(&args.out)?;
    let report = calibration_report(&model, &calibration, &container, args);
    std::fs::write(args.out.join(REPORT), &report).with_context(|| format!("writing {}", args.out.join(REPORT).display()))?;
    Ok(CalibrateOutcome { model, calibration, container, report })
}

fn calibration_report(model: &QuantizedModel, cal: &NetworkCalibration, container: &QuantizedContainer, args: &CalibrateArgs) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "activation format {}", model.activation_format);
    let _ = writeln!(s, "weight format     {}", model.weight_format);
    let _ = writeln!(s, "calibration       {} images, seed {}, {} measure, {} bins", args.calib_size, args.seed, args.measure.name(), args.bins);
    let _ = writeln!(s, "\n{:<28} {:>14} {:>12} {:>9}  format", "tensor", "gamma", "delta", "candidate");
    for r in cal.records.values() {
        let gamma = match r.gamma.as_slice() {
            [g] => format!("{g:.6e}"),
            gs => format!("{} channels", gs.len()),
        };
        let delta = r.delta.map_or("-".into(), |d| format!("{d:.4e}"));
        let candidate = r.candidate.map_or("-".into(), |c| c.to_string());
        let flag = if r.degenerate { "  (all zero)" } else { "" };
        let _ = writeln!(s, "{:<28} {:>14} {:>12} {:>9}  {}{}", r.tensor_id, gamma, delta, candidate, r.format, flag);
    }
    let m = &container.manifest;
    if !m.downscale_factors.is_empty() {
        let _ = writeln!(s, "\ndownscale factors");
        for f in &m.downscale_factors {
            let _ = writeln!(s, "  {:<26} {:.6}", f.node, f.factor);
        }
    }
    let _ = writeln!(s, "\n{:<28} {:>8} {:>6} {:>8}  kind", "accumulator", "terms", "q", "q+bias");
    for a in &m.accumulators {
        let _ = writeln!(s, "{:<28} {:>8} {:>6} {:>8}  {:?}", a.node, a.terms, a.spec.q, a.q_with_bias, a.kind);
    }
    s
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    /// Quantized container.
    #[arg(long)]
    pub quantized: PathBuf,
    /// Labelled evaluation set.
    #[arg(long)]
    pub data: PathBuf,
    /// Float model to compare against, layer by layer.
    #[arg(long)]
    pub compare_float: Option<PathBuf>,
}

/// Error of one tensor over a whole evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerError {
    pub tensor: String,
    pub max_abs_err: f64,
    /// `max_abs_err / max |reference|`, both taken over the set.
    pub max_rel_err: f64,
    /// Read only by ReLUs: the negative tail is clipped at the group
    /// threshold of the ReLU output and never reaches later layers.
    pub pre_relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FloatComparison {
    pub accuracy: f64,
    /// Fraction of images whose top-1 class matches the float model.
    pub agreement: f64,
    pub layers: Vec<LayerError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferReport {
    pub images: usize,
    pub accuracy: f64,
    pub float: Option<FloatComparison>,
}

impl InferReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images       {}", self.images);
        let _ = writeln!(s, "top-1        {:.2}%", 100.0 * self.accuracy);
        if let Some(f) = &self.float {
            let _ = writeln!(s, "float top-1  {:.2}% ({:+.2} points)", 100.0 * f.accuracy, 100.0 * (self.accuracy - f.accuracy));
            let _ = writeln!(s, "agreement    {:.2}%", 100.0 * f.agreement);
            let _ = writeln!(s, "\n{:<28} {:>12} {:>12}", "tensor", "max abs err", "max rel err");
            for l in &f.layers {
                let note = if l.pre_relu { "  (pre-relu, negatives clipped)" } else { "" };
                let _ = writeln!(s, "{:<28} {:>12.4e} {:>12.4e}{}", l.tensor, l.max_abs_err, l.max_rel_err, note);
            }
        }
        s
    }
}

fn labels(data: &Dataset) -> Result<&[usize]> {
    ensure!(!data.is_empty(), "the dataset is empty");
    data.labels.as_deref().context("the dataset has no labels")
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

/// Top-1 accuracy of quantized execution.
pub fn quantized_accuracy(plan: &ExecutionPlan, data: &Dataset) -> Result<f64> {
    let labels = labels(data)?;
    let mut hits = 0;
    for (x, &y) in data.images.iter().zip(labels) {
        hits += usize::from(quantized_forward(plan, x)?.logits().argmax() == Some(y));
    }
    Ok(fraction(hits, data.len()))
}

/// Top-1 accuracy of single-precision execution.
pub fn float_accuracy(graph: &Graph, data: &Dataset) -> Result<f64> {
    let labels = labels(data)?;
    let mut hits = 0;
    for (x, &y) in data.images.iter().zip(labels) {
        hits += usize::from(reference_outputs(graph, x)?[0].argmax() == Some(y));
    }
    Ok(fraction(hits, data.len()))
}

pub fn load_plan(dir: &Path) -> Result<ExecutionPlan> {
    let container = QuantizedContainer::read(dir).with_context(|| format!("reading quantized container {}", dir.display()))?;
    let model = container.model()?;
    Ok(ExecutionPlan::new(&model, &container.engine_config())?)
}

pub fn infer(args: &InferArgs) -> Result<InferReport> {
    let plan = load_plan(&args.quantized)?;
    let data = Dataset::read(&args.data).with_context(|| format!("reading dataset {}", args.data.display()))?;
    let labels = labels(&data)?;
    let float = match &args.compare_float {
        Some(path) => Some(load_model(path).with_context(|| format!("reading model {}", path.display()))?),
        None => None,
    };
    let mut hits = 0;
    let mut float_hits = 0;
    let mut agree = 0;
    // per tensor: max |q - f| and max |f|
    let mut layers: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (x, &y) in data.images.iter().zip(labels) {
        let run = quantized_forward(&plan, x)?;
        let top = run.logits().argmax();
        hits += usize::from(top == Some(y));
        let Some(graph) = &float else { continue };
        let reference = reference_forward(graph, x)?;
        let ref_top = reference_outputs(graph, x)?[0].argmax();
        float_hits += usize::from(ref_top == Some(y));
        agree += usize::from(ref_top == top);
        for (t, q) in &run.tensors {
            let Some(r) = reference.get(t) else { continue };
            if r.shape != q.shape {
                continue;
            }
            let c = compare_outputs(r, &dfpq::dequantize_tensor(q))?;
            let e = layers.entry(t.clone()).or_insert((0.0, 0.0));
            e.0 = e.0.max(c.max_abs_err);
            e.1 = e.1.max(r.max_abs() as f64);
        }
    }
    let n = data.len();
    let float = float.map(|_| {
        let graph = plan.graph();
        let consumers = graph.consumers();
        let pre_relu = |t: &str| {
            consumers.get(t).is_some_and(|cs| !cs.is_empty() && cs.iter().all(|&c| matches!(graph.nodes[c].op, dfpq::graph::Op::ReLU)))
        };
        // report in execution order
        let layers = plan
            .order()
            .into_iter()
            .filter_map(|id| graph.node(id).and_then(|n| n.outputs.first()))
            .filter_map(|t| {
                let &(abs, scale) = layers.get(t)?;
                let rel = if abs == 0.0 { 0.0 } else { abs / scale };
                Some(LayerError { tensor: t.clone(), max_abs_err: abs, max_rel_err: rel, pre_relu: pre_relu(t) })
            })
            .collect();
        FloatComparison { accuracy: fraction(float_hits, n), agreement: fraction(agree, n), layers }
    });
    Ok(InferReport { images: n, accuracy: fraction(hits, n), float })
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Labelled evaluation set.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub n: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
    pub p: Vec<u32>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "on")]
    pub subnormals: Vec<Toggle>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "off")]
    pub inf_nan: Vec<Toggle>,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub calib_size: Vec<usize>,
    #[arg(long, value_enum, default_value = "sign-magnitude")]
    pub encoding: EncodingArg,
    #[arg(long, value_enum, default_value = "kl1")]
    pub measure: MeasureArg,
    #[arg(long, default_value_t = 2048)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate only the first images of the set.
    #[arg(long)]
    pub eval_size: Option<usize>,
    /// CSV destination; the text table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub n: u32,
    pub p: u32,
    pub label: &'static str,
    pub subnormals: bool,
    pub inf_nan: bool,
    pub calib_size: usize,
    pub accuracy: Option<f64>,
    pub delta_points: Option<f64>,
    pub status: String,
}

/// Whether accuracy at the smallest `p` of a series falls more than one
/// point below the best `p`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseNote {
    pub n: u32,
    pub subnormals: bool,
    pub inf_nan: bool,
    pub calib_size: usize,
    pub lowest_p: u32,
    pub lowest_accuracy: f64,
    pub best_p: u32,
    pub best_accuracy: f64,
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub float_accuracy: f64,
    pub cells: Vec<SweepCell>,
    pub collapse: Vec<CollapseNote>,
}

/// Tolerance, in accuracy points, used to call a cell collapsed.
pub const COLLAPSE_POINTS: f64 = 1.0;

pub fn format_label(n: u32, p: u32) -> &'static str {
    if p + 1 == n {
        "fixed-point"
    } else if p + 2 == n {
        "dynamic fixed-point"
    } else {
        "floating-point"
    }
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "p", "label", "subnormals", "inf_nan", "calib_size", "accuracy", "delta_points", "status"])?;
        for c in &self.cells {
            w.write_record([
                c.n.to_string(),
                c.p.to_string(),
                c.label.to_string(),
                c.subnormals.to_string(),
                c.inf_nan.to_string(),
                c.calib_size.to_string(),
                c.accuracy.map_or(String::new(), |a| format!("{:.4}", 100.0 * a)),
                c.delta_points.map_or(String::new(), |d| format!("{d:.4}")),
                c.status.clone(),
            ])?;
        }
        Ok(w.into_inner()?)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "float top-1 {:.2}%\n", 100.0 * self.float_accuracy);
        let _ = writeln!(
            s,
            "{:>3} {:>3}  {:<20} {:>10} {:>7} {:>6} {:>9} {:>8}  status",
            "n", "p", "label", "subnormals", "inf_nan", "calib", "top-1", "delta"
        );
        for c in &self.cells {
            let acc = c.accuracy.map_or("-".into(), |a| format!("{:.2}%", 100.0 * a));
            let delta = c.delta_points.map_or("-".into(), |d| format!("{d:+.2}"));
            let _ = writeln!(
                s,
                "{:>3} {:>3}  {:<20} {:>10} {:>7} {:>6} {:>9} {:>8}  {}",
                c.n, c.p, c.label, c.subnormals, c.inf_nan, c.calib_size, acc, delta, c.status
            );
        }
        for c in &self.collapse {
            let _ = writeln!(
                s,
                "\nlow-p collapse {} (n={}, subnormals={}, inf_nan={}, calib={}): p={} at {:.2}% vs best p={} at {:.2}%",
                if c.observed { "observed" } else { "not observed" },
                c.n,
                c.subnormals,
                c.inf_nan,
                c.calib_size,
                c.lowest_p,
                100.0 * c.lowest_accuracy,
                c.best_p,
                100.0 * c.best_accuracy
            );
        }
        s
    }
}

/// (n, subnormals, inf_nan, calib_size): the axes a collapse series holds fixed.
type SeriesKey = (u32, bool, bool, usize);

fn collapse_notes(cells: &[SweepCell]) -> Vec<CollapseNote> {
    let mut series: BTreeMap<SeriesKey, Vec<(u32, f64)>> = BTreeMap::new();
    for c in cells {
        if let Some(a) = c.accuracy {
            series.entry((c.n, c.subnormals, c.inf_nan, c.calib_size)).or_default().push((c.p, a));
        }
    }
    series
        .into_iter()
        .filter(|(_, pts)| pts.len() > 1)
        .map(|((n, subnormals, inf_nan, calib_size), pts)| {
            let &(lowest_p, lowest_accuracy) = pts.iter().min_by_key(|(p, _)| *p).expect("non-empty");
            let &(best_p, best_accuracy) = pts.iter().fold(&pts[0], |b, c| if c.1 > b.1 { c } else { b });
            let observed = 100.0 * (best_accuracy - lowest_accuracy) > COLLAPSE_POINTS;
            CollapseNote { n, subnormals, inf_nan, calib_size, lowest_p, lowest_accuracy, best_p, best_accuracy, observed }
        })
        .collect()
}

pub fn sweep(args: &SweepArgs) -> Result<SweepReport> {
    let graph = load_model(&args.model).with_context(|| format!("reading model {}", args.model.display()))?;
    let calib = Dataset::read(&args.calib).with_context(|| format!("reading calibration set {}", args.calib.display()))?;
    let mut data = Dataset::read(&args.data).with_context(|| format!("reading dataset {}", args.data.display()))?;
    if let Some(k) = args.eval_size {
        data.images.truncate(k);
        if let Some(labels) = data.labels.as_mut() {
            labels.truncate(k);
        }
    }
    let float = float_accuracy(&graph, &data)?;
    let mut cells = Vec::new();
    for &n in &args.n {
        for &p in &args.p {
            for &sub in &args.subnormals {
                for &inf in &args.inf_nan {
                    for &size in &args.calib_size {
                        let options = FormatOptions { no_subnormals: !sub.on(), reserve_inf_nan: inf.on(), encoding: args.encoding };
                        let run = || -> Result<f64> {
                            let format = options.format(n, p)?;
                            let config =
                                CalibrationConfig { activation_threshold: args.measure.rule(args.bins), ..CalibrationConfig::new(format) };
                            let batch = select_calibration(&calib, size, args.seed)?;
                            let (model, _) = quantize_model(&graph, &batch, &config)?;
                            quantized_accuracy(&ExecutionPlan::new(&model, &EngineConfig::default())?, &data)
                        };
                        let outcome = run();
                        cells.push(SweepCell {
                            n,
                            p,
                            label: format_label(n, p),
                            subnormals: sub.on(),
                            inf_nan: inf.on(),
                            calib_size: size,
                            accuracy: outcome.as_ref().ok().copied(),
                            delta_points: outcome.as_ref().ok().map(|a| 100.0 * (a - float)),
                            status: match &outcome {
                                Ok(_) => "ok".into(),
                                Err(e) => format!("{e:#}"),
                            },
                        });
                    }
                }
            }
        }
    }
    let collapse = collapse_notes(&cells);
    Ok(SweepReport { float_accuracy: float, cells, collapse })
}

#[derive(Debug, Clone, Args)]
pub struct FormatsArgs {
    #[arg(long)]
    pub n: u32,
    /// Significand widths to describe.
    #[arg(long, value_delimiter = ',', required = true)]
    pub p: Vec<u32>,
    #[command(flatten)]
    pub options: FormatOptions,
    /// Largest grid printed in full.
    #[arg(long, default_value_t = 64)]
    pub grid_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormatSummary {
    pub format: FloatFormat,
    pub beta_max: f64,
    pub closed_form_beta_max: f64,
    /// Distinct finite values.
    pub values: usize,
    /// Smallest positive value with a nonzero exponent field.
    pub smallest_normal: Option<f64>,
    /// Spacing of values below the normal range.
    pub subnormal_step: Option<f64>,
    /// Non-negative values divided by `β_max`.
    pub grid: Vec<f64>,
    pub notes: Vec<&'static str>,
}

pub fn format_summary(format: FloatFormat) -> FormatSummary {
    let (n, p) = (format.bits(), format.significand_bits());
    let e = format.exponent_bits();
    let smallest_normal = if e == 0 { None } else { format.value_of(1u16 << p) };
    let subnormal_step = if e == 0 || format.subnormals() { Some(1.0) } else { None };
    let mut notes = Vec::new();
    if e == 0 {
        notes.push("no exponent bits");
    }
    if p + 2 == n {
        notes.push("dynamic fixed-point");
    }
    if smallest_normal.is_none() && e > 0 {
        notes.push("every nonzero exponent is reserved");
    }
    FormatSummary {
        format,
        beta_max: format.beta_max(),
        closed_form_beta_max: format.closed_form_beta_max(),
        values: format.enumerate_values().len(),
        smallest_normal,
        subnormal_step,
        grid: format.fpspace_normalized(),
        notes,
    }
}

fn exact(v: f64) -> String {
    if v.abs() < 1e15 {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// `k/β_max` in lowest terms when exact in 64 bits, else a decimal.
fn grid_point(v: f64, beta_max: f64) -> String {
    let k = (v * beta_max).round();
    if beta_max < 9.0e15 && k == v * beta_max {
        let (mut a, mut b) = (k as u64, beta_max as u64);
        let (num, den) = (a, b);
        while b != 0 {
            (a, b) = (b, a % b);
        }
        let g = a.max(1);
        match (num / g, den / g) {
            (0, _) => "0".into(),
            (x, 1) => x.to_string(),
            (x, d) => format!("{x}/{d}"),
        }
    } else {
        format!("{v:.6e}")
    }
}

impl FormatSummary {
    pub fn render(&self, grid_limit: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format {}", self.format);
        let _ = writeln!(s, "  exponent bits     {}", self.format.exponent_bits());
        let _ = writeln!(s, "  beta_max          {}", exact(self.beta_max));
        let _ = writeln!(s, "  distinct values   {}", self.values);
        let _ = writeln!(s, "  smallest normal   {}", self.smallest_normal.map_or("-".into(), exact));
        let _ = writeln!(s, "  subnormal step    {}", self.subnormal_step.map_or("-".into(), exact));
        let points: Vec<String> = self.grid.iter().map(|&v| grid_point(v, self.beta_max)).collect();
        let shown = if points.len() <= grid_limit {
            points.join(", ")
        } else {
            let half = grid_limit / 2;
            format!("{}, ..., {}", points[..half].join(", "), points[points.len() - half..].join(", "))
        };
        let _ = writeln!(s, "  grid / beta_max   {{{shown}}}");
        for note in &self.notes {
            let _ = writeln!(s, "  note: {note}");
        }
        s
    }
}

pub fn formats(args: &FormatsArgs) -> Result<Vec<FormatSummary>> {
    if args.p.is_empty() {
        bail!("no significand widths given");
    }
    args.p.iter().map(|&p| Ok(format_summary(args.options.format(args.n, p)?))).collect()
}

/// Runs one command and returns its standard output.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Calibrate(a) => {
            let out = calibrate(a)?;
            Ok(format!("wrote {}\n{}", a.out.display(), out.report))
        }
        Command::Infer(a) => Ok(infer(a)?.render()),
        Command::Sweep(a) => {
            let report = sweep(a)?;
            if let Some(path) = &a.out {
                std::fs::write(path, report.to_csv()?).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(report.render())
        }
        Command::Formats(a) => Ok(formats(a)?.iter().map(|f| f.render(a.grid_limit)).collect::<Vec<_>>().join("\n")),
    }
}
