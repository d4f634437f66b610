//! Random multiply-accumulate layers with a big-integer accumulation oracle
//! and an exact-rational requantization oracle.

#![allow(dead_code)]

use dfpq::engine::{EngineConfig, PreparedMac, QuantizedWeights};
use dfpq::graph::{Convolution, InnerProduct, Node, Op};
use dfpq::{FloatFormat, QTensor, Scale, Tensor};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Signed, ToPrimitive};
use rand::seq::SliceRandom;
use rand::Rng;

/// Formats spanning every accumulator tier, from small integer lattices to
/// exponent ranges far beyond 128 bits.
pub const FORMATS: [(u32, u32); 10] = [(8, 4), (8, 6), (8, 1), (6, 3), (5, 0), (12, 6), (16, 10), (16, 14), (10, 2), (9, 1)];

pub struct MacCase {
    pub node: Node,
    pub weights: QuantizedWeights,
    pub input: QTensor,
    pub input_shape: Vec<usize>,
    pub activation: FloatFormat,
    pub terms: usize,
}

fn random_codes(rng: &mut impl Rng, f: &FloatFormat, len: usize) -> Vec<u16> {
    let valid: Vec<u16> = (0..f.code_count()).map(|c| c as u16).filter(|&c| f.value_of(c).is_some()).collect();
    let bmax = f.beta_max();
    let extremes: Vec<u16> = valid.iter().copied().filter(|&c| f.value_of(c).unwrap().abs() == bmax).collect();
    (0..len)
        .map(|_| if rng.gen_bool(0.05) { *extremes.choose(rng).unwrap() } else { *valid.choose(rng).unwrap() })
        .collect()
}

fn format(rng: &mut impl Rng) -> FloatFormat {
    let (n, p) = *FORMATS.choose(rng).unwrap();
    FloatFormat::new(n, p).unwrap()
}

/// A convolution or inner product with up to `max_terms` terms per output.
pub fn random_case(rng: &mut impl Rng, max_terms: usize) -> MacCase {
    let activation = format(rng);
    let weight_format = format(rng);
    let alpha = |rng: &mut dyn rand::RngCore| f64::powi(2.0, rng.gen_range(-20..4)) * rng.gen_range(0.5..1.0);
    let bias_scale = rng.gen_range(0.0..4.0);
    let (node, input_shape, cout, per) = if rng.gen_bool(0.5) {
        let terms = rng.gen_range(1..=max_terms);
        let cout = rng.gen_range(1..=4);
        let bias: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0f32..1.0) * bias_scale).collect();
        let ip = InnerProduct { weight: Tensor::zeros(vec![cout, terms]), bias };
        (Node::new("mac", Op::InnerProduct(ip), &["x"], &["y"]), vec![terms], cout, terms)
    } else {
        let groups = *[1usize, 2].choose(rng).unwrap();
        let k = *[1usize, 3].choose(rng).unwrap();
        let cin_per = rng.gen_range(1..=(max_terms / (k * k)).max(1));
        let cout = groups * rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let conv = Convolution {
            weight: Tensor::zeros(vec![cout, cin_per, k, k]),
            bias: (0..cout).map(|_| rng.gen_range(-1.0f32..1.0) * bias_scale).collect(),
            stride: rng.gen_range(1..=2),
            pad: k / 2,
            groups,
        };
        (Node::new("mac", Op::Convolution(conv), &["x"], &["y"]), vec![cin_per * groups, h, w], cout, cin_per * k * k)
    };
    let alpha_x = alpha(rng);
    let alpha_w: Vec<f64> = (0..cout).map(|_| alpha(rng)).collect();
    let weight_shape = match &node.op {
        Op::Convolution(c) => c.weight.shape.clone(),
        Op::InnerProduct(ip) => ip.weight.shape.clone(),
        _ => unreachable!(),
    };
    let codes = random_codes(rng, &weight_format, cout * per);
    let weights = QuantizedWeights {
        codes: QTensor { shape: weight_shape, codes, format: weight_format, scale: Scale::PerChannel(alpha_w.clone()) },
        gamma: alpha_w.iter().map(|a| a * weight_format.beta_max()).collect(),
        degenerate: Vec::new(),
    };
    let numel = input_shape.iter().product();
    let input = QTensor {
        shape: input_shape.clone(),
        codes: random_codes(rng, &activation, numel),
        format: activation,
        scale: Scale::PerTensor(alpha_x),
    };
    MacCase { node, weights, input, input_shape, activation, terms: per }
}

fn exact(v: f64) -> BigInt {
    BigInt::from_f64(v).expect("integer value")
}

/// Exact totals by direct summation over the receptive field, with the
/// accumulator-domain bias `round_ties_even(b / (α_x·α_w))`.
pub fn oracle_totals(case: &MacCase) -> Vec<BigInt> {
    let act = case.activation;
    let wf = case.weights.codes.format;
    let xs: Vec<BigInt> = case.input.codes.iter().map(|&c| exact(act.value_of(c).unwrap())).collect();
    let ws: Vec<BigInt> = case.weights.codes.codes.iter().map(|&c| exact(wf.value_of(c).unwrap())).collect();
    let alpha_x = case.input.scale.for_channel(0);
    let bias = |oc: usize, b: f32| exact((b as f64 / (alpha_x * case.weights.codes.scale.for_channel(oc))).round_ties_even());
    match &case.node.op {
        Op::InnerProduct(ip) => (0..ip.bias.len())
            .map(|oc| {
                let mut t = bias(oc, ip.bias[oc]);
                for i in 0..xs.len() {
                    t += &xs[i] * &ws[oc * xs.len() + i];
                }
                t
            })
            .collect(),
        Op::Convolution(conv) => {
            let (c, h, w) = (case.input_shape[0], case.input_shape[1] as isize, case.input_shape[2] as isize);
            let k = conv.weight.shape[2] as isize;
            let cout = conv.weight.shape[0];
            let (cin_per, cout_per) = (c / conv.groups, cout / conv.groups);
            let (s, pad) = (conv.stride as isize, conv.pad as isize);
            let oh = (h + 2 * pad - k) / s + 1;
            let ow = (w + 2 * pad - k) / s + 1;
            let mut out = Vec::new();
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut t = bias(oc, conv.bias[oc]);
                        for ic in 0..cin_per {
                            let ch = (oc / cout_per) * cin_per + ic;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (iy, ix) = (oy * s + ky - pad, ox * s + kx - pad);
                                    if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                        continue;
                                    }
                                    let xi = (ch as isize * h * w + iy * w + ix) as usize;
                                    let wi = ((oc * cin_per + ic) as isize * k * k + ky * k + kx) as usize;
                                    t += &xs[xi] * &ws[wi];
                                }
                            }
                        }
                        out.push(t);
                    }
                }
            }
            out
        }
        _ => unreachable!(),
    }
}

fn rational(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite")
}

/// True when `f` is the double nearest to `t`, ties to an even significand.
pub fn is_nearest_double(t: &BigInt, f: f64) -> bool {
    if !f.is_finite() {
        return false;
    }
    let t = BigRational::from_integer(t.clone());
    let err = (rational(f) - &t).abs();
    for g in [f.next_up(), f.next_down()] {
        if !g.is_finite() {
            continue;
        }
        let other = (rational(g) - &t).abs();
        if other < err || (other == err && f.to_bits() & 1 == 1) {
            return false;
        }
    }
    true
}

/// Decoded values of a format, ascending, with every code of each value.
pub struct ValueTable {
    entries: Vec<(f64, Vec<u16>)>,
    beta_max: f64,
}

impl ValueTable {
    pub fn new(format: &FloatFormat) -> Self {
        let mut pairs: Vec<(f64, u16)> =
            (0..format.code_count()).map(|c| c as u16).filter_map(|c| format.value_of(c).map(|v| (v, c))).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut entries: Vec<(f64, Vec<u16>)> = Vec::new();
        for (v, c) in pairs {
            match entries.last_mut() {
                Some((last, codes)) if *last == v => codes.push(c),
                _ => entries.push((v, vec![c])),
            }
        }
        ValueTable { entries, beta_max: format.beta_max() }
    }

    /// Codes of the value nearest to `v` after clamping to `[-β_max, β_max]`
    /// (two values on an exact tie), compared in exact arithmetic.
    pub fn nearest(&self, v: &BigRational) -> Vec<(f64, &[u16])> {
        let bmax = rational(self.beta_max);
        let v = if v > &bmax { bmax.clone() } else if v < &-bmax.clone() { -bmax } else { v.clone() };
        let usable: Vec<&(f64, Vec<u16>)> = self.entries.iter().filter(|(x, _)| x.abs() <= self.beta_max).collect();
        let at = usable.partition_point(|(x, _)| rational(*x) < v);
        let mut around: Vec<(BigRational, f64, &[u16])> = Vec::new();
        for (x, codes) in usable[at.saturating_sub(1)..(at + 1).min(usable.len())].iter().copied() {
            around.push(((rational(*x) - &v).abs(), *x, codes.as_slice()));
        }
        let best = around.iter().map(|a| a.0.clone()).min().unwrap();
        around.into_iter().filter(|a| a.0 == best).map(|a| (a.1, a.2)).collect()
    }
}

/// Whether `code` is what exact round-to-nearest, ties-to-even-code, allows.
pub fn rounds_correctly(table: &ValueTable, format: &FloatFormat, v: &BigRational, code: u16) -> bool {
    let Some(value) = format.value_of(code) else { return false };
    let nearest = table.nearest(v);
    if !nearest.iter().any(|(x, _)| *x == value) {
        return false;
    }
    let even_available = nearest.iter().any(|(_, codes)| codes.iter().any(|c| c % 2 == 0));
    nearest.len() == 1 || !even_available || code % 2 == 0
}

pub struct CaseOutcome {
    pub totals_exact: bool,
    pub requantize_exact: bool,
    pub kind: dfpq::engine::AccumulatorKind,
}

/// Runs the engine on a case and checks it against both oracles. The output
/// scale puts the largest output near `β_max` so some values clamp.
pub fn check_case(case: &MacCase, rng: &mut impl Rng) -> CaseOutcome {
    let alpha_x = case.input.scale.for_channel(0);
    let mac = PreparedMac::new(&case.node, Some(&case.weights), &case.input_shape, case.activation, alpha_x, &EngineConfig::default())
        .expect("prepared");
    let totals = mac.totals(&case.input).expect("totals");
    let want = oracle_totals(case);
    let totals_exact = totals.len() == want.len() && totals.iter().zip(&want).all(|(f, t)| is_nearest_double(t, *f));

    let plane = want.len() / case.weights.codes.scale_len();
    let largest = want
        .iter()
        .enumerate()
        .map(|(i, t)| t.abs().to_f64().unwrap() * alpha_x * case.weights.codes.scale.for_channel(i / plane))
        .fold(0.0f64, f64::max);
    let alpha_z = if largest > 0.0 { largest / (case.activation.beta_max() * rng.gen_range(0.6..1.4)) } else { 1.0 };
    let codes = mac.requantize(&totals, alpha_z);
    let table = ValueTable::new(&case.activation);
    let requantize_exact = want.iter().enumerate().all(|(i, t)| {
        let ratio = alpha_x * case.weights.codes.scale.for_channel(i / plane) / alpha_z;
        let v = BigRational::from_integer(t.clone()) * rational(ratio);
        rounds_correctly(&table, &case.activation, &v, codes[i])
    });
    CaseOutcome { totals_exact, requantize_exact, kind: mac.report().kind }
}

trait ScaleLen {
    fn scale_len(&self) -> usize;
}

impl ScaleLen for QTensor {
    fn scale_len(&self) -> usize {
        match &self.scale {
            Scale::PerTensor(_) => 1,
            Scale::PerChannel(v) => v.len(),
        }
    }
}
