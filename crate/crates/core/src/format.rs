//! Dynamic floating-point value sets.
//!
//! A [`FloatFormat`] describes an `n`-bit code with `p` significand bits and
//! `n - p - 1` exponent bits. Every code decodes to an integer `β`; a real
//! tensor element is represented as `α × β` where the per-tensor scale `α` is
//! the smallest positive subnormal magnitude. The threshold `γ = α × β_max`
//! is the largest real magnitude a scaled format can hold.
//!
//! Two storage encodings are supported. Sign-magnitude is the reference
//! encoding; two's complement follows the alternate closed form and yields an
//! asymmetric value set (see [`Encoding::TwosComplement`]).

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported code width.
pub const MAX_BITS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bitwidth n = {0} outside 2..={MAX_BITS}")]
    BadWidth(u32),
    #[error("significand bits p = {p} must be below n = {n}")]
    BadSignificand { n: u32, p: u32 },
    #[error("format (n = {n}, p = {p}) has a range beyond double precision")]
    RangeTooWide { n: u32, p: u32 },
    #[error("format (n = {n}, p = {p}) with these options has no positive value")]
    NoPositiveValue { n: u32, p: u32 },
    #[error("code {code:#x} does not fit in {n} bits")]
    CodeOutOfRange { code: u32, n: u32 },
    #[error("code {0:#x} is a subnormal but subnormals are disabled")]
    SubnormalDisabled(u16),
    #[error("value {value} outside [-{beta_max}, {beta_max}]")]
    OutOfRange { value: f64, beta_max: f64 },
    #[error("cannot quantize NaN")]
    NotANumber,
    #[error("threshold must be positive and finite, got {0}")]
    BadThreshold(f64),
    #[error("per-channel thresholds: expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
}

/// Storage encoding of a code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    /// Sign bit plus magnitude. Symmetric value set with two zero codes.
    #[default]
    SignMagnitude,
    /// Two's-complement significand as in the alternate closed form. With the
    /// sign bit set, the `ê = 0` branch yields `-3·2^p + significand` and the
    /// `ê > 0` branch yields `2^(ê-1)·(-2^(p+1) + significand)`, so the
    /// negative half does not mirror the positive half.
    TwosComplement,
}

/// Treatment of the all-ones exponent field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpecialValues {
    /// Every code is numeric.
    #[default]
    ExtendNumeric,
    /// The all-ones exponent field is reserved: zero significand is
    /// infinity, any other significand is NaN. Formats without an exponent
    /// field reserve nothing.
    ReserveInfNaN,
}

/// The `(n, p)` quantization scheme plus its encoding options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FloatFormat {
    n: u32,
    p: u32,
    #[serde(default)]
    encoding: Encoding,
    #[serde(default = "default_true")]
    subnormals: bool,
    #[serde(default)]
    specials: SpecialValues,
}

fn default_true() -> bool {
    true
}

/// Result of decoding one code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoded {
    Finite(f64),
    Infinity { negative: bool },
    NaN,
}

impl FloatFormat {
    /// Sign-magnitude format with subnormals and no reserved codes.
    pub fn new(n: u32, p: u32) -> Result<Self, FormatError> {
        Self::with_options(n, p, Encoding::SignMagnitude, true, SpecialValues::ExtendNumeric)
    }

    pub fn with_options(
        n: u32,
        p: u32,
        encoding: Encoding,
        subnormals: bool,
        specials: SpecialValues,
    ) -> Result<Self, FormatError> {
        if !(2..=MAX_BITS).contains(&n) {
            return Err(FormatError::BadWidth(n));
        }
        if p >= n {
            return Err(FormatError::BadSignificand { n, p });
        }
        let format = FloatFormat { n, p, encoding, subnormals, specials };
        // β = m·2^k with |m| < 2^(p+2); keep every magnitude finite in f64.
        if format.max_exponent_field() > 0 {
            let top = format.max_exponent_field() as i64 - 1 + p as i64 + 2;
            if top > 1024 {
                return Err(FormatError::RangeTooWide { n, p });
            }
        }
        if !format.has_positive_value() {
            return Err(FormatError::NoPositiveValue { n, p });
        }
        Ok(format)
    }

    pub fn with_encoding(self, encoding: Encoding) -> Self {
        FloatFormat { encoding, ..self }
    }

    pub fn with_subnormals(self, subnormals: bool) -> Result<Self, FormatError> {
        Self::with_options(self.n, self.p, self.encoding, subnormals, self.specials)
    }

    pub fn with_specials(self, specials: SpecialValues) -> Result<Self, FormatError> {
        Self::with_options(self.n, self.p, self.encoding, self.subnormals, specials)
    }

    /// A normal exponent survives reservation, or subnormals carry a
    /// non-zero significand.
    fn has_positive_value(&self) -> bool {
        if self.exponent_bits() == 0 {
            return true;
        }
        let normal = self.max_exponent_field() >= 2 || self.specials == SpecialValues::ExtendNumeric;
        normal || (self.subnormals && self.p > 0)
    }

    pub fn bits(&self) -> u32 {
        self.n
    }

    pub fn significand_bits(&self) -> u32 {
        self.p
    }

    pub fn exponent_bits(&self) -> u32 {
        self.n - self.p - 1
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn subnormals(&self) -> bool {
        self.subnormals
    }

    pub fn specials(&self) -> SpecialValues {
        self.specials
    }

    /// Number of distinct code patterns, `2^n`.
    pub fn code_count(&self) -> usize {
        1usize << self.n
    }

    /// Largest exponent field value, `2^(n-p-1) - 1`.
    pub fn max_exponent_field(&self) -> u32 {
        (1u32 << self.exponent_bits()) - 1
    }

    /// True when `p = n - 2`: the value set is a consecutive-integer lattice.
    pub fn is_dynamic_fixed_point(&self) -> bool {
        self.exponent_bits() <= 1
    }

    /// Closed-form `β_max` of the full-range (no reserved codes) format:
    /// `2^(n-1) - 1` without exponent bits, else
    /// `2^(2^(n-p-1) - 2) × (2^(p+1) - 1)`.
    pub fn closed_form_beta_max(&self) -> f64 {
        if self.p == self.n - 1 {
            ((1u64 << (self.n - 1)) - 1) as f64
        } else {
            let shift = (1i32 << self.exponent_bits()) - 2;
            libm_ldexp(((1u64 << (self.p + 1)) - 1) as f64, shift)
        }
    }

    fn check_code(&self, code: u16) -> Result<(), FormatError> {
        if (code as usize) >= self.code_count() {
            return Err(FormatError::CodeOutOfRange { code: code as u32, n: self.n });
        }
        Ok(())
    }

    fn sign_bit(&self, code: u16) -> bool {
        (code >> (self.n - 1)) & 1 == 1
    }

    fn significand(&self, code: u16) -> i64 {
        (code as i64) & ((1i64 << self.p) - 1)
    }

    /// Exponent field `ê` of a code; identically zero without exponent bits.
    pub fn exponent_of_code(&self, code: u16) -> u32 {
        if self.p == self.n - 1 {
            0
        } else {
            ((code as u32) >> self.p) & self.max_exponent_field()
        }
    }

    /// Decodes a code ignoring the subnormal and Inf/NaN options, as an
    /// exact `(m, k)` pair with `β = m × 2^k`.
    pub fn raw_parts(&self, code: u16) -> (i64, u32) {
        let e = self.exponent_of_code(code);
        let sig = self.significand(code);
        let neg = self.sign_bit(code);
        let hidden = 1i64 << self.p;
        match self.encoding {
            Encoding::SignMagnitude => {
                let m = if e == 0 { sig } else { hidden + sig };
                let m = if neg { -m } else { m };
                (m, e.saturating_sub(1))
            }
            Encoding::TwosComplement => {
                let high = if neg { 3 * hidden } else { 0 };
                if e == 0 {
                    (sig - high, 0)
                } else {
                    (hidden + sig - high, e - 1)
                }
            }
        }
    }

    fn is_reserved_exponent(&self, e: u32) -> bool {
        self.specials == SpecialValues::ReserveInfNaN
            && self.exponent_bits() > 0
            && e == self.max_exponent_field()
    }

    /// Decodes a code to its `β` value.
    pub fn decode(&self, code: u16) -> Result<Decoded, FormatError> {
        self.check_code(code)?;
        let e = self.exponent_of_code(code);
        if self.is_reserved_exponent(e) {
            return Ok(if self.significand(code) == 0 {
                Decoded::Infinity { negative: self.sign_bit(code) }
            } else {
                Decoded::NaN
            });
        }
        let (m, k) = self.raw_parts(code);
        // Without an exponent field there is no normal range to be below.
        if !self.subnormals && self.exponent_bits() > 0 && e == 0 && m != 0 {
            return Err(FormatError::SubnormalDisabled(code));
        }
        Ok(Decoded::Finite(libm_ldexp(m as f64, k as i32)))
    }

    /// Finite value of a code, or `None` for reserved and disabled codes.
    pub fn value_of(&self, code: u16) -> Option<f64> {
        match self.decode(code) {
            Ok(Decoded::Finite(v)) => Some(v),
            _ => None,
        }
    }

    /// Cached lookup tables for this format.
    pub fn codebook(&self) -> Arc<Codebook> {
        static CACHE: OnceLock<Mutex<HashMap<FloatFormat, Arc<Codebook>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard.entry(*self).or_insert_with(|| Arc::new(Codebook::build(*self))).clone()
    }

    /// Largest positive finite `β`.
    pub fn beta_max(&self) -> f64 {
        self.codebook().beta_max()
    }

    /// All distinct finite values in ascending order.
    pub fn enumerate_values(&self) -> Vec<f64> {
        self.codebook().all_values.clone()
    }

    /// Non-negative values divided by `β_max`, ascending, spanning `[0, 1]`.
    pub fn fpspace_normalized(&self) -> Vec<f64> {
        let book = self.codebook();
        let bmax = book.beta_max();
        book.grid.iter().filter(|(v, _)| *v >= 0.0).map(|(v, _)| v / bmax).collect()
    }

    /// Code of the value nearest to `x`; ties go to the even code.
    pub fn round_to_format(&self, x: f64) -> Result<u16, FormatError> {
        self.codebook().round(x)
    }

    /// The canonical zero code (positive sign).
    pub fn zero_code(&self) -> u16 {
        0
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(n={}, p={}", self.n, self.p)?;
        if self.encoding == Encoding::TwosComplement {
            write!(f, ", twos-complement")?;
        }
        if !self.subnormals {
            write!(f, ", no-subnormals")?;
        }
        if self.specials == SpecialValues::ReserveInfNaN {
            write!(f, ", inf-nan")?;
        }
        write!(f, ")")
    }
}

fn libm_ldexp(x: f64, exp: i32) -> f64 {
    // exact for the magnitudes a validated format can produce
    let mut v = x;
    let mut e = exp;
    while e > 0 {
        let step = e.min(1000);
        v *= f64::powi(2.0, step);
        e -= step;
    }
    while e < 0 {
        let step = (-e).min(1000);
        v /= f64::powi(2.0, step);
        e += step;
    }
    v
}

/// Per-format lookup tables: decoded values, the rounding grid, and exact
/// integer parts. Built once per format and shared through
/// [`FloatFormat::codebook`].
#[derive(Debug)]
pub struct Codebook {
    format: FloatFormat,
    /// `Some(β)` for numeric codes.
    values: Vec<Option<f64>>,
    /// `(m, k)` with `β = m·2^k`; zero for non-numeric codes.
    parts: Vec<(i64, u32)>,
    /// `β` as `i64` when every magnitude fits.
    ints: Option<Vec<i64>>,
    /// Distinct values within `[-β_max, β_max]`, ascending, with canonical codes.
    grid: Vec<(f64, u16)>,
    all_values: Vec<f64>,
    beta_max: f64,
}

impl Codebook {
    fn build(format: FloatFormat) -> Self {
        let count = format.code_count();
        let mut values = Vec::with_capacity(count);
        let mut parts = Vec::with_capacity(count);
        for code in 0..count {
            let code = code as u16;
            let v = format.value_of(code);
            parts.push(if v.is_some() { format.raw_parts(code) } else { (0, 0) });
            values.push(v);
        }
        let beta_max = values.iter().flatten().fold(0.0f64, |a, &v| a.max(v));

        let mut numbered: Vec<(f64, u16)> = values
            .iter()
            .enumerate()
            .filter_map(|(c, v)| v.map(|v| (v, c as u16)))
            .collect();
        // ascending by value, lowest code first among duplicates
        numbered.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        numbered.dedup_by(|later, earlier| later.0 == earlier.0);
        let all_values: Vec<f64> = numbered.iter().map(|(v, _)| *v).collect();
        let grid: Vec<(f64, u16)> =
            numbered.into_iter().filter(|(v, _)| v.abs() <= beta_max).collect();

        let ints = if values.iter().flatten().all(|v| v.abs() < 9.0e18) {
            Some(values.iter().map(|v| v.map_or(0, |v| v as i64)).collect())
        } else {
            None
        };
        Codebook { format, values, parts, ints, grid, all_values, beta_max }
    }

    pub fn format(&self) -> FloatFormat {
        self.format
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    /// Decoded value of a numeric code, zero for anything else.
    #[inline]
    pub fn value(&self, code: u16) -> f64 {
        self.values.get(code as usize).copied().flatten().unwrap_or(0.0)
    }

    pub fn is_numeric(&self, code: u16) -> bool {
        matches!(self.values.get(code as usize), Some(Some(_)))
    }

    #[inline]
    pub fn parts(&self, code: u16) -> (i64, u32) {
        self.parts[code as usize]
    }

    /// Integer table, when all magnitudes fit in `i64`.
    pub fn ints(&self) -> Option<&[i64]> {
        self.ints.as_deref()
    }

    /// Distinct values in `[-β_max, β_max]` with their canonical codes.
    pub fn grid(&self) -> &[(f64, u16)] {
        &self.grid
    }

    /// Rounds `x` to the nearest representable value.
    pub fn round(&self, x: f64) -> Result<u16, FormatError> {
        if x.is_nan() {
            return Err(FormatError::NotANumber);
        }
        if x.abs() > self.beta_max {
            return Err(FormatError::OutOfRange { value: x, beta_max: self.beta_max });
        }
        Ok(match self.format.encoding {
            Encoding::SignMagnitude => self.round_sign_magnitude(x),
            Encoding::TwosComplement => self.round_by_search(x),
        })
    }

    /// Clamps `x` to `[-β_max, β_max]` and rounds. `x` must not be NaN.
    #[inline]
    pub fn round_clamped(&self, x: f64) -> u16 {
        let x = x.clamp(-self.beta_max, self.beta_max);
        match self.format.encoding {
            Encoding::SignMagnitude => self.round_sign_magnitude(x),
            Encoding::TwosComplement => self.round_by_search(x),
        }
    }

    /// Direct rounding of a sign-magnitude code.
    fn round_sign_magnitude(&self, x: f64) -> u16 {
        let f = self.format;
        let magnitude = self.round_magnitude(x.abs());
        if magnitude == 0 {
            return 0;
        }
        let sign = if x < 0.0 { 1u16 << (f.n - 1) } else { 0 };
        sign | magnitude
    }

    /// Magnitude code (sign bit clear) nearest to `a >= 0`.
    fn round_magnitude(&self, a: f64) -> u16 {
        let f = self.format;
        let p = f.p;
        let hidden = (1u64 << p) as f64;
        if f.exponent_bits() == 0 {
            // plain integer lattice
            return a.round_ties_even() as u16;
        }
        if !f.subnormals && a < hidden {
            // gap between zero and the smallest normal 2^p; ties stay at zero
            return if a > hidden / 2.0 { self.magnitude_code(1, 0) } else { 0 };
        }
        if a < 2.0 * hidden {
            // subnormals and the first binade share unit spacing; the
            // magnitude code equals the integer value
            let r = a.round_ties_even() as u64;
            return r as u16;
        }
        // 2^(ê-1+p) <= a < 2^(ê+p) for ê >= 2
        let binade = a.log2().floor() as i64;
        let mut e = (binade - p as i64 + 1).max(2) as u32;
        let spacing = libm_ldexp(1.0, e as i32 - 1);
        let mut t = a / spacing;
        // correct an off-by-one from log2 rounding
        if t >= 2.0 * hidden {
            e += 1;
            t /= 2.0;
        } else if t < hidden {
            e -= 1;
            t *= 2.0;
        }
        let r = if p == 0 {
            // no significand bits: candidates 2^(ê-1) and 2^ê; a tie picks the even code
            if t > 1.5 || (t == 1.5 && e % 2 != 0) {
                2
            } else {
                1
            }
        } else {
            t.round_ties_even() as u64
        };
        let (e, sig) = if r as f64 >= 2.0 * hidden { (e + 1, 0) } else { (e, r - (1u64 << p)) };
        self.magnitude_code(e, sig)
    }

    fn magnitude_code(&self, e: u32, sig: u64) -> u16 {
        ((e << self.format.p) as u64 | sig) as u16
    }

    /// Nearest grid value by binary search; ties prefer the even code, then
    /// the smaller magnitude.
    fn round_by_search(&self, x: f64) -> u16 {
        let grid = &self.grid;
        let idx = grid.partition_point(|(v, _)| *v < x);
        if idx == 0 {
            return grid[0].1;
        }
        if idx == grid.len() {
            return grid[grid.len() - 1].1;
        }
        let (lo, lo_code) = grid[idx - 1];
        let (hi, hi_code) = grid[idx];
        let dl = x - lo;
        let dh = hi - x;
        if dl < dh {
            lo_code
        } else if dh < dl {
            hi_code
        } else {
            pick_tie((lo, lo_code), (hi, hi_code))
        }
    }
}

fn pick_tie(a: (f64, u16), b: (f64, u16)) -> u16 {
    match (a.1 & 1, b.1 & 1) {
        (0, 1) => a.1,
        (1, 0) => b.1,
        _ => {
            if a.0.abs() <= b.0.abs() {
                a.1
            } else {
                b.1
            }
        }
    }
}

/// `α = γ / β_max`.
pub fn scale_from_threshold(gamma: f64, format: &FloatFormat) -> Result<f64, FormatError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(FormatError::BadThreshold(gamma));
    }
    Ok(gamma / format.beta_max())
}
