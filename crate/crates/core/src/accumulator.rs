//! Accumulator sizing for exact integer multiply-accumulate and addition.
//!
//! Operands are integers in `[-b - ε, b]`. For a sum of `N` products the
//! total lies in `[N·a_y·b_x, N·a_x·a_y]` (operands ordered so that
//! `a_y·b_x <= a_x·b_y`), and a `q`-bit two's-complement accumulator holds it
//! iff `-2^(q-1) <= lower` and `upper <= 2^(q-1) - 1`. Everything here is
//! exact integer arithmetic; bounds can exceed 128 bits for wide-range
//! formats, so they are computed with big integers.

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Zero};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AccumulatorError {
    #[error("operand bound must be at least 1")]
    ZeroBound,
    #[error("term count must be at least 1")]
    NoTerms,
    #[error("accumulator width q = {0} must be at least 2")]
    TooFewBits(u32),
    #[error("a {q}-bit accumulator is too narrow for even one term")]
    TooNarrow { q: u32 },
}

/// Integer operand range `[-b - ε, b]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OperandRange {
    bound: BigUint,
    excess: BigUint,
}

impl OperandRange {
    pub fn new(bound: impl Into<BigUint>, excess: impl Into<BigUint>) -> Result<Self, AccumulatorError> {
        let bound = bound.into();
        if bound.is_zero() {
            return Err(AccumulatorError::ZeroBound);
        }
        Ok(OperandRange { bound, excess: excess.into() })
    }

    /// Symmetric range `[-b, b]`.
    pub fn symmetric(bound: impl Into<BigUint>) -> Result<Self, AccumulatorError> {
        Self::new(bound, 0u32)
    }

    pub fn bound(&self) -> &BigUint {
        &self.bound
    }

    pub fn excess(&self) -> &BigUint {
        &self.excess
    }

    /// `b`
    pub fn upper(&self) -> BigInt {
        BigInt::from(self.bound.clone())
    }

    /// `a = -b - ε`
    pub fn lower(&self) -> BigInt {
        -BigInt::from(&self.bound + &self.excess)
    }

    fn magnitude(&self) -> BigUint {
        &self.bound + &self.excess
    }
}

/// Closed interval of integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interval {
    pub lo: BigInt,
    pub hi: BigInt,
}

impl Interval {
    pub fn new(lo: impl Into<BigInt>, hi: impl Into<BigInt>) -> Self {
        Interval { lo: lo.into(), hi: hi.into() }
    }

    /// Whether a `q`-bit two's-complement register holds the whole interval.
    pub fn fits_in(&self, q: u32) -> bool {
        let half = BigInt::one() << (q - 1);
        -&half <= self.lo && self.hi < half
    }
}

/// Bitwidth `q` and safe term count of an accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct AccumulatorSpec {
    pub q: u32,
    pub n_max: u64,
}

fn check_terms(n_terms: u64) -> Result<(), AccumulatorError> {
    if n_terms == 0 {
        Err(AccumulatorError::NoTerms)
    } else {
        Ok(())
    }
}

/// Orders two operands so that `a_y·b_x <= a_x·b_y`.
fn ordered<'a>(x: &'a OperandRange, y: &'a OperandRange) -> (&'a OperandRange, &'a OperandRange) {
    if x.lower() * y.upper() < y.lower() * x.upper() {
        // a_x·b_y is the smaller cross term; swap roles
        (y, x)
    } else {
        (x, y)
    }
}

/// Range of a sum of `n_terms` products.
pub fn mac_bounds(x: &OperandRange, y: &OperandRange, n_terms: u64) -> Result<Interval, AccumulatorError> {
    check_terms(n_terms)?;
    let (x, y) = ordered(x, y);
    let n = BigInt::from(n_terms);
    Ok(Interval { lo: &n * y.lower() * x.upper(), hi: &n * x.lower() * y.lower() })
}

/// Smallest `q` with `2^(q-1) >= v`, i.e. `1 + ceil(log2 v)` for `v >= 1`.
pub(crate) fn bits_to_reach(v: &BigUint) -> u32 {
    if v <= &BigUint::one() {
        return 1;
    }
    let below = v - 1u32;
    below.bits() as u32 + 1
}

/// Smallest accumulator width holding a sum of `n_terms` products:
/// `q = ceil(log2(N·(b_x + ε_x)·(b_y + ε_y) + 1) + 1)`.
pub fn mac_min_q(x: &OperandRange, y: &OperandRange, n_terms: u64) -> Result<u32, AccumulatorError> {
    check_terms(n_terms)?;
    let upper = BigUint::from(n_terms) * x.magnitude() * y.magnitude();
    Ok(bits_to_reach(&(upper + 1u32)))
}

/// Largest term count a `q`-bit accumulator holds:
/// `floor((2^(q-1) - 1) / ((b_x + ε_x)·(b_y + ε_y)))`.
pub fn mac_max_n(x: &OperandRange, y: &OperandRange, q: u32) -> Result<BigUint, AccumulatorError> {
    if q < 2 {
        return Err(AccumulatorError::TooFewBits(q));
    }
    let limit = (BigUint::one() << (q - 1)) - 1u32;
    let n = limit / (x.magnitude() * y.magnitude());
    if n.is_zero() {
        return Err(AccumulatorError::TooNarrow { q });
    }
    Ok(n)
}

/// Range of a sum of `n_terms` operands: `[N·a_x, N·b_x]`.
pub fn add_bounds(x: &OperandRange, n_terms: u64) -> Result<Interval, AccumulatorError> {
    check_terms(n_terms)?;
    let n = BigInt::from(n_terms);
    Ok(Interval { lo: &n * x.lower(), hi: &n * x.upper() })
}

/// Smallest accumulator width for a sum of `n_terms` operands:
/// `ceil(log2(N·b + 1) + 1)` when `ε = 0`, `ceil(log2(N·b + N·ε) + 1)` otherwise.
pub fn add_min_q(x: &OperandRange, n_terms: u64) -> Result<u32, AccumulatorError> {
    check_terms(n_terms)?;
    let n = BigUint::from(n_terms);
    let reach = if x.excess.is_zero() { &n * &x.bound + 1u32 } else { &n * &x.bound + &n * &x.excess };
    Ok(bits_to_reach(&reach))
}

/// Largest term count: `floor((2^(q-1) - 1) / b)` when `ε = 0`,
/// `floor(2^(q-1) / (b + ε))` otherwise.
pub fn add_max_n(x: &OperandRange, q: u32) -> Result<BigUint, AccumulatorError> {
    if q < 2 {
        return Err(AccumulatorError::TooFewBits(q));
    }
    let half = BigUint::one() << (q - 1);
    let n = if x.excess.is_zero() { (half - 1u32) / &x.bound } else { half / x.magnitude() };
    if n.is_zero() {
        return Err(AccumulatorError::TooNarrow { q });
    }
    Ok(n)
}

/// Width and capacity report for a multiply-accumulate with `n_terms` terms
/// checked against a `q`-bit register.
pub fn mac_spec(x: &OperandRange, y: &OperandRange, n_terms: u64) -> Result<AccumulatorSpec, AccumulatorError> {
    let q = mac_min_q(x, y, n_terms)?;
    let n_max = mac_max_n(x, y, q)?;
    Ok(AccumulatorSpec { q, n_max: u64::try_from(n_max).unwrap_or(u64::MAX) })
}
