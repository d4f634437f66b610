//! Direct convolution loop shared by the float reference and the exact
//! integer paths.

use num_bigint::BigInt;
use num_traits::ToPrimitive;

/// Geometry of a (grouped) 2-D convolution over `[C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Reason the geometry cannot be evaluated, if any.
    pub fn check(&self) -> Option<String> {
        if self.stride == 0 || self.groups == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Some("stride, groups, and kernel must be positive".into());
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Some(format!("{} groups do not divide {} -> {} channels", self.groups, self.in_channels, self.out_channels));
        }
        if self.height + 2 * self.pad < self.kernel_h || self.width + 2 * self.pad < self.kernel_w {
            return Some("kernel larger than the padded input".into());
        }
        None
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn reduction_size(&self) -> usize {
        self.in_channels / self.groups * self.kernel_h * self.kernel_w
    }

    /// Output-position slice length of one output channel.
    pub fn plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// An inner product seen as a 1×1 convolution over a `[C_in, 1, 1]` input.
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        ConvGeometry {
            in_channels: inputs,
            height: 1,
            width: 1,
            out_channels: outputs,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

/// A running sum of products.
pub trait Accumulate {
    type Operand: Copy;
    fn reset(&mut self);
    fn mac(&mut self, x: Self::Operand, w: Self::Operand);
}

/// Visits every output element: resets `acc`, accumulates its receptive
/// field in a fixed order, then hands `(channel, index, acc)` to `emit`.
/// Padding positions contribute nothing.
pub fn convolve<A: Accumulate>(
    g: &ConvGeometry,
    x: &[A::Operand],
    w: &[A::Operand],
    acc: &mut A,
    mut emit: impl FnMut(usize, usize, &mut A),
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let cin_per = g.in_channels / g.groups;
    let cout_per = g.out_channels / g.groups;
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    for oc in 0..g.out_channels {
        let group = oc / cout_per;
        let w_base = oc * cin_per * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                acc.reset();
                for ic in 0..cin_per {
                    let ch = group * cin_per + ic;
                    let x_plane = ch * g.height * g.width;
                    let w_plane = w_base + ic * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let x_row = x_plane + iy as usize * g.width;
                        let w_row = w_plane + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            acc.mac(x[x_row + ix as usize], w[w_row + kx]);
                        }
                    }
                }
                emit(oc, (oc * oh + oy) * ow + ox, acc);
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct FloatAcc(pub f32);

impl Accumulate for FloatAcc {
    type Operand = f32;
    #[inline]
    fn reset(&mut self) {
        self.0 = 0.0;
    }
    #[inline]
    fn mac(&mut self, x: f32, w: f32) {
        self.0 += x * w;
    }
}

#[derive(Debug, Default)]
pub struct Acc64(pub i64);

impl Accumulate for Acc64 {
    type Operand = i64;
    #[inline]
    fn reset(&mut self) {
        self.0 = 0;
    }
    #[inline]
    fn mac(&mut self, x: i64, w: i64) {
        self.0 += x * w;
    }
}

#[derive(Debug, Default)]
pub struct Acc128(pub i128);

impl Accumulate for Acc128 {
    type Operand = i64;
    #[inline]
    fn reset(&mut self) {
        self.0 = 0;
    }
    #[inline]
    fn mac(&mut self, x: i64, w: i64) {
        self.0 += x as i128 * w as i128;
    }
}

/// Exact accumulator for operands `m·2^k` of any magnitude: products are
/// binned by exponent and combined once per output element.
#[derive(Debug)]
pub struct BucketAcc {
    buckets: Vec<i64>,
}

impl BucketAcc {
    pub fn new(max_shift: u32) -> Self {
        BucketAcc { buckets: vec![0; max_shift as usize + 1] }
    }

    #[inline]
    pub fn add(&mut self, m: i64, k: u32) {
        self.buckets[k as usize] += m;
    }

    pub fn total(&self) -> BigInt {
        let mut total = BigInt::from(0);
        for (k, &m) in self.buckets.iter().enumerate().rev() {
            total <<= 1;
            if k + 1 == self.buckets.len() {
                total = BigInt::from(m);
            } else {
                total += m;
            }
        }
        total
    }

    pub fn total_f64(&self) -> f64 {
        self.total().to_f64().unwrap_or(f64::NAN)
    }
}

impl Accumulate for BucketAcc {
    type Operand = (i64, u32);
    #[inline]
    fn reset(&mut self) {
        self.buckets.iter_mut().for_each(|b| *b = 0);
    }
    #[inline]
    fn mac(&mut self, x: (i64, u32), w: (i64, u32)) {
        self.buckets[(x.1 + w.1) as usize] += x.0 * w.0;
    }
}

/// Splits an integer-valued double into `(m, k)` with `v = m·2^k`.
pub fn split_integer(v: f64) -> (i64, u32) {
    if v == 0.0 {
        return (0, 0);
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { -1 } else { 1 };
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let mant = if exp == 0 { (bits & ((1 << 52) - 1)) << 1 } else { (bits & ((1 << 52) - 1)) | (1 << 52) };
    let shift = exp - 1075;
    if shift >= 0 {
        (sign * mant as i64, shift as u32)
    } else {
        (sign * (mant >> (-shift).min(63)) as i64, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_integer_round_trips() {
        for v in [0.0, 1.0, -7.0, 3.0 * 2f64.powi(62), -(2f64.powi(200)) * 5.0, 123456789.0] {
            let (m, k) = split_integer(v);
            assert_eq!(m as f64 * 2f64.powi(k as i32), v);
        }
    }

    #[test]
    fn bucket_total_is_exact() {
        let mut acc = BucketAcc::new(130);
        acc.mac((3, 62), (3, 62));
        acc.mac((-1, 0), (1, 0));
        let expected = (BigInt::from(9) << 124) - 1;
        assert_eq!(acc.total(), expected);
    }

    #[test]
    fn identity_kernel_copies_input() {
        let g = ConvGeometry { in_channels: 2, height: 2, width: 2, out_channels: 2, kernel_h: 1, kernel_w: 1, stride: 1, pad: 0, groups: 2 };
        let x = [1i64, 2, 3, 4, 5, 6, 7, 8];
        let w = [1i64, 1];
        let mut out = vec![0; 8];
        convolve(&g, &x, &w, &mut Acc64(0), |_, i, a| out[i] = a.0);
        assert_eq!(out, x);
    }
}
