//! Bit-exact scalar formats used by the emulated matmul instructions.
//!
//! - [`Fp16`]: IEEE 754 binary16 (1 sign, 5 exponent, 10 mantissa bits).
//!   Encoding is round-to-nearest-even and *fails* on overflow instead of
//!   producing infinity, so an accumulator escaping the format is observable.
//! - [`Fp8E4M3`]: OFP8 E4M3 (1 sign, 4 exponent, 3 mantissa bits, bias 7).
//!   No infinities, one NaN pattern per sign (`0x7F`, `0xFF`), max finite 448.
//!   Encoding is round-to-nearest-even and saturates to ±448.
//!
//! Both formats have full subnormal support. All functions are pure.

use std::fmt;

use thiserror::Error;

/// Largest finite binary16 magnitude.
pub const FP16_MAX: f64 = 65504.0;
/// Largest finite E4M3 magnitude.
pub const E4M3_MAX: f64 = 448.0;

const FP16_MIN_NORMAL_EXP: i32 = -14;
const FP16_MANTISSA_BITS: u32 = 10;
const E4M3_MIN_NORMAL_EXP: i32 = -6;
const E4M3_MANTISSA_BITS: u32 = 3;
const F64_MANTISSA_BITS: u32 = 52;

/// Raised when a value rounds past ±65504.
#[derive(Clone, Copy, Debug, PartialEq, Error)]
#[error("value {value} overflows binary16 (|x| rounds above 65504)")]
pub struct Fp16Overflow {
    pub value: f64,
}

#[inline]
fn unbiased_exponent(bits: u64) -> i32 {
    ((bits >> F64_MANTISSA_BITS) & 0x7ff) as i32 - 1023
}

/// Rounds a finite `f64` to the nearest value on a binary float grid with
/// `mantissa_bits` explicit bits whose normal range starts at
/// `2^min_normal_exp`. Ties go to even. There is no upper bound.
#[inline]
fn round_to_grid(x: f64, mantissa_bits: u32, min_normal_exp: i32) -> f64 {
    let bits = x.to_bits();
    if unbiased_exponent(bits) >= min_normal_exp {
        let drop = F64_MANTISSA_BITS - mantissa_bits;
        let half = 1u64 << (drop - 1);
        let lsb = (bits >> drop) & 1;
        // A carry out of the mantissa bumps the exponent, which is exactly
        // the right rounding result.
        f64::from_bits((bits + (half - 1) + lsb) & !((1u64 << drop) - 1))
    } else {
        let quantum_exp = min_normal_exp - mantissa_bits as i32;
        let up = 2f64.powi(-quantum_exp);
        (x * up).round_ties_even() / up
    }
}

/// Rounds to the binary16 grid (RNE), without range checking.
#[inline]
pub(crate) fn round_to_binary16(x: f64) -> f64 {
    round_to_grid(x, FP16_MANTISSA_BITS, FP16_MIN_NORMAL_EXP)
}

#[inline]
fn round_to_e4m3_grid(x: f64) -> f64 {
    round_to_grid(x, E4M3_MANTISSA_BITS, E4M3_MIN_NORMAL_EXP)
}

/// Spacing between adjacent E4M3 values at magnitude `x`.
pub fn e4m3_ulp(x: f64) -> f64 {
    let exp = unbiased_exponent(x.abs().to_bits()).max(E4M3_MIN_NORMAL_EXP);
    2f64.powi(exp - E4M3_MANTISSA_BITS as i32)
}

/// An IEEE 754 binary16 value held as its raw bit pattern.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Fp16(u16);

impl Fp16 {
    pub const ZERO: Self = Self(0x0000);
    pub const ONE: Self = Self(0x3c00);
    /// 65504
    pub const MAX: Self = Self(0x7bff);
    /// Smallest positive subnormal, 2^-24.
    pub const MIN_POSITIVE_SUBNORMAL: Self = Self(0x0001);
    pub const NAN: Self = Self(0x7e00);

    pub const fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round-to-nearest-even encode. Fails when the rounded magnitude
    /// exceeds 65504. NaN input maps to [`Fp16::NAN`].
    pub fn from_f64(x: f64) -> Result<Self, Fp16Overflow> {
        if x.is_nan() {
            return Ok(Self::NAN);
        }
        let rounded = round_to_binary16(x);
        if rounded.abs() > FP16_MAX {
            return Err(Fp16Overflow { value: x });
        }
        Ok(Self(pack_binary16(rounded)))
    }

    pub fn to_f64(self) -> f64 {
        let sign = if self.0 & 0x8000 != 0 { -1.0 } else { 1.0 };
        let exp = ((self.0 >> 10) & 0x1f) as i32;
        let mant = (self.0 & 0x3ff) as f64;
        sign * match exp {
            0 => mant * 2f64.powi(-24),
            0x1f if mant == 0.0 => f64::INFINITY,
            0x1f => f64::NAN,
            _ => (1024.0 + mant) * 2f64.powi(exp - 25),
        }
    }

    /// Exact sum of both operands, rounded once.
    ///
    /// Commutative with `0` as identity, but not associative.
    pub fn checked_add(self, rhs: Self) -> Result<Self, Fp16Overflow> {
        Self::from_f64(self.to_f64() + rhs.to_f64())
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7c00 == 0x7c00 && self.0 & 0x3ff != 0
    }
}

/// Packs a value already on the binary16 grid with |x| <= 65504.
fn pack_binary16(r: f64) -> u16 {
    let bits = r.to_bits();
    let sign = ((bits >> 63) as u16) << 15;
    let a = r.abs();
    if a < 2f64.powi(FP16_MIN_NORMAL_EXP) {
        sign | (a * 2f64.powi(24)) as u16
    } else {
        let exp = (unbiased_exponent(bits) + 15) as u16;
        let mant = ((bits >> (F64_MANTISSA_BITS - FP16_MANTISSA_BITS)) & 0x3ff) as u16;
        sign | exp << 10 | mant
    }
}

impl fmt::Debug for Fp16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fp16({:#06x} = {})", self.0, self.to_f64())
    }
}

/// An OFP8 E4M3 value held as its raw bit pattern.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Fp8E4M3(u8);

impl Fp8E4M3 {
    pub const ZERO: Self = Self(0x00);
    pub const ONE: Self = Self(0x38);
    /// 448
    pub const MAX: Self = Self(0x7e);
    pub const NAN: Self = Self(0x7f);

    pub const fn from_bits(bits: u8) -> Self {
        Self(bits)
    }

    pub const fn to_bits(self) -> u8 {
        self.0
    }

    /// Round-to-nearest-even encode, saturating to ±448. Never produces a
    /// NaN code for non-NaN input. NaN keeps its sign.
    pub fn from_f64(x: f64) -> Self {
        let sign = if x.is_sign_negative() { 0x80 } else { 0x00 };
        if x.is_nan() {
            return Self(sign | Self::NAN.0);
        }
        let a = x.abs();
        if a >= E4M3_MAX {
            return Self(sign | Self::MAX.0);
        }
        let r = round_to_e4m3_grid(a);
        if r > E4M3_MAX {
            return Self(sign | Self::MAX.0);
        }
        let mag = if r < 2f64.powi(E4M3_MIN_NORMAL_EXP) {
            (r * 512.0) as u8
        } else {
            let bits = r.to_bits();
            let exp = (unbiased_exponent(bits) + 7) as u8;
            let mant = ((bits >> (F64_MANTISSA_BITS - E4M3_MANTISSA_BITS)) & 0x7) as u8;
            exp << 3 | mant
        };
        Self(sign | mag)
    }

    /// Exact value of the code. NaN codes decode to a NaN of the same sign.
    pub fn to_f64(self) -> f64 {
        if self.is_nan() {
            return if self.0 & 0x80 != 0 { -f64::NAN } else { f64::NAN };
        }
        let sign = if self.0 & 0x80 != 0 { -1.0 } else { 1.0 };
        let exp = ((self.0 >> 3) & 0xf) as i32;
        let mant = (self.0 & 0x7) as f64;
        if exp == 0 {
            sign * mant * 2f64.powi(-9)
        } else {
            sign * (8.0 + mant) * 2f64.powi(exp - 10)
        }
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7f == 0x7f
    }

    /// All 256 codes in ascending bit order.
    pub fn all() -> impl Iterator<Item = Self> {
        (0..=u8::MAX).map(Self)
    }
}

impl fmt::Debug for Fp8E4M3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E4M3({:#04x} = {})", self.0, self.to_f64())
    }
}

/// Count of FP16 overflow events observed during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverflowFlag {
    count: u64,
}

impl OverflowFlag {
    pub fn record(&mut self) {
        self.count += 1;
    }

    pub fn merge(&mut self, other: OverflowFlag) {
        self.count += other.count;
    }

    pub fn count(self) -> u64 {
        self.count
    }

    pub fn triggered(self) -> bool {
        self.count > 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fp16_encode_examples() {
        assert_eq!(Fp16::from_f64(0.0).unwrap().to_bits(), 0x0000);
        assert_eq!(Fp16::from_f64(65504.0).unwrap(), Fp16::MAX);
        assert_eq!(Fp16::from_f64(65519.99).unwrap(), Fp16::MAX);
        assert!(Fp16::from_f64(65520.0).is_err());
        assert!(Fp16::from_f64(-65520.0).is_err());
        assert_eq!(Fp16::from_f64(1.0).unwrap(), Fp16::ONE);
        assert_eq!(Fp16::from_f64(-0.0).unwrap().to_bits(), 0x8000);
        assert_eq!(Fp16::from_f64(2f64.powi(-24)).unwrap(), Fp16::MIN_POSITIVE_SUBNORMAL);
        // Exactly half the smallest subnormal ties to zero.
        assert_eq!(Fp16::from_f64(2f64.powi(-25)).unwrap(), Fp16::ZERO);
        assert_eq!(Fp16::from_f64(1.5 * 2f64.powi(-25)).unwrap(), Fp16::MIN_POSITIVE_SUBNORMAL);
        assert!(Fp16::from_f64(f64::INFINITY).is_err());
    }

    #[test]
    fn fp16_ties_to_even() {
        // 2049 lies halfway between 2048 and 2050; 2048 has the even mantissa.
        assert_eq!(Fp16::from_f64(2049.0).unwrap().to_f64(), 2048.0);
        assert_eq!(Fp16::from_f64(2051.0).unwrap().to_f64(), 2052.0);
        // Carry from the mantissa into the exponent.
        assert_eq!(Fp16::from_f64(2047.9).unwrap().to_f64(), 2048.0);
    }

    #[test]
    fn fp16_add_examples() {
        let one = Fp16::from_f64(1.0).unwrap();
        assert_eq!(one.checked_add(Fp16::ZERO).unwrap(), one);
        let half_max = Fp16::from_f64(32752.0).unwrap();
        assert_eq!(half_max.checked_add(half_max).unwrap(), Fp16::MAX);
        assert!(Fp16::MAX.checked_add(Fp16::MAX).is_err());
    }

    #[test]
    fn fp16_add_is_not_associative() {
        let big = Fp16::from_f64(2048.0).unwrap();
        let one = Fp16::ONE;
        let left = big.checked_add(one).unwrap().checked_add(one).unwrap();
        let right = big.checked_add(one.checked_add(one).unwrap()).unwrap();
        assert_eq!(left.to_f64(), 2048.0);
        assert_eq!(right.to_f64(), 2050.0);
    }

    #[test]
    fn fp16_decode_all_finite_codes_round_trip() {
        for bits in 0..=u16::MAX {
            let h = Fp16::from_bits(bits);
            let x = h.to_f64();
            if x.is_finite() {
                assert_eq!(Fp16::from_f64(x).unwrap(), h, "{bits:#06x}");
            }
        }
    }

    #[test]
    fn e4m3_examples() {
        assert_eq!(Fp8E4M3::from_f64(0.0), Fp8E4M3::ZERO);
        assert_eq!(Fp8E4M3::from_f64(448.0), Fp8E4M3::MAX);
        assert_eq!(Fp8E4M3::from_f64(1000.0), Fp8E4M3::MAX);
        assert_eq!(Fp8E4M3::from_f64(-1000.0).to_f64(), -448.0);
        assert_eq!(Fp8E4M3::from_f64(f64::INFINITY), Fp8E4M3::MAX);
        assert_eq!(Fp8E4M3::MAX.to_f64(), 448.0);
        assert_eq!(Fp8E4M3::ZERO.to_f64(), 0.0);
        assert_eq!(Fp8E4M3::ONE.to_f64(), 1.0);
        assert!(Fp8E4M3::from_bits(0x7f).to_f64().is_nan());
        assert!(Fp8E4M3::from_bits(0xff).to_f64().is_nan());
        // 464 is the midpoint between 448 and the NaN slot; it ties down.
        assert_eq!(Fp8E4M3::from_f64(464.0), Fp8E4M3::MAX);
        assert_eq!(Fp8E4M3::from_f64(2f64.powi(-9)).to_bits(), 0x01);
        assert_eq!(Fp8E4M3::from_f64(2f64.powi(-10)).to_bits(), 0x00);
    }

    #[test]
    fn e4m3_narrowed_ranges_are_representable() {
        for r in [448.0, 224.0, 112.0, 2.25, 4.5, 9.0] {
            assert_eq!(Fp8E4M3::from_f64(r).to_f64(), r);
        }
    }

    #[test]
    fn e4m3_exhaustive_round_trip() {
        for c in Fp8E4M3::all() {
            assert_eq!(Fp8E4M3::from_f64(c.to_f64()), c, "{c:?}");
        }
        assert_eq!(Fp8E4M3::all().filter(|c| !c.is_nan()).count(), 254);
    }

    #[test]
    fn e4m3_ulp_values() {
        assert_eq!(e4m3_ulp(448.0), 32.0);
        assert_eq!(e4m3_ulp(224.0), 16.0);
        assert_eq!(e4m3_ulp(4.5), 0.5);
        assert_eq!(e4m3_ulp(0.001), 2f64.powi(-9));
    }

    #[test]
    fn overflow_flag() {
        let mut f = OverflowFlag::default();
        assert!(!f.triggered());
        f.record();
        let mut g = OverflowFlag::default();
        g.merge(f);
        g.merge(f);
        assert_eq!(g.count(), 2);
        assert!(g.triggered());
    }
}
