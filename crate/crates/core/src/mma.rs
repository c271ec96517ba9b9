//! Numerical model of the tensor-core matmul instructions.
//!
//! Three accumulation contracts are emulated:
//!
//! - INT8 × INT8 → INT32: exact.
//! - FP8 × FP8 → FP32: each exact product is added into a single-precision
//!   accumulator with one RNE rounding per addition.
//! - FP8 × FP8 → FP16: the `k` dimension is split into groups of 32 (one
//!   `m16n8k32` instruction each). Within a group, exact products are added
//!   sequentially into an FP16 register with RNE after every addition. With
//!   [`BufferingDepth::Single`] each group result is converted to FP32 and
//!   added into an FP32 accumulator. With [`BufferingDepth::Double`] two
//!   consecutive group results are first added together in FP16, then
//!   converted once.
//!
//! An FP16 partial that rounds past ±65504 is counted as an overflow event
//! and saturated to ±65504 so the run can continue.
//!
//! The true in-instruction reduction order of the hardware is not public.
//! Sequential RNE is the most pessimistic plausible model.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{round_to_binary16, Fp8E4M3, OverflowFlag, FP16_MAX};
use crate::tensor::Matrix;

/// Products accumulated per `m16n8k32` instruction.
pub const K_GROUP: usize = 32;

/// Contraction depth of one emulated instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MmaShape {
    k_group: usize,
}

impl MmaShape {
    pub const M16N8K32: Self = Self { k_group: K_GROUP };

    pub fn k_group(self) -> usize {
        self.k_group
    }
}

impl Default for MmaShape {
    fn default() -> Self {
        Self::M16N8K32
    }
}

/// How many consecutive FP16 group results are summed in FP16 before a
/// single FP16 → FP32 conversion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BufferingDepth {
    Single,
    Double,
}

impl BufferingDepth {
    pub const fn groups(self) -> usize {
        match self {
            BufferingDepth::Single => 1,
            BufferingDepth::Double => 2,
        }
    }

    pub fn from_groups(depth: u32) -> Result<Self> {
        match depth {
            1 => Ok(BufferingDepth::Single),
            2 => Ok(BufferingDepth::Double),
            other => Err(Error::InvalidConfig(format!("buffering depth must be 1 or 2, got {other}"))),
        }
    }
}

/// Accumulator used for the FP8 matmul.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Accumulator {
    Fp16(BufferingDepth),
    Fp32,
}

/// Event counters aggregated over one or many dot products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MmaCounts {
    pub overflow: OverflowFlag,
    pub fp16_to_fp32_conversions: u64,
    pub mma_invocations: u64,
}

impl MmaCounts {
    pub fn merge(&mut self, other: MmaCounts) {
        self.overflow.merge(other.overflow);
        self.fp16_to_fp32_conversions += other.fp16_to_fp32_conversions;
        self.mma_invocations += other.mma_invocations;
    }
}

/// Result of one emulated FP8 dot product.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DotReport {
    /// The final FP32 accumulator.
    pub value: f32,
    pub counts: MmaCounts,
}

/// A borrowed row-major matrix of codes.
#[derive(Clone, Copy, Debug)]
pub struct Codes<'a, T> {
    rows: usize,
    cols: usize,
    data: &'a [T],
}

impl<'a, T> Codes<'a, T> {
    pub fn new(rows: usize, cols: usize, data: &'a [T]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} codes cannot fill a {rows}x{cols} block", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn row(&self, i: usize) -> &'a [T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Exact integer dot product with a 32-bit accumulator.
///
/// Callers keep `|codes| ≤ 127` and `len ≤ 256`, so the sum fits in `i32`.
pub fn dot_int8_int32(a: &[i8], b: &[i8]) -> i32 {
    assert_eq!(a.len(), b.len(), "dot operands differ in length");
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

#[inline]
fn fp16_accumulate(acc: f64, addend: f64, overflow: &mut OverflowFlag) -> f64 {
    // Both operands sit on fine enough grids that the f64 sum is exact, so
    // this is a single rounding.
    let r = round_to_binary16(acc + addend);
    if r.abs() > FP16_MAX {
        overflow.record();
        FP16_MAX.copysign(r)
    } else {
        r
    }
}

#[inline]
fn fp16_group(p: &[f64], v: &[f64], overflow: &mut OverflowFlag) -> f64 {
    p.iter().zip(v).fold(0.0, |acc, (&a, &b)| fp16_accumulate(acc, a * b, overflow))
}

/// FP16-accumulator dot product on decoded operands.
pub(crate) fn dot_fp16acc_decoded(
    p: &[f64],
    v: &[f64],
    k_group: usize,
    depth: BufferingDepth,
    counts: &mut MmaCounts,
) -> f32 {
    let span = k_group * depth.groups();
    let mut acc32 = 0.0f32;
    for (sp, sv) in p.chunks(span).zip(v.chunks(span)) {
        let mut buffered = 0.0;
        for (gp, gv) in sp.chunks(k_group).zip(sv.chunks(k_group)) {
            let group = fp16_group(gp, gv, &mut counts.overflow);
            counts.mma_invocations += 1;
            buffered = fp16_accumulate(buffered, group, &mut counts.overflow);
        }
        counts.fp16_to_fp32_conversions += 1;
        acc32 += buffered as f32;
    }
    acc32
}

/// FP32-accumulator dot product on decoded operands.
pub(crate) fn dot_fp32acc_decoded(p: &[f64], v: &[f64]) -> f32 {
    // E4M3 products carry at most 8 significant bits, so `as f32` is exact.
    p.iter().zip(v).fold(0.0f32, |acc, (&a, &b)| acc + (a * b) as f32)
}

fn decode(codes: &[Fp8E4M3]) -> Vec<f64> {
    codes.iter().map(|c| c.to_f64()).collect()
}

fn check_fp8_operands(p_len: usize, v_len: usize, k_group: usize) {
    assert_eq!(p_len, v_len, "dot operands differ in length");
    assert!(p_len.is_multiple_of(k_group), "dot length {p_len} is not a multiple of {k_group}");
}

/// FP8 × FP8 dot product with FP16 accumulation.
///
/// # Panics
/// If the operands differ in length or the length is not a multiple of
/// `shape.k_group()`.
pub fn dot_fp8_fp16acc(p: &[Fp8E4M3], v: &[Fp8E4M3], shape: MmaShape, depth: BufferingDepth) -> DotReport {
    check_fp8_operands(p.len(), v.len(), shape.k_group());
    let mut counts = MmaCounts::default();
    let value = dot_fp16acc_decoded(&decode(p), &decode(v), shape.k_group(), depth, &mut counts);
    DotReport { value, counts }
}

/// FP8 × FP8 dot product with FP32 accumulation.
pub fn dot_fp8_fp32acc(p: &[Fp8E4M3], v: &[Fp8E4M3]) -> f32 {
    assert_eq!(p.len(), v.len(), "dot operands differ in length");
    dot_fp32acc_decoded(&decode(p), &decode(v))
}

fn check_inner(a_cols: usize, b_cols: usize) -> Result<()> {
    if a_cols != b_cols {
        return Err(Error::ShapeMismatch(format!("inner dimensions differ: lhs has {a_cols}, rhs has {b_cols}")));
    }
    Ok(())
}

/// `A · B` on integer codes. `b_t` holds B transposed (`n × k`), so row `j`
/// of `b_t` is column `j` of B. Returns the `m × n` INT32 result row-major.
pub fn gemm_int8(a: Codes<'_, i8>, b_t: Codes<'_, i8>) -> Result<Vec<i32>> {
    check_inner(a.cols(), b_t.cols())?;
    let n = b_t.rows();
    let mut out = vec![0i32; a.rows() * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, dst)| {
        let row = a.row(i);
        for (j, d) in dst.iter_mut().enumerate() {
            *d = dot_int8_int32(row, b_t.row(j));
        }
    });
    Ok(out)
}

/// `A · B` on E4M3 codes through the chosen accumulator. `b_t` holds B
/// transposed as in [`gemm_int8`]. The contraction length must be a multiple
/// of 32.
///
/// Output elements may be evaluated in parallel; each element's reduction
/// order is fixed by the `k` index, so results match a sequential run.
pub fn gemm_fp8(
    a: Codes<'_, Fp8E4M3>,
    b_t: Codes<'_, Fp8E4M3>,
    accumulator: Accumulator,
) -> Result<(Matrix, MmaCounts)> {
    check_inner(a.cols(), b_t.cols())?;
    let k = a.cols();
    if !k.is_multiple_of(K_GROUP) {
        return Err(Error::ShapeMismatch(format!("FP8 contraction length {k} is not a multiple of {K_GROUP}")));
    }
    let a_dec = decode(a.data);
    let b_dec = decode(b_t.data);
    Ok(gemm_fp8_decoded(&a_dec, &b_dec, a.rows(), b_t.rows(), k, accumulator))
}

/// Decoded-operand GEMM shared with the attention pipeline.
pub(crate) fn gemm_fp8_decoded(
    a: &[f64],
    b_t: &[f64],
    m: usize,
    n: usize,
    k: usize,
    accumulator: Accumulator,
) -> (Matrix, MmaCounts) {
    let mut out = Matrix::zeros(m, n);
    if n == 0 || k == 0 {
        return (out, MmaCounts::default());
    }
    let counts = out
        .as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, dst)| {
            let row = &a[i * k..(i + 1) * k];
            let mut counts = MmaCounts::default();
            for (j, d) in dst.iter_mut().enumerate() {
                let col = &b_t[j * k..(j + 1) * k];
                *d = match accumulator {
                    Accumulator::Fp16(depth) => dot_fp16acc_decoded(row, col, K_GROUP, depth, &mut counts) as f64,
                    Accumulator::Fp32 => {
                        counts.mma_invocations += (k / K_GROUP) as u64;
                        dot_fp32acc_decoded(row, col) as f64
                    }
                };
            }
            counts
        })
        .reduce(MmaCounts::default, |mut a, b| {
            a.merge(b);
            a
        });
    (out, counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(value: f64, len: usize) -> Vec<Fp8E4M3> {
        vec![Fp8E4M3::from_f64(value); len]
    }

    #[test]
    fn int_dot_examples() {
        assert_eq!(dot_int8_int32(&[127], &[127]), 16129);
        assert_eq!(dot_int8_int32(&[0; 16], &[5; 16]), 0);
        assert_eq!(dot_int8_int32(&[-127; 256], &[127; 256]), -127 * 127 * 256);
    }

    #[test]
    fn narrowed_ranges_at_depth_two_do_not_overflow() {
        let r = dot_fp8_fp16acc(&fill(224.0, 64), &fill(4.5, 64), MmaShape::M16N8K32, BufferingDepth::Double);
        assert_eq!(r.value, 64512.0);
        assert_eq!(r.counts.overflow.count(), 0);
        assert_eq!(r.counts.fp16_to_fp32_conversions, 1);
        assert_eq!(r.counts.mma_invocations, 2);
    }

    #[test]
    fn full_range_overflows() {
        let r = dot_fp8_fp16acc(&fill(448.0, 32), &fill(448.0, 32), MmaShape::M16N8K32, BufferingDepth::Single);
        assert!(r.counts.overflow.triggered());
        // Every one of the 32 additions lands beyond the format.
        assert_eq!(r.counts.overflow.count(), 32);
        assert_eq!(r.value, 65504.0);
    }

    #[test]
    fn negative_overflow_saturates_negative() {
        let r = dot_fp8_fp16acc(&fill(-448.0, 32), &fill(448.0, 32), MmaShape::M16N8K32, BufferingDepth::Single);
        assert_eq!(r.value, -65504.0);
    }

    #[test]
    fn zeros() {
        let r = dot_fp8_fp16acc(&fill(0.0, 64), &fill(448.0, 64), MmaShape::M16N8K32, BufferingDepth::Double);
        assert_eq!(r.value, 0.0);
        assert_eq!(r.counts.overflow.count(), 0);
        assert_eq!(dot_fp8_fp32acc(&fill(0.0, 32), &fill(3.0, 32)), 0.0);
    }

    #[test]
    fn fp32_path_is_exact_for_small_sums() {
        assert_eq!(dot_fp8_fp32acc(&fill(224.0, 32), &fill(4.5, 32)), 32256.0);
    }

    #[test]
    fn odd_group_count_at_depth_two() {
        let r = dot_fp8_fp16acc(&fill(1.0, 96), &fill(1.0, 96), MmaShape::M16N8K32, BufferingDepth::Double);
        assert_eq!(r.value, 96.0);
        assert_eq!(r.counts.mma_invocations, 3);
        assert_eq!(r.counts.fp16_to_fp32_conversions, 2);
    }

    #[test]
    #[should_panic(expected = "multiple of 32")]
    fn rejects_partial_groups() {
        dot_fp8_fp16acc(&fill(1.0, 33), &fill(1.0, 33), MmaShape::M16N8K32, BufferingDepth::Single);
    }

    #[test]
    fn gemm_rejects_mismatched_and_partial_shapes() {
        let a = fill(1.0, 64);
        let b = fill(1.0, 32);
        let a = Codes::new(2, 32, &a).unwrap();
        let b = Codes::new(2, 16, &b).unwrap();
        assert!(gemm_fp8(a, b, Accumulator::Fp32).is_err());
        let c = fill(1.0, 16);
        let c = Codes::new(1, 16, &c).unwrap();
        assert!(gemm_fp8(c, c, Accumulator::Fp32).is_err());
        assert!(Codes::new(3, 3, &c.data[..8]).is_err());
        let i = [1i8; 6];
        let x = Codes::new(2, 3, &i).unwrap();
        let y = Codes::new(3, 2, &i).unwrap();
        assert!(gemm_int8(x, y).is_err());
    }

    #[test]
    fn depth_from_groups() {
        assert_eq!(BufferingDepth::from_groups(1).unwrap(), BufferingDepth::Single);
        assert_eq!(BufferingDepth::from_groups(2).unwrap(), BufferingDepth::Double);
        assert!(BufferingDepth::from_groups(3).is_err());
    }
}
