//! Quantizers for the attention pipeline.
//!
//! - Q and K tiles: symmetric per-block INT8 (divisor 127) or INT4 (divisor 7).
//! - P̃ tiles: per-block E4M3 with target range `p_r`, `δ_P = max|P̃| / p_r`.
//! - V tiles: per-channel E4M3 with target range `v_r`, `δ_V[j] = max|V[:, j]| / v_r`.
//! - Q/K smoothing: subtract per-channel means over tokens.
//!
//! A block (or channel) whose abs-max is zero gets scale 1 and all-zero codes.

use crate::error::{Error, Result};
use crate::mma::{BufferingDepth, K_GROUP};
use crate::numerics::{Fp8E4M3, E4M3_MAX, FP16_MAX};
use crate::tensor::Matrix;

/// Largest `|p·v|` such that 32 of them summed in FP16 stay finite (65504 / 32).
pub const SAFE_PRODUCT: f64 = FP16_MAX / K_GROUP as f64;

/// Bit-width of the symmetric integer quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum IntBits {
    #[serde(rename = "4")]
    Int4,
    #[serde(rename = "8")]
    Int8,
}

impl IntBits {
    /// Largest code magnitude, `2^(bits-1) - 1`.
    pub const fn max_code(self) -> i32 {
        match self {
            IntBits::Int4 => 7,
            IntBits::Int8 => 127,
        }
    }

    pub const fn bits(self) -> u32 {
        match self {
            IntBits::Int4 => 4,
            IntBits::Int8 => 8,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            4 => Ok(IntBits::Int4),
            8 => Ok(IntBits::Int8),
            other => Err(Error::InvalidConfig(format!("qk bits must be 4 or 8, got {other}"))),
        }
    }
}

/// Symmetric integer codes sharing one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct IntQuantBlock {
    pub rows: usize,
    pub cols: usize,
    /// Row-major codes in `[-max_code, max_code]`, stored widened.
    pub codes: Vec<i8>,
    pub scale: f64,
    pub bits: IntBits,
}

impl IntQuantBlock {
    pub fn code(&self, i: usize, j: usize) -> i8 {
        self.codes[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.codes[i * self.cols..(i + 1) * self.cols]
    }
}

/// E4M3 codes sharing one scale `δ_P`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fp8QuantBlock {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<Fp8E4M3>,
    pub scale: f64,
}

/// E4M3 codes with one scale `δ_V` per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Fp8ChannelQuantBlock {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<Fp8E4M3>,
    pub scales: Vec<f64>,
}

fn scale_for(abs_max: f64, target: f64) -> f64 {
    if abs_max == 0.0 {
        1.0
    } else {
        abs_max / target
    }
}

pub fn quantize_int_block(x: &Matrix, bits: IntBits) -> IntQuantBlock {
    let max_code = bits.max_code() as f64;
    let scale = scale_for(x.abs_max(), max_code);
    let codes = x.as_slice().iter().map(|&v| (v / scale).round_ties_even().clamp(-max_code, max_code) as i8).collect();
    IntQuantBlock { rows: x.rows(), cols: x.cols(), codes, scale, bits }
}

/// Per-block E4M3 quantization of an exponentiated score tile.
///
/// The scale uses the abs-max so the quantizer stays total for signed input;
/// for the nonnegative tiles produced by softmax this is just the max.
pub fn quantize_p_block(p: &Matrix, p_r: f64) -> Fp8QuantBlock {
    let scale = scale_for(p.abs_max(), p_r);
    let codes = p.as_slice().iter().map(|&v| Fp8E4M3::from_f64(v / scale)).collect();
    Fp8QuantBlock { rows: p.rows(), cols: p.cols(), codes, scale }
}

pub fn quantize_v_per_channel(v: &Matrix, v_r: f64) -> Fp8ChannelQuantBlock {
    let (rows, cols) = (v.rows(), v.cols());
    let mut col_max = vec![0.0f64; cols];
    for i in 0..rows {
        for (m, x) in col_max.iter_mut().zip(v.row(i)) {
            *m = m.max(x.abs());
        }
    }
    let scales: Vec<f64> = col_max.iter().map(|&m| scale_for(m, v_r)).collect();
    let mut codes = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        codes.extend(v.row(i).iter().zip(&scales).map(|(&x, &s)| Fp8E4M3::from_f64(x / s)));
    }
    Fp8ChannelQuantBlock { rows, cols, codes, scales }
}

/// Reconstructs real values from a quantized block.
pub trait Dequantize {
    fn dequantize(&self) -> Matrix;
}

impl Dequantize for IntQuantBlock {
    fn dequantize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.code(i, j) as f64 * self.scale)
    }
}

impl Dequantize for Fp8QuantBlock {
    fn dequantize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.codes[i * self.cols + j].to_f64() * self.scale)
    }
}

impl Dequantize for Fp8ChannelQuantBlock {
    fn dequantize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.codes[i * self.cols + j].to_f64() * self.scales[j])
    }
}

/// Target ranges for the P̃ and V codes plus the FP16 buffering depth.
///
/// [`RangeConfig::new`] enforces `p_r · v_r ≤ 2047 / depth`, the condition
/// under which a buffered FP16 accumulation of `32 · depth` products cannot
/// overflow. [`RangeConfig::waived`] skips the bound and marks the config so
/// callers can tell it was deliberately unsafe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeConfig {
    p_r: f64,
    v_r: f64,
    depth: BufferingDepth,
    waived: bool,
}

impl RangeConfig {
    pub fn new(p_r: f64, v_r: f64, depth: BufferingDepth) -> Result<Self> {
        let cfg = Self::waived(p_r, v_r, depth)?;
        cfg.check_bound()?;
        Ok(Self { waived: false, ..cfg })
    }

    /// Accepts any positive ranges, bypassing the overflow bound.
    pub fn waived(p_r: f64, v_r: f64, depth: BufferingDepth) -> Result<Self> {
        for (name, r) in [("p_r", p_r), ("v_r", v_r)] {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidRange(format!("{name} must be positive and finite, got {r}")));
            }
        }
        Ok(Self { p_r, v_r, depth, waived: true })
    }

    /// Full E4M3 range on both operands, as used with an FP32 accumulator.
    pub fn full_e4m3() -> Self {
        Self { p_r: E4M3_MAX, v_r: E4M3_MAX, depth: BufferingDepth::Single, waived: true }
    }

    /// Largest admissible `p_r · v_r` at `depth`.
    pub fn product_bound(depth: BufferingDepth) -> f64 {
        SAFE_PRODUCT / depth.groups() as f64
    }

    pub fn check_bound(&self) -> Result<()> {
        let product = self.p_r * self.v_r;
        let bound = Self::product_bound(self.depth);
        if product > bound {
            return Err(Error::InvalidRange(format!("p_r·v_r = {product} > {bound}")));
        }
        Ok(())
    }

    pub fn is_within_bound(&self) -> bool {
        self.check_bound().is_ok()
    }

    pub fn p_r(&self) -> f64 {
        self.p_r
    }

    pub fn v_r(&self) -> f64 {
        self.v_r
    }

    pub fn depth(&self) -> BufferingDepth {
        self.depth
    }

    pub fn is_waived(&self) -> bool {
        self.waived
    }
}

impl Default for RangeConfig {
    /// `p_r = 224`, `v_r = 4.5`, two-group buffering.
    fn default() -> Self {
        Self { p_r: 224.0, v_r: 4.5, depth: BufferingDepth::Double, waived: false }
    }
}

/// Per-channel token means removed from Q and K before quantization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SmoothingState {
    pub q_mean: Vec<f64>,
    pub k_mean: Vec<f64>,
}

impl SmoothingState {
    /// Token means of a Q tile and of the full K.
    pub fn from_inputs(q: &Matrix, k: &Matrix) -> Self {
        Self { q_mean: q.column_means(), k_mean: k.column_means() }
    }
}

fn subtract_row_vector(x: &Matrix, mean: &[f64]) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - mean[j])
}

/// `K - mean(K)` over tokens. `Q·mean(K)` is constant along each score row,
/// so softmax is unchanged.
pub fn smooth_k(k: &Matrix) -> (Matrix, Vec<f64>) {
    let mean = k.column_means();
    (subtract_row_vector(k, &mean), mean)
}

/// `Q - mean(Q)` over tokens. The caller must add `mean(Q)·Kᵀ` back to the
/// scores in full precision.
pub fn smooth_q(q: &Matrix) -> (Matrix, Vec<f64>) {
    let mean = q.column_means();
    (subtract_row_vector(q, &mean), mean)
}
