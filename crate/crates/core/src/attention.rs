//! Tiled attention with online softmax, in full precision or through the
//! quantized pipeline.
//!
//! The quantized pipeline, per head:
//!
//! 1. Optionally smooth K (subtract its token mean over the whole sequence)
//!    and, per query block, Q (subtract the block's token mean).
//! 2. Quantize each Q and K tile to INT8/INT4 with one scale per tile and
//!    form `S = Q̂K̂ᵀ·δ_Q·δ_K` exactly through the INT32 path. The smoothing
//!    compensation `mean(Q)·K_smoothedᵀ` is added in `f64`, then the softmax
//!    scale is applied.
//! 3. Online softmax yields `P̃ = exp(S − m) ∈ [0, 1]`.
//! 4. Quantize `P̃` per tile to E4M3 with range `p_r`, V per channel (per key
//!    block) with range `v_r`, and run `P̂V̂` through the emulated FP8 matmul.
//!    The key dimension is zero-padded to a multiple of 32.
//! 5. Dequantize with `δ_P·δ_V[c]` and fold into the running output.
//!
//! Heads and query blocks are independent and run in parallel. Key blocks
//! within one query block run strictly in order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mma::{gemm_fp8_decoded, gemm_int8, Accumulator, Codes, MmaCounts, K_GROUP};
use crate::quantization::{
    quantize_int_block, quantize_p_block, quantize_v_per_channel, smooth_k, smooth_q, IntBits, IntQuantBlock,
    RangeConfig,
};
use crate::tensor::{Matrix, Tensor};

/// Accumulator for the quantized `P̃V` matmul.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PvAccumulator {
    /// FP16 accumulation buffered at the depth carried by the range config.
    #[default]
    Fp16,
    /// FP32 accumulation; the range bound does not apply.
    Fp32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub block_q: usize,
    pub block_k: usize,
    pub qk_bits: IntBits,
    pub range: RangeConfig,
    pub accumulator: PvAccumulator,
    pub causal: bool,
    pub smoothing: bool,
    /// `None` means `1/√head_dim`.
    pub softmax_scale: Option<f64>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            block_q: 128,
            block_k: 64,
            qk_bits: IntBits::Int8,
            range: RangeConfig::default(),
            accumulator: PvAccumulator::Fp16,
            causal: false,
            smoothing: true,
            softmax_scale: None,
        }
    }
}

impl AttentionConfig {
    pub fn softmax_scale_for(&self, head_dim: usize) -> f64 {
        self.softmax_scale.unwrap_or_else(|| 1.0 / (head_dim as f64).sqrt())
    }

    fn mma_accumulator(&self) -> Accumulator {
        match self.accumulator {
            PvAccumulator::Fp16 => Accumulator::Fp16(self.range.depth()),
            PvAccumulator::Fp32 => Accumulator::Fp32,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.block_q == 0 || self.block_k == 0 {
            return Err(Error::InvalidConfig("block sizes must be positive".into()));
        }
        if let Some(s) = self.softmax_scale {
            if !s.is_finite() {
                return Err(Error::InvalidConfig(format!("softmax scale {s} is not finite")));
            }
        }
        Ok(())
    }
}

/// Running max `m`, running sum `l` and unnormalized output `O` for a block
/// of query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxState {
    pub max: Vec<f64>,
    pub sum: Vec<f64>,
    pub acc: Matrix,
}

impl SoftmaxState {
    pub fn new(rows: usize, value_dim: usize) -> Self {
        Self { max: vec![f64::NEG_INFINITY; rows], sum: vec![0.0; rows], acc: Matrix::zeros(rows, value_dim) }
    }

    /// Folds one score block into the state and returns `P̃ = exp(S − m')`.
    ///
    /// The running output is rescaled by `exp(m − m')`; the caller adds the
    /// block's `P̃V` afterwards with [`SoftmaxState::accumulate`]. Rows that
    /// are fully masked (`−∞`) in this block and before it are left alone.
    pub fn update(&mut self, scores: &Matrix) -> Matrix {
        assert_eq!(scores.rows(), self.max.len(), "score rows do not match state rows");
        let mut p = Matrix::zeros(scores.rows(), scores.cols());
        for i in 0..scores.rows() {
            let row = scores.row(i);
            let block_max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let old_max = self.max[i];
            let new_max = old_max.max(block_max);
            if new_max == f64::NEG_INFINITY {
                continue;
            }
            let correction = if old_max == f64::NEG_INFINITY { 0.0 } else { (old_max - new_max).exp() };
            let mut block_sum = 0.0;
            for (dst, &s) in p.row_mut(i).iter_mut().zip(row) {
                *dst = (s - new_max).exp();
                block_sum += *dst;
            }
            self.sum[i] = self.sum[i] * correction + block_sum;
            if correction != 1.0 {
                self.acc.row_mut(i).iter_mut().for_each(|o| *o *= correction);
            }
            self.max[i] = new_max;
        }
        p
    }

    pub fn accumulate(&mut self, pv: &Matrix) {
        for (o, x) in self.acc.as_mut_slice().iter_mut().zip(pv.as_slice()) {
            *o += x;
        }
    }

    /// `O / l`. Rows that never saw an unmasked key come out as zeros.
    pub fn finalize(self) -> Matrix {
        let mut out = self.acc;
        for (i, &l) in self.sum.iter().enumerate() {
            let l = if l > 0.0 { l } else { 1.0 };
            out.row_mut(i).iter_mut().for_each(|o| *o /= l);
        }
        out
    }
}

/// Masks entries whose key index exceeds the query index. `q_offset` and
/// `k_offset` are the global token indices of the tile origin.
pub fn apply_causal_mask(scores: &mut Matrix, q_offset: usize, k_offset: usize) {
    for i in 0..scores.rows() {
        let q = q_offset + i;
        for (c, s) in scores.row_mut(i).iter_mut().enumerate() {
            if k_offset + c > q {
                *s = f64::NEG_INFINITY;
            }
        }
    }
}

/// Min/max of every δ_P and δ_V used during a run.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct ScaleStats {
    pub p_min: f64,
    pub p_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for ScaleStats {
    fn default() -> Self {
        Self { p_min: f64::INFINITY, p_max: f64::NEG_INFINITY, v_min: f64::INFINITY, v_max: f64::NEG_INFINITY }
    }
}

impl ScaleStats {
    fn observe_p(&mut self, s: f64) {
        self.p_min = self.p_min.min(s);
        self.p_max = self.p_max.max(s);
    }

    fn observe_v(&mut self, s: f64) {
        self.v_min = self.v_min.min(s);
        self.v_max = self.v_max.max(s);
    }

    fn merge(&mut self, o: ScaleStats) {
        self.p_min = self.p_min.min(o.p_min);
        self.p_max = self.p_max.max(o.p_max);
        self.v_min = self.v_min.min(o.v_min);
        self.v_max = self.v_max.max(o.v_max);
    }
}

/// Output and counters of a quantized attention run, aggregated over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub output: Tensor,
    pub counts: MmaCounts,
    pub scales: ScaleStats,
}

impl RunReport {
    pub fn overflow_events(&self) -> u64 {
        self.counts.overflow.count()
    }

    pub fn fp16_to_fp32_conversions(&self) -> u64 {
        self.counts.fp16_to_fp32_conversions
    }

    pub fn mma_invocations(&self) -> u64 {
        self.counts.mma_invocations
    }
}

struct Problem {
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    out_shape: Vec<usize>,
}

fn split_problem(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<Problem> {
    cfg.validate()?;
    let (qh, qs, qd) = q.attention_dims()?;
    let (kh, ks, kd) = k.attention_dims()?;
    let (vh, vs, vd) = v.attention_dims()?;
    if qh != kh || kh != vh {
        return Err(Error::ShapeMismatch(format!("head counts differ: q {qh}, k {kh}, v {vh}")));
    }
    if qd != kd {
        return Err(Error::ShapeMismatch(format!("q head_dim {qd} != k head_dim {kd}")));
    }
    if ks != vs {
        return Err(Error::ShapeMismatch(format!("k has {ks} tokens, v has {vs}")));
    }
    if qs == 0 || ks == 0 {
        return Err(Error::ShapeMismatch("empty sequence".into()));
    }
    if cfg.causal && qs != ks {
        return Err(Error::ShapeMismatch(format!(
            "causal attention needs equal query and key lengths, got {qs} and {ks}"
        )));
    }
    let mut out_shape = q.shape().to_vec();
    *out_shape.last_mut().unwrap() = vd;
    Ok(Problem { q: q.heads()?, k: k.heads()?, v: v.heads()?, out_shape })
}

/// Query-block origins, with the tile size clamped to the sequence.
fn blocks(len: usize, block: usize) -> Vec<(usize, usize)> {
    let block = block.min(len);
    (0..len).step_by(block).map(|s| (s, (s + block).min(len))).collect()
}

fn fully_masked(cfg: &AttentionConfig, q_end: usize, k_start: usize) -> bool {
    cfg.causal && k_start >= q_end
}

fn stitch(rows: usize, cols: usize, parts: Vec<Matrix>) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend(p.into_vec());
    }
    Matrix::from_vec(rows, cols, data).expect("query blocks cover the sequence")
}

/// `rowvec · Kᵀ` for every key row.
fn row_against_keys(vec: &[f64], keys: &Matrix) -> Vec<f64> {
    (0..keys.rows()).map(|j| vec.iter().zip(keys.row(j)).map(|(a, b)| a * b).sum()).collect()
}

fn reference_head(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttentionConfig) -> Matrix {
    let scale = cfg.softmax_scale_for(q.cols());
    let k = if cfg.smoothing { smooth_k(k).0 } else { k.clone() };
    let key_blocks = blocks(k.rows(), cfg.block_k);
    let parts: Vec<Matrix> = blocks(q.rows(), cfg.block_q)
        .into_par_iter()
        .map(|(q_start, q_end)| {
            let q_blk = q.slice_rows(q_start, q_end);
            let (q_blk, q_mean) = if cfg.smoothing { smooth_q(&q_blk) } else { (q_blk, vec![0.0; q.cols()]) };
            let mut state = SoftmaxState::new(q_end - q_start, v.cols());
            for &(k_start, k_end) in &key_blocks {
                if fully_masked(cfg, q_end, k_start) {
                    continue;
                }
                let k_blk = k.slice_rows(k_start, k_end);
                let comp = row_against_keys(&q_mean, &k_blk);
                let mut s = q_blk.matmul(&k_blk.transpose()).expect("head dims agree");
                for i in 0..s.rows() {
                    for (x, c) in s.row_mut(i).iter_mut().zip(&comp) {
                        *x = (*x + c) * scale;
                    }
                }
                if cfg.causal {
                    apply_causal_mask(&mut s, q_start, k_start);
                }
                let p = state.update(&s);
                let pv = p.matmul(&v.slice_rows(k_start, k_end)).expect("key counts agree");
                state.accumulate(&pv);
            }
            state.finalize()
        })
        .collect();
    stitch(q.rows(), v.cols(), parts)
}

/// Full-precision tiled attention, `softmax(QKᵀ·scale + mask)·V` in `f64`.
pub fn attention_reference(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let prob = split_problem(q, k, v, cfg)?;
    let heads: Vec<Matrix> =
        prob.q.par_iter().zip(&prob.k).zip(&prob.v).map(|((q, k), v)| reference_head(q, k, v, cfg)).collect();
    Tensor::from_heads(heads)?.reshape(prob.out_shape)
}

/// One key block, quantized once per head and shared by every query block.
struct KeyTile {
    start: usize,
    k_smoothed: Matrix,
    k_codes: IntQuantBlock,
    /// Decoded V̂ transposed to `value_dim × padded`, zero past the last key.
    v_t: Vec<f64>,
    v_scales: Vec<f64>,
    padded: usize,
}

fn quantize_keys(k: &Matrix, v: &Matrix, cfg: &AttentionConfig, stats: &mut ScaleStats) -> Vec<KeyTile> {
    let k = if cfg.smoothing { smooth_k(k).0 } else { k.clone() };
    blocks(k.rows(), cfg.block_k)
        .into_iter()
        .map(|(start, end)| {
            let len = end - start;
            let padded = len.div_ceil(K_GROUP) * K_GROUP;
            let k_smoothed = k.slice_rows(start, end);
            let k_codes = quantize_int_block(&k_smoothed, cfg.qk_bits);
            let vq = quantize_v_per_channel(&v.slice_rows(start, end), cfg.range.v_r());
            let dv = v.cols();
            let mut v_t = vec![0.0; dv * padded];
            for t in 0..len {
                for c in 0..dv {
                    v_t[c * padded + t] = vq.codes[t * dv + c].to_f64();
                }
            }
            vq.scales.iter().for_each(|&s| stats.observe_v(s));
            KeyTile { start, k_smoothed, k_codes, v_t, v_scales: vq.scales, padded }
        })
        .collect()
}

struct BlockResult {
    out: Matrix,
    counts: MmaCounts,
    scales: ScaleStats,
}

fn quantized_query_block(
    q: &Matrix,
    (q_start, q_end): (usize, usize),
    keys: &[KeyTile],
    value_dim: usize,
    cfg: &AttentionConfig,
) -> BlockResult {
    let scale = cfg.softmax_scale_for(q.cols());
    let rows = q_end - q_start;
    let q_blk = q.slice_rows(q_start, q_end);
    let (q_blk, q_mean) = if cfg.smoothing { smooth_q(&q_blk) } else { (q_blk, Vec::new()) };
    let q_codes = quantize_int_block(&q_blk, cfg.qk_bits);
    let q_view = Codes::new(rows, q.cols(), &q_codes.codes).expect("q tile shape");
    let accumulator = cfg.mma_accumulator();

    let mut state = SoftmaxState::new(rows, value_dim);
    let mut counts = MmaCounts::default();
    let mut scales = ScaleStats::default();
    for tile in keys {
        if fully_masked(cfg, q_end, tile.start) {
            continue;
        }
        let len = tile.k_codes.rows;
        let k_view = Codes::new(len, tile.k_codes.cols, &tile.k_codes.codes).expect("k tile shape");
        let s_int = gemm_int8(q_view, k_view).expect("head dims agree");
        let dequant = q_codes.scale * tile.k_codes.scale;
        let comp = if cfg.smoothing { row_against_keys(&q_mean, &tile.k_smoothed) } else { vec![0.0; len] };
        let mut s = Matrix::from_fn(rows, len, |i, j| (s_int[i * len + j] as f64 * dequant + comp[j]) * scale);
        if cfg.causal {
            apply_causal_mask(&mut s, q_start, tile.start);
        }
        let p = state.update(&s);
        let pq = quantize_p_block(&p, cfg.range.p_r());
        scales.observe_p(pq.scale);

        let mut p_dec = vec![0.0; rows * tile.padded];
        for i in 0..rows {
            for j in 0..len {
                p_dec[i * tile.padded + j] = pq.codes[i * len + j].to_f64();
            }
        }
        let (pv, c) = gemm_fp8_decoded(&p_dec, &tile.v_t, rows, value_dim, tile.padded, accumulator);
        counts.merge(c);
        let pv = Matrix::from_fn(rows, value_dim, |i, c| pv.get(i, c) * pq.scale * tile.v_scales[c]);
        state.accumulate(&pv);
    }
    BlockResult { out: state.finalize(), counts, scales }
}

fn quantized_head(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttentionConfig) -> BlockResult {
    let mut scales = ScaleStats::default();
    let keys = quantize_keys(k, v, cfg, &mut scales);
    let parts: Vec<BlockResult> = blocks(q.rows(), cfg.block_q)
        .into_par_iter()
        .map(|range| quantized_query_block(q, range, &keys, v.cols(), cfg))
        .collect();
    let mut counts = MmaCounts::default();
    let mut outs = Vec::with_capacity(parts.len());
    for p in parts {
        counts.merge(p.counts);
        scales.merge(p.scales);
        outs.push(p.out);
    }
    BlockResult { out: stitch(q.rows(), v.cols(), outs), counts, scales }
}

/// Quantized attention through INT8/INT4 `QKᵀ` and FP8 `P̃V`.
pub fn attention_quantized(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<RunReport> {
    let prob = split_problem(q, k, v, cfg)?;
    if cfg.accumulator == PvAccumulator::Fp16 && !cfg.range.is_waived() {
        cfg.range.check_bound()?;
    }
    let heads: Vec<BlockResult> =
        prob.q.par_iter().zip(&prob.k).zip(&prob.v).map(|((q, k), v)| quantized_head(q, k, v, cfg)).collect();
    let mut counts = MmaCounts::default();
    let mut scales = ScaleStats::default();
    let mut outs = Vec::with_capacity(heads.len());
    for h in heads {
        counts.merge(h.counts);
        scales.merge(h.scales);
        outs.push(h.out);
    }
    let output = Tensor::from_heads(outs)?.reshape(prob.out_shape)?;
    Ok(RunReport { output, counts, scales })
}
