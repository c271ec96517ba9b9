//! Software simulator for quantized attention with an FP16-accumulated FP8
//! `P̃V` matmul.
//!
//! The crate emulates, bit for bit, the scalar formats (binary16, E4M3) and
//! accumulator semantics of the tensor-core instructions involved, the
//! per-block / per-channel quantizers with narrowed FP8 ranges `(p_r, v_r)`,
//! and a tiled online-softmax attention that runs either in `f64` or through
//! the quantized pipeline. Accuracy is reported as CosSim, relative L1 and
//! RMSE against the full-precision output.

pub mod attention;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod mma;
pub mod numerics;
pub mod quantization;
pub mod rng;
pub mod tensor;

pub use attention::{
    apply_causal_mask, attention_quantized, attention_reference, AttentionConfig, PvAccumulator, RunReport, ScaleStats,
    SoftmaxState,
};
pub use error::{Error, Result};
pub use metrics::{compare, MetricsReport};
pub use mma::{
    dot_fp8_fp16acc, dot_fp8_fp32acc, dot_int8_int32, gemm_fp8, gemm_int8, Accumulator, BufferingDepth, Codes,
    DotReport, MmaCounts, MmaShape, K_GROUP,
};
pub use numerics::{Fp16, Fp16Overflow, Fp8E4M3, OverflowFlag, E4M3_MAX, FP16_MAX};
pub use quantization::{
    quantize_int_block, quantize_p_block, quantize_v_per_channel, smooth_k, smooth_q, Dequantize, Fp8ChannelQuantBlock,
    Fp8QuantBlock, IntBits, IntQuantBlock, RangeConfig, SmoothingState,
};
pub use tensor::{Matrix, Tensor};
