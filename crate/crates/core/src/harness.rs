//! Batch commands behind the `sagesim` binary: tensor generation, single
//! runs, range sweeps and the E4M3 codec table.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_quantized, attention_reference, AttentionConfig, PvAccumulator};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_sidecar, write_tensor, TensorMeta, VERSION};
use crate::metrics::compare;
use crate::mma::BufferingDepth;
use crate::numerics::Fp8E4M3;
use crate::quantization::{IntBits, RangeConfig};
use crate::rng::{Distribution, TensorRng, GENERATOR};
use crate::tensor::Tensor;

/// ChaCha stream ids used for the three attention inputs.
const Q_STREAM: u64 = 0;
const K_STREAM: u64 = 1;
const V_STREAM: u64 = 2;

pub fn generate(shape: &[usize], distribution: Distribution, seed: u64, stream: u64) -> Result<Tensor> {
    distribution.validate()?;
    if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
        return Err(Error::InvalidConfig(format!("invalid shape {shape:?}")));
    }
    let mut rng = TensorRng::new(seed, stream);
    let data = distribution.sample(&mut rng, shape.iter().product());
    Tensor::new(shape.to_vec(), data)
}

/// Writes a seeded tensor and its sidecar.
pub fn cmd_gen(shape: &[usize], distribution: Distribution, seed: u64, out: &Path) -> Result<TensorMeta> {
    let t = generate(shape, distribution, seed, Q_STREAM)?;
    write_tensor(out, &t)?;
    let meta = TensorMeta {
        shape: shape.to_vec(),
        distribution,
        seed,
        stream: Q_STREAM,
        generator: GENERATOR.to_string(),
        format_version: VERSION,
    };
    write_sidecar(out, &meta)?;
    Ok(meta)
}

/// Where the Q, K, V inputs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Seeded {
        seed: u64,
        heads: usize,
        seq_len: usize,
        head_dim: usize,
        #[serde(default)]
        distribution: Distribution,
    },
    Files {
        q: PathBuf,
        k: PathBuf,
        v: PathBuf,
    },
}

pub struct Inputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl InputSource {
    /// Loads the inputs; seeded sources shift the seed by `repetition`.
    pub fn load(&self, repetition: u64) -> Result<Inputs> {
        match self {
            InputSource::Seeded { seed, heads, seq_len, head_dim, distribution } => {
                let seed = seed.wrapping_add(repetition);
                let shape = [*heads, *seq_len, *head_dim];
                Ok(Inputs {
                    q: generate(&shape, *distribution, seed, Q_STREAM)?,
                    k: generate(&shape, *distribution, seed, K_STREAM)?,
                    v: generate(&shape, *distribution, seed, V_STREAM)?,
                })
            }
            InputSource::Files { q, k, v } => Ok(Inputs { q: read_tensor(q)?, k: read_tensor(k)?, v: read_tensor(v)? }),
        }
    }

    fn seed(&self, repetition: u64) -> Option<u64> {
        match self {
            InputSource::Seeded { seed, .. } => Some(seed.wrapping_add(repetition)),
            InputSource::Files { .. } => None,
        }
    }
}

/// One `(p_r, v_r, depth)` point to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangePoint {
    pub p_r: f64,
    pub v_r: f64,
    pub depth: u32,
    #[serde(default)]
    pub accumulator: AccumulatorName,
    /// Waives the overflow bound for violation-witness runs.
    #[serde(default)]
    pub expect_overflow: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulatorName {
    #[default]
    Fp16,
    Fp32,
}

impl From<AccumulatorName> for PvAccumulator {
    fn from(a: AccumulatorName) -> Self {
        match a {
            AccumulatorName::Fp16 => PvAccumulator::Fp16,
            AccumulatorName::Fp32 => PvAccumulator::Fp32,
        }
    }
}

impl RangePoint {
    /// Validated range config. The bound applies only to the FP16
    /// accumulator and is skipped when the point expects overflow.
    pub fn range_config(&self) -> Result<RangeConfig> {
        let depth = BufferingDepth::from_groups(self.depth)?;
        if self.expect_overflow || self.accumulator == AccumulatorName::Fp32 {
            RangeConfig::waived(self.p_r, self.v_r, depth)
        } else {
            RangeConfig::new(self.p_r, self.v_r, depth)
        }
    }
}

/// Attention settings shared by every row of a run or sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionSettings {
    pub block_q: usize,
    pub block_k: usize,
    pub qk_bits: u32,
    pub causal: bool,
    pub smoothing: bool,
    pub softmax_scale: Option<f64>,
}

impl Default for AttentionSettings {
    fn default() -> Self {
        let d = AttentionConfig::default();
        Self {
            block_q: d.block_q,
            block_k: d.block_k,
            qk_bits: d.qk_bits.bits(),
            causal: d.causal,
            smoothing: d.smoothing,
            softmax_scale: d.softmax_scale,
        }
    }
}

impl AttentionSettings {
    fn config(&self, point: &RangePoint) -> Result<AttentionConfig> {
        Ok(AttentionConfig {
            block_q: self.block_q,
            block_k: self.block_k,
            qk_bits: IntBits::from_bits(self.qk_bits)?,
            range: point.range_config()?,
            accumulator: point.accumulator.into(),
            causal: self.causal,
            smoothing: self.smoothing,
            softmax_scale: self.softmax_scale,
        })
    }
}

/// One line of run or sweep output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub p_r: f64,
    pub v_r: f64,
    pub depth: u32,
    pub accumulator: AccumulatorName,
    pub qk_bits: u32,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    pub block_q: usize,
    pub block_k: usize,
    pub causal: bool,
    pub smoothing: bool,
    pub seed: Option<u64>,
    pub repetition: u64,
    pub expect_overflow: bool,
    pub cossim: f64,
    pub l1: f64,
    pub rmse: f64,
    pub overflow_events: u64,
    pub conversions: u64,
    pub mma_invocations: u64,
    pub delta_p_min: f64,
    pub delta_p_max: f64,
    pub delta_v_min: f64,
    pub delta_v_max: f64,
    pub wall_time: f64,
}

impl ReportRow {
    pub fn unexpected_overflow(&self) -> bool {
        self.overflow_events > 0 && !self.expect_overflow
    }
}

/// Runs the quantized path on prepared inputs against a precomputed reference.
fn evaluate(
    inputs: &Inputs,
    reference: &Tensor,
    settings: &AttentionSettings,
    point: &RangePoint,
    seed: Option<u64>,
    repetition: u64,
) -> Result<ReportRow> {
    let cfg = settings.config(point)?;
    let started = Instant::now();
    let report = attention_quantized(&inputs.q, &inputs.k, &inputs.v, &cfg)?;
    let wall_time = started.elapsed().as_secs_f64();
    let metrics = compare(reference.as_slice(), report.output.as_slice())?;
    let (heads, seq_len, head_dim) = inputs.q.attention_dims()?;
    Ok(ReportRow {
        p_r: point.p_r,
        v_r: point.v_r,
        depth: point.depth,
        accumulator: point.accumulator,
        qk_bits: settings.qk_bits,
        heads,
        seq_len,
        head_dim,
        block_q: settings.block_q,
        block_k: settings.block_k,
        causal: settings.causal,
        smoothing: settings.smoothing,
        seed,
        repetition,
        expect_overflow: point.expect_overflow,
        cossim: metrics.cossim,
        l1: metrics.l1,
        rmse: metrics.rmse,
        overflow_events: report.overflow_events(),
        conversions: report.fp16_to_fp32_conversions(),
        mma_invocations: report.mma_invocations(),
        delta_p_min: report.scales.p_min,
        delta_p_max: report.scales.p_max,
        delta_v_min: report.scales.v_min,
        delta_v_max: report.scales.v_max,
        wall_time,
    })
}

fn reference_for(inputs: &Inputs, settings: &AttentionSettings) -> Result<Tensor> {
    let cfg = settings.config(&RangePoint {
        p_r: 1.0,
        v_r: 1.0,
        depth: 1,
        accumulator: AccumulatorName::Fp32,
        expect_overflow: false,
    })?;
    attention_reference(&inputs.q, &inputs.k, &inputs.v, &cfg)
}

/// Reference and quantized attention on one configuration.
///
/// A row with unexpected overflow is still returned; callers decide how to
/// fail (see [`ReportRow::unexpected_overflow`]).
pub fn cmd_run(input: &InputSource, settings: &AttentionSettings, point: &RangePoint) -> Result<ReportRow> {
    // Reject invalid configs before doing any work.
    settings.config(point)?;
    let inputs = input.load(0)?;
    let reference = reference_for(&inputs, settings)?;
    evaluate(&inputs, &reference, settings, point, input.seed(0), 0)
}

/// Cartesian grid of ranges at one depth; points over the bound are
/// rejected with a reason rather than run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeGrid {
    pub p_r: Vec<f64>,
    pub v_r: Vec<f64>,
    pub depth: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub input: InputSource,
    /// Explicit points; each must satisfy the bound or expect overflow.
    #[serde(default)]
    pub configs: Vec<RangePoint>,
    #[serde(default)]
    pub grid: Option<RangeGrid>,
    #[serde(default = "one")]
    pub repetitions: u64,
    #[serde(default)]
    pub attention: AttentionSettings,
}

fn one() -> u64 {
    1
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::SweepSpec(e.to_string()))
    }

    /// The three narrowed-range pairs at two-group buffering.
    pub fn table2(input: InputSource, attention: AttentionSettings) -> Self {
        let configs = [(448.0, 2.25), (224.0, 4.5), (112.0, 9.0)]
            .into_iter()
            .map(|(p_r, v_r)| RangePoint {
                p_r,
                v_r,
                depth: 2,
                accumulator: AccumulatorName::Fp16,
                expect_overflow: false,
            })
            .collect();
        Self { input, configs, grid: None, repetitions: 1, attention }
    }

    /// Points to run, in sweep-file order, plus grid points rejected by the bound.
    pub fn expand(&self) -> Result<(Vec<RangePoint>, Vec<Rejection>)> {
        let mut points = Vec::new();
        for p in &self.configs {
            p.range_config().map_err(|e| Error::SweepSpec(format!("config {p:?}: {e}")))?;
            points.push(*p);
        }
        let mut rejected = Vec::new();
        if let Some(grid) = &self.grid {
            for &p_r in &grid.p_r {
                for &v_r in &grid.v_r {
                    let point = RangePoint {
                        p_r,
                        v_r,
                        depth: grid.depth,
                        accumulator: AccumulatorName::Fp16,
                        expect_overflow: false,
                    };
                    match point.range_config() {
                        Ok(_) => points.push(point),
                        Err(Error::InvalidRange(reason)) => rejected.push(Rejection { point, reason }),
                        Err(e) => return Err(Error::SweepSpec(e.to_string())),
                    }
                }
            }
        }
        Ok((points, rejected))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub point: RangePoint,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<ReportRow>,
    pub rejected: Vec<Rejection>,
}

/// One row per point × repetition, in sweep-file order. Rows are computed in
/// parallel; the reference is computed once per repetition.
pub fn cmd_sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    let (points, rejected) = spec.expand()?;
    let mut rows = Vec::with_capacity(points.len() * spec.repetitions as usize);
    if !points.is_empty() {
        for rep in 0..spec.repetitions {
            let inputs = spec.input.load(rep)?;
            let reference = reference_for(&inputs, &spec.attention)?;
            let seed = spec.input.seed(rep);
            let batch: Vec<ReportRow> = points
                .par_iter()
                .map(|p| evaluate(&inputs, &reference, &spec.attention, p, seed, rep))
                .collect::<Result<_>>()?;
            rows.extend(batch);
        }
    }
    Ok(SweepOutcome { rows, rejected })
}

pub const CSV_HEADER: [&str; 26] = [
    "p_r",
    "v_r",
    "depth",
    "accumulator",
    "qk_bits",
    "heads",
    "seq_len",
    "head_dim",
    "block_q",
    "block_k",
    "causal",
    "smoothing",
    "seed",
    "repetition",
    "expect_overflow",
    "cossim",
    "l1",
    "rmse",
    "overflow_events",
    "conversions",
    "mma_invocations",
    "delta_p_min",
    "delta_p_max",
    "delta_v_min",
    "delta_v_max",
    "wall_time",
];

/// Writes rows as CSV. The header is always written, even with no rows.
pub fn write_rows_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// All 256 E4M3 codes and their values as CSV.
pub fn cmd_codec_table<W: Write>(out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["code", "value"])?;
    for c in Fp8E4M3::all() {
        let value = if c.is_nan() { "NaN".to_string() } else { format!("{:?}", c.to_f64()) };
        w.write_record([format!("{:#04x}", c.to_bits()), value])?;
    }
    w.flush()?;
    Ok(())
}
