use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sagesim::harness::{
    cmd_codec_table, cmd_gen, cmd_run, cmd_sweep, write_rows_csv, AccumulatorName, AttentionSettings, InputSource,
    RangePoint, SweepSpec,
};
use sagesim::rng::Distribution;
use sagesim::{Error, Result};

#[derive(Parser)]
#[command(name = "sagesim", version, about = "Quantized attention numerics simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded tensor file plus its .meta.json sidecar.
    Gen {
        /// Comma-separated sizes, e.g. 8,1024,128.
        #[arg(long, value_delimiter = ',', required = true)]
        shape: Vec<usize>,
        #[command(flatten)]
        dist: DistArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run reference and quantized attention once; prints one JSON report.
    Run {
        #[arg(long, requires_all = ["k", "v"])]
        q: Option<PathBuf>,
        #[arg(long)]
        k: Option<PathBuf>,
        #[arg(long)]
        v: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        shape: ShapeArgs,
        #[command(flatten)]
        dist: DistArgs,
        #[command(flatten)]
        attention: AttentionArgs,
        #[command(flatten)]
        range: RangeArgs,
        /// Waive the range bound; overflow events are then not an error.
        #[arg(long)]
        expect_overflow: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a set of (p_r, v_r, depth) points; writes CSV.
    Sweep {
        /// JSON sweep spec.
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        spec: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        repetitions: u64,
        #[command(flatten)]
        shape: ShapeArgs,
        #[command(flatten)]
        attention: AttentionArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump all 256 E4M3 codes and their values as CSV.
    CodecTable {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Table2,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistKind {
    Gaussian,
    Uniform,
    Adversarial,
}

#[derive(Args)]
struct DistArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    dist: DistKind,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mean: f64,
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    low: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    high: f64,
    /// Entry value for the adversarial distribution.
    #[arg(long, default_value_t = 448.0, allow_negative_numbers = true)]
    magnitude: f64,
}

impl DistArgs {
    fn distribution(&self) -> Distribution {
        match self.dist {
            DistKind::Gaussian => Distribution::Gaussian { mean: self.mean, std: self.std },
            DistKind::Uniform => Distribution::Uniform { low: self.low, high: self.high },
            DistKind::Adversarial => Distribution::AdversarialMax { magnitude: self.magnitude },
        }
    }
}

#[derive(Args)]
struct ShapeArgs {
    #[arg(long, default_value_t = 1024)]
    seq_len: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long, default_value_t = 128)]
    block_q: usize,
    #[arg(long, default_value_t = 64)]
    block_k: usize,
    /// 4 or 8.
    #[arg(long, default_value_t = 8)]
    qk_bits: u32,
    #[arg(long)]
    causal: bool,
    #[arg(long)]
    no_smoothing: bool,
    /// Defaults to 1/sqrt(head_dim).
    #[arg(long)]
    softmax_scale: Option<f64>,
}

impl AttentionArgs {
    fn settings(&self) -> AttentionSettings {
        AttentionSettings {
            block_q: self.block_q,
            block_k: self.block_k,
            qk_bits: self.qk_bits,
            causal: self.causal,
            smoothing: !self.no_smoothing,
            softmax_scale: self.softmax_scale,
        }
    }
}

#[derive(Args)]
struct RangeArgs {
    #[arg(long, default_value_t = 224.0)]
    p_r: f64,
    #[arg(long, default_value_t = 4.5)]
    v_r: f64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..=2))]
    depth: u32,
    #[arg(long, value_enum, default_value = "fp16")]
    accumulator: AccumulatorArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum AccumulatorArg {
    Fp16,
    Fp32,
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn seeded(seed: u64, shape: &ShapeArgs, distribution: Distribution) -> InputSource {
    InputSource::Seeded { seed, heads: shape.heads, seq_len: shape.seq_len, head_dim: shape.head_dim, distribution }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { shape, dist, seed, out } => {
            cmd_gen(&shape, dist.distribution(), seed, &out)?;
        }
        Command::Run { q, k, v, seed, shape, dist, attention, range, expect_overflow, out } => {
            let input = match (q, k, v) {
                (Some(q), Some(k), Some(v)) => InputSource::Files { q, k, v },
                _ => seeded(seed, &shape, dist.distribution()),
            };
            let point = RangePoint {
                p_r: range.p_r,
                v_r: range.v_r,
                depth: range.depth,
                accumulator: match range.accumulator {
                    AccumulatorArg::Fp16 => AccumulatorName::Fp16,
                    AccumulatorArg::Fp32 => AccumulatorName::Fp32,
                },
                expect_overflow,
            };
            let row = cmd_run(&input, &attention.settings(), &point)?;
            let mut w = output(out.as_ref())?;
            serde_json::to_writer(&mut w, &row)?;
            writeln!(w)?;
            w.flush()?;
            if row.unexpected_overflow() {
                return Err(Error::UnexpectedOverflow(row.overflow_events));
            }
        }
        Command::Sweep { spec, preset, seed, repetitions, shape, attention, out } => {
            let mut spec = match (spec, preset) {
                (Some(path), _) => SweepSpec::from_json(&std::fs::read_to_string(path)?)?,
                (None, Some(Preset::Table2)) => {
                    SweepSpec::table2(seeded(seed, &shape, Distribution::default()), attention.settings())
                }
                (None, None) => unreachable!("clap requires a spec or a preset"),
            };
            if preset.is_some() {
                spec.repetitions = repetitions;
            }
            let outcome = cmd_sweep(&spec)?;
            for r in &outcome.rejected {
                eprintln!("rejected p_r={} v_r={} depth={}: {}", r.point.p_r, r.point.v_r, r.point.depth, r.reason);
            }
            write_rows_csv(&outcome.rows, output(out.as_ref())?)?;
            let unexpected: u64 =
                outcome.rows.iter().filter(|r| r.unexpected_overflow()).map(|r| r.overflow_events).sum();
            if unexpected > 0 {
                return Err(Error::UnexpectedOverflow(unexpected));
            }
        }
        Command::CodecTable { out } => {
            cmd_codec_table(output(out.as_ref())?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
