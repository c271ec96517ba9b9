//! Seeded tensor generation.
//!
//! The stream is ChaCha8 keyed by the seed (little-endian `u64` in bytes
//! 0..8 of the 32-byte key, zeros elsewhere) with one ChaCha stream id per
//! tensor. Uniform doubles take the top 53 bits of each `u64` output. Normal
//! samples use one Box–Muller draw per pair of uniforms. Every sample is
//! rounded to `f32`, the on-disk precision.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GENERATOR: &str = "chacha8-le64seed-stream/top53-uniform/box-muller-cos";

pub struct TensorRng {
    inner: ChaCha8Rng,
}

impl TensorRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * 2f64.powi(-53)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Gaussian {
        mean: f64,
        std: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// Every entry equals `magnitude`.
    AdversarialMax {
        magnitude: f64,
    },
}

impl Default for Distribution {
    fn default() -> Self {
        Distribution::Gaussian { mean: 0.0, std: 1.0 }
    }
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Distribution::Gaussian { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
            Distribution::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            Distribution::AdversarialMax { magnitude } => magnitude.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid distribution {self:?}")))
        }
    }

    /// `len` samples, each rounded to `f32`.
    pub fn sample(&self, rng: &mut TensorRng, len: usize) -> Vec<f64> {
        (0..len)
            .map(|_| match *self {
                Distribution::Gaussian { mean, std } => (mean + std * rng.standard_normal()) as f32 as f64,
                Distribution::Uniform { low, high } => {
                    let x = (low + (high - low) * rng.uniform()) as f32;
                    // f32 rounding must not push a sample onto the open bound.
                    if x as f64 >= high {
                        (high as f32).next_down() as f64
                    } else {
                        x as f64
                    }
                }
                Distribution::AdversarialMax { magnitude } => magnitude as f32 as f64,
            })
            .collect()
    }
}
