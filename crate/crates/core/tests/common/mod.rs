//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.
#![allow(dead_code)]

use sagesim::{Fp8E4M3, Matrix};

/// Integer-only binary16 conversion with explicit round/sticky handling.
/// `None` means the rounded magnitude exceeds 65504.
pub fn f64_to_f16_bits(x: f64) -> Option<u16> {
    let bits = x.to_bits();
    let sign = ((bits >> 63) as u16) << 15;
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if exp == 0x7ff {
        return if frac == 0 { None } else { Some(0x7e00) };
    }
    if exp == 0 {
        // Zero, or an f64 subnormal far below half the smallest binary16 step.
        return Some(sign);
    }
    let e = exp - 1023;
    let sig = (1u64 << 52) | frac;
    let normal = e >= -14;
    let shift = if normal { 42 } else { 28 - e };
    if shift >= 54 {
        return Some(sign);
    }
    let shift = shift as u32;
    let mut q = sig >> shift;
    let rem = sig & ((1u64 << shift) - 1);
    let half = 1u64 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q += 1;
    }
    if normal {
        let mut biased = e + 15;
        if q == 1 << 11 {
            q >>= 1;
            biased += 1;
        }
        if biased >= 31 {
            return None;
        }
        Some(sign | (biased as u16) << 10 | (q as u16 & 0x3ff))
    } else {
        // q counts units of 2^-24; 1024 is exactly the smallest normal code.
        Some(sign | q as u16)
    }
}

/// Every non-NaN E4M3 value, decoded straight from the bit layout.
pub fn e4m3_table() -> Vec<(u8, f64)> {
    (0u16..256)
        .map(|c| c as u8)
        .filter(|c| c & 0x7f != 0x7f)
        .map(|c| {
            let s = if c & 0x80 != 0 { -1.0 } else { 1.0 };
            let e = ((c >> 3) & 0xf) as i32;
            let m = (c & 7) as f64;
            let v = if e == 0 { m / 8.0 * 2f64.powi(-6) } else { (1.0 + m / 8.0) * 2f64.powi(e - 7) };
            (c, s * v)
        })
        .collect()
}

/// Nearest E4M3 code by exhaustive search; ties pick the even code, values
/// beyond 448 saturate. Zero keeps the input's sign.
pub fn e4m3_nearest(x: f64) -> u8 {
    let table = e4m3_table();
    let sign_bit = if x.is_sign_negative() { 0x80 } else { 0 };
    let mut best: Option<(u8, f64)> = None;
    for &(c, v) in table.iter().filter(|(c, _)| c & 0x80 == sign_bit) {
        let d = (x - v).abs();
        best = match best {
            None => Some((c, d)),
            Some((bc, bd)) if d < bd || (d == bd && c & 1 == 0 && bc & 1 == 1) => Some((c, d)),
            keep => keep,
        };
    }
    best.unwrap().0
}

/// Neumaier-compensated sum.
pub fn wide_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Naive softmax attention over full score matrices.
pub fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64, causal: bool) -> Matrix {
    let (n, m) = (q.rows(), k.rows());
    let mut out = Matrix::zeros(n, v.cols());
    for i in 0..n {
        let scores: Vec<f64> = (0..m)
            .map(|j| {
                if causal && j > i {
                    f64::NEG_INFINITY
                } else {
                    q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale
                }
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = w.iter().sum();
        for c in 0..v.cols() {
            let x: f64 = (0..m).map(|j| w[j] * v.get(j, c)).sum();
            out.set(i, c, x / total);
        }
    }
    out
}

/// `max |a - b| / max |b|`.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Small deterministic generator for test data (SplitMix64).
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * 2f64.powi(-53)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }
}

/// Largest E4M3 magnitude not exceeding `r`.
pub fn e4m3_floor(r: f64) -> f64 {
    e4m3_table().into_iter().map(|(_, v)| v).filter(|&v| v <= r).fold(0.0, f64::max)
}

/// All E4M3 codes with decoded magnitude at most `r`.
pub fn codes_within(r: f64) -> Vec<Fp8E4M3> {
    e4m3_table().into_iter().filter(|&(_, v)| v.abs() <= r).map(|(c, _)| Fp8E4M3::from_bits(c)).collect()
}

pub fn f16_bits_to_f64(bits: u16) -> f64 {
    let s = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let e = ((bits >> 10) & 0x1f) as i32;
    let m = (bits & 0x3ff) as f64;
    s * if e == 0 { m * 2f64.powi(-24) } else { (1.0 + m / 1024.0) * 2f64.powi(e - 15) }
}

/// Sequential FP16-accumulated dot product: each group of 32 products is
/// summed into a fresh binary16 accumulator, `depth` group results are added
/// together in binary16, and the result is widened into an `f32` running sum.
/// Returns `(value, overflow_count, conversions)`.
pub fn fp16acc_dot(p: &[f64], v: &[f64], depth: usize) -> (f32, u64, u64) {
    let mut overflow = 0u64;
    let mut add = |acc: f64, x: f64| -> f64 {
        match f64_to_f16_bits(acc + x) {
            Some(b) => f16_bits_to_f64(b),
            None => {
                overflow += 1;
                65504f64.copysign(acc + x)
            }
        }
    };
    let mut total = 0.0f32;
    let mut conversions = 0;
    for (sp, sv) in p.chunks(32 * depth).zip(v.chunks(32 * depth)) {
        let mut buffered = 0.0;
        for (gp, gv) in sp.chunks(32).zip(sv.chunks(32)) {
            let mut g = 0.0;
            for (a, b) in gp.iter().zip(gv) {
                g = add(g, a * b);
            }
            buffered = add(buffered, g);
        }
        conversions += 1;
        total += buffered as f32;
    }
    (total, overflow, conversions)
}
