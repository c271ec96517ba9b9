//! Accuracy of a quantized attention output `O'` against a full-precision `O`.
//!
//! Both tensors are flattened, then:
//!
//! ```text
//! CosSim = Σ O·O' / (√Σ O² · √Σ O'²)
//! L1     = Σ |O − O'| / Σ |O|
//! RMSE   = √((1/n) Σ (O − O')²)
//! ```
//!
//! Sums are taken in `f64`.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub cossim: f64,
    pub l1: f64,
    pub rmse: f64,
}

pub fn compare(reference: &[f64], actual: &[f64]) -> Result<MetricsReport> {
    if reference.len() != actual.len() {
        return Err(Error::ShapeMismatch(format!(
            "compare: reference has {} elements, actual has {}",
            reference.len(),
            actual.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::DegenerateDenominator("compare: empty tensors"));
    }
    let (mut dot, mut ref_sq, mut act_sq, mut abs_diff, mut ref_abs, mut diff_sq) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (&o, &p) in reference.iter().zip(actual) {
        let d = o - p;
        dot += o * p;
        ref_sq += o * o;
        act_sq += p * p;
        abs_diff += d.abs();
        ref_abs += o.abs();
        diff_sq += d * d;
    }
    if ref_sq == 0.0 || ref_abs == 0.0 {
        return Err(Error::DegenerateDenominator("compare: reference is all zero"));
    }
    if act_sq == 0.0 {
        return Err(Error::DegenerateDenominator("compare: actual is all zero"));
    }
    Ok(MetricsReport {
        cossim: dot / (ref_sq.sqrt() * act_sq.sqrt()),
        l1: abs_diff / ref_abs,
        rmse: (diff_sq / reference.len() as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity() {
        let o = [0.5, -2.0, 3.0];
        let m = compare(&o, &o).unwrap();
        assert_eq!((m.cossim, m.l1, m.rmse), (1.0, 0.0, 0.0));
    }

    #[test]
    fn negation() {
        let m = compare(&[1.0], &[-1.0]).unwrap();
        assert_eq!((m.cossim, m.l1, m.rmse), (-1.0, 2.0, 2.0));
    }

    #[test]
    fn hand_computed() {
        let m = compare(&[3.0, 4.0], &[3.0, 0.0]).unwrap();
        assert!((m.cossim - 0.6).abs() < 1e-15);
        assert!((m.l1 - 4.0 / 7.0).abs() < 1e-15);
        assert!((m.rmse - 2.0 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(compare(&[1.0], &[1.0, 2.0]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(compare(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::DegenerateDenominator(_))));
        assert!(matches!(compare(&[], &[]), Err(Error::DegenerateDenominator(_))));
    }
}
