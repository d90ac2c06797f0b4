//! Gradient-free numeric helpers shared by the tape ops and the analysis code.

use crate::error::{arg_err, Result};
use crate::nn::Tensor;

/// `softmax(logits / tau)` with max subtraction.
pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return arg_err("softmax of an empty vector");
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return arg_err(format!("temperature must be positive and finite, got {tau}"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return arg_err("softmax logits must be finite");
    }
    Ok(softmax_unchecked(logits, tau))
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `log softmax(logits / tau)`.
pub(crate) fn log_softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|&l| ((l - max) / tau).exp())
        .sum::<f64>()
        .ln();
    logits.iter().map(|&l| (l - max) / tau - lse).collect()
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Standard sin/cos table: `[k, 2i] = sin(k / 10000^(2i/dim))`,
/// `[k, 2i+1] = cos(...)`.
pub fn sinusoidal_position_encoding(length: usize, dim: usize) -> Result<Tensor> {
    if length == 0 || dim == 0 {
        return arg_err("position encoding needs positive length and dim");
    }
    if dim % 2 != 0 {
        return arg_err(format!("position encoding dim must be even, got {dim}"));
    }
    let mut data = vec![0.0; length * dim];
    for k in 0..length {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf((2 * i) as f64 / dim as f64);
            let angle = k as f64 / freq;
            data[k * dim + 2 * i] = angle.sin();
            data[k * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(length, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let p = softmax_with_temperature(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log3_gap_gives_quarter_three_quarters() {
        for c in [-50.0, 0.0, 3.7, 800.0] {
            let p = softmax_with_temperature(&[c, c + 3f64.ln()], 1.0).unwrap();
            assert!((p[0] - 0.25).abs() < 1e-12, "{p:?}");
            assert!((p[1] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn high_temperature_flattens() {
        let p = softmax_with_temperature(&[1.0, 2.0, 3.0], 100.0).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 0.01));
    }

    #[test]
    fn rejects_bad_temperature() {
        assert!(softmax_with_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[1.0], -1.0).is_err());
        assert!(softmax_with_temperature(&[], 1.0).is_err());
    }

    #[test]
    fn entropy_of_uniform_four() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0]), 0.0);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }

    #[test]
    fn position_encoding_values() {
        let pe = sinusoidal_position_encoding(3, 6).unwrap();
        assert_eq!(pe.row_slice(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row_slice(1)[0] - 0.841471).abs() < 1e-6);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_position_encoding(3, 5).is_err());
    }
}
