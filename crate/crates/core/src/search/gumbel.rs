//! Concrete (Gumbel-Softmax) relaxation of a categorical choice.

use rand::Rng;
use rand_distr::{Distribution, Open01};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    /// Fresh Gumbel(0,1) perturbation per call.
    Sample,
    /// No perturbation; deterministic.
    None,
}

/// `G = -ln(-ln U)` with `U ~ Uniform(0,1)` (open interval).
pub fn sample_gumbel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let u: f64 = Open01.sample(rng);
            (-(-u.ln()).ln()) as f32
        })
        .collect()
}

/// `Z_k = exp((l_k + G_k)/λ) / Σ_i exp((l_i + G_i)/λ)`, evaluated in `f64`
/// with max-subtraction.
pub fn softmax_with_noise(logits: &[f32], noise: &[f32], lambda: f32) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::Gumbel("no categories".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Gumbel(format!("temperature must be positive, got {lambda}")));
    }
    debug_assert!(noise.is_empty() || noise.len() == logits.len());
    let y: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(k, &l)| (l as f64 + noise.get(k).map_or(0.0, |&g| g as f64)) / lambda as f64)
        .collect();
    let max = y.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = y.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| (v / s) as f32).collect())
}

/// Relaxed one-hot sample over `logits` at temperature `lambda`.
pub fn gumbel_softmax<R: Rng + ?Sized>(
    logits: &[f32],
    lambda: f32,
    noise: Noise,
    rng: &mut R,
) -> Result<Vec<f32>> {
    match noise {
        Noise::None => softmax_with_noise(logits, &[], lambda),
        Noise::Sample => {
            let g = sample_gumbel(logits.len(), rng);
            softmax_with_noise(logits, &g, lambda)
        }
    }
}

/// Lowest index of the maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Exponential temperature decay with a floor:
/// `max(lambda_min, lambda_0 * exp(-rate * round))`.
pub fn anneal(lambda_0: f32, round: usize, rate: f32, lambda_min: f32) -> f32 {
    let v = lambda_0 as f64 * (-(rate as f64) * round as f64).exp();
    (v as f32).max(lambda_min)
}
