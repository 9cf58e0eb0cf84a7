//! Shared oracle machinery for the integration suites: finite differences,
//! log-space quadrature of the subsampled-Gaussian divergence, and a scalar
//! reverse-mode tape for naive network unrolling.
#![allow(dead_code)]

pub mod fd;
pub mod quad;
pub mod unroll;

/// Deterministic xorshift values in [-0.5, 0.5), for building test fixtures
/// without touching the crate's own RNG plumbing.
pub fn fill(len: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    (0..len)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state % 100_000) as f64) / 100_000.0 - 0.5
        })
        .collect()
}

/// Largest guarded relative error between two gradient vectors:
/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero entries from
/// dominating through round-off alone.
pub fn max_rel_err(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
