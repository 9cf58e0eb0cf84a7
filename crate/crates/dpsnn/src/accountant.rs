//! Rényi-DP accounting for the subsampled Gaussian mechanism: per-step
//! divergence bounds over a grid of orders, additive composition across
//! optimizer steps, conversion to an (ε, δ) statement, and noise
//! calibration to a target ε.
//!
//! All divergence arithmetic runs in 64-bit log space. The subsampled bound
//! uses the binomial expansion at integer orders; a fractional order takes
//! the larger of its two integer neighbors, which stays an upper bound
//! because the divergence is nondecreasing in the order.

use thiserror::Error;

#[derive(Error, Debug, PartialEq)]
pub enum AccountantError {
    #[error("renyi order must exceed 1, got {0}")]
    OrderOutOfRange(f64),
    #[error("noise scale must be positive and finite, got {0}")]
    NoiseScaleNotPositive(f64),
    #[error("sampling rate must lie in [0, 1], got {0}")]
    SamplingRateOutOfRange(f64),
    #[error("delta must lie strictly between 0 and 1, got {0}")]
    DeltaOutOfRange(f64),
    #[error("order grid must be nonempty, sorted ascending, and above 1")]
    BadOrderGrid,
    #[error("divergence accumulation overflowed at order {alpha}")]
    NumericOverflow { alpha: f64 },
    #[error("target epsilon must be positive, got {0}")]
    TargetEpsNotPositive(f64),
    #[error("calibration needs at least one step")]
    ZeroSteps,
    #[error(
        "cannot reach epsilon {target} with sigma in [0.3, 50]: \
         achievable range [{min_eps}, {max_eps}]"
    )]
    CalibrationInfeasible { target: f64, min_eps: f64, max_eps: f64 },
    #[error("sigma bisection failed to land inside the target band")]
    CalibrationDiverged,
}

/// Noise-calibration search bracket.
pub const SIGMA_LO: f64 = 0.3;
pub const SIGMA_HI: f64 = 50.0;

/// Standard accounting grid: quarter steps from 1.25 through 10, then the
/// integers 11 through 63.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=40).map(|i| i as f64 * 0.25).collect();
    orders.extend((11..=63).map(|i| i as f64));
    orders
}

/// Per-step Rényi divergence of the full-batch Gaussian mechanism:
/// α / (2σ²).
pub fn rdp_gaussian(alpha: f64, sigma: f64) -> Result<f64, AccountantError> {
    if !(alpha > 1.0) {
        return Err(AccountantError::OrderOutOfRange(alpha));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(AccountantError::NoiseScaleNotPositive(sigma));
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

fn logsumexp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Binomial-expansion bound at an integer order n >= 2 and 0 < q < 1:
/// the log of E[exp((k^2 - k) / (2 sigma^2))] under k ~ Binomial(n, q),
/// divided by n - 1.
fn rdp_subsampled_integer(n: u64, sigma: f64, q: f64) -> f64 {
    let n = n as usize;
    let mut ln_fact = vec![0.0f64; n + 1];
    for i in 1..=n {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let ln_q = q.ln();
    let ln_1q = (1.0 - q).ln();
    let half_inv_var = 1.0 / (2.0 * sigma * sigma);
    let mut terms = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let ln_choose = ln_fact[n] - ln_fact[k] - ln_fact[n - k];
        let kf = k as f64;
        terms.push(
            ln_choose + (n - k) as f64 * ln_1q + kf * ln_q + (kf * kf - kf) * half_inv_var,
        );
    }
    logsumexp(&terms) / (n as f64 - 1.0)
}

/// Per-step Rényi divergence bound of the Poisson-subsampled Gaussian
/// mechanism at sampling rate q. q = 1 reduces to the full-batch formula;
/// q = 0 means the data is never touched and costs nothing. Orders below 2
/// are charged at order 2.
pub fn rdp_subsampled_gaussian(alpha: f64, sigma: f64, q: f64) -> Result<f64, AccountantError> {
    if !(alpha > 1.0) {
        return Err(AccountantError::OrderOutOfRange(alpha));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(AccountantError::NoiseScaleNotPositive(sigma));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(AccountantError::SamplingRateOutOfRange(q));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return rdp_gaussian(alpha, sigma);
    }
    let lo = (alpha.floor() as u64).max(2);
    let hi = (alpha.ceil() as u64).max(2);
    let mut value = rdp_subsampled_integer(lo, sigma, q);
    if hi != lo {
        value = value.max(rdp_subsampled_integer(hi, sigma, q));
    }
    if !value.is_finite() {
        return Err(AccountantError::NumericOverflow { alpha });
    }
    Ok(value)
}

/// Running privacy account for one training run: the order grid, the fixed
/// per-step divergence at each order, and how many steps have composed.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivacyLedger {
    pub orders: Vec<f64>,
    pub per_step: Vec<f64>,
    pub steps: u64,
    pub sampling_rate: f64,
    pub noise_scale: f64,
}

impl PrivacyLedger {
    pub fn new(noise_scale: f64, sampling_rate: f64) -> Result<Self, AccountantError> {
        Self::with_orders(noise_scale, sampling_rate, default_orders())
    }

    pub fn with_orders(
        noise_scale: f64,
        sampling_rate: f64,
        orders: Vec<f64>,
    ) -> Result<Self, AccountantError> {
        if orders.is_empty()
            || orders.windows(2).any(|w| w[0] >= w[1])
            || !(orders[0] > 1.0)
        {
            return Err(AccountantError::BadOrderGrid);
        }
        let per_step = orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(a, noise_scale, sampling_rate))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PrivacyLedger { orders, per_step, steps: 0, sampling_rate, noise_scale })
    }

    /// Account for one more noisy optimizer step.
    pub fn compose_step(&mut self) {
        self.steps += 1;
    }

    pub fn compose_steps(&mut self, k: u64) {
        self.steps += k;
    }

    /// Accumulated divergence per order. Multiplying the fixed per-step
    /// value keeps k compositions exactly k times one composition.
    pub fn rdp_eps(&self) -> Vec<f64> {
        self.per_step.iter().map(|&v| v * self.steps as f64).collect()
    }

    /// Tightest (ε, δ) statement on the grid plus the order that attains
    /// it: ε = min over α of accumulated(α) + ln(1/δ)/(α - 1).
    pub fn to_eps_delta(&self, delta: f64) -> Result<(f64, f64), AccountantError> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(AccountantError::DeltaOutOfRange(delta));
        }
        if self.orders.is_empty() {
            return Err(AccountantError::BadOrderGrid);
        }
        let ln_inv_delta = (1.0 / delta).ln();
        let steps = self.steps as f64;
        let mut best = (f64::INFINITY, self.orders[0]);
        for (&alpha, &per) in self.orders.iter().zip(&self.per_step) {
            let eps = per * steps + ln_inv_delta / (alpha - 1.0);
            if eps < best.0 {
                best = (eps, alpha);
            }
        }
        Ok(best)
    }
}

/// Finds a noise scale whose converted ε after `total_steps` compositions
/// lands in [0.995·target, target], by bisection over [0.3, 50]. ε is
/// continuous and decreasing in σ, so the band is always reachable when the
/// bracket endpoints straddle the target.
pub fn calibrate_sigma(
    target_eps: f64,
    delta: f64,
    q: f64,
    total_steps: u64,
) -> Result<f64, AccountantError> {
    if !(target_eps > 0.0) || !target_eps.is_finite() {
        return Err(AccountantError::TargetEpsNotPositive(target_eps));
    }
    if total_steps == 0 {
        return Err(AccountantError::ZeroSteps);
    }
    let eps_at = |sigma: f64| -> Result<f64, AccountantError> {
        let mut ledger = PrivacyLedger::new(sigma, q)?;
        ledger.compose_steps(total_steps);
        Ok(ledger.to_eps_delta(delta)?.0)
    };
    let band_floor = 0.995 * target_eps;
    let max_eps = eps_at(SIGMA_LO)?;
    let min_eps = eps_at(SIGMA_HI)?;
    if target_eps < min_eps || band_floor > max_eps {
        return Err(AccountantError::CalibrationInfeasible {
            target: target_eps,
            min_eps,
            max_eps,
        });
    }
    if max_eps <= target_eps {
        return Ok(SIGMA_LO);
    }
    let (mut lo, mut hi) = (SIGMA_LO, SIGMA_HI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let eps = eps_at(mid)?;
        if eps > target_eps {
            lo = mid;
        } else {
            hi = mid;
            if eps >= band_floor {
                return Ok(hi);
            }
        }
    }
    Err(AccountantError::CalibrationDiverged)
}
