//! Gaussian differential privacy: the Gaussian mechanism's `(ε, δ)` curve,
//! amplification by fixed-size subsampling, a central-limit accountant for
//! `T` subsampled Gaussian steps, and noise calibration.
//!
//! The accountant follows the Gaussian-DP limit theorem for subsampled
//! compositions: `T` steps at sampling rate `p` with noise multiplier `ν`
//! behave like a single `μ`-GDP mechanism with
//! `μ = p √T √(exp(1/ν²) − 1)`. Because subsampling never hurts, `μ` is
//! capped by the exact unsubsampled value `√T / ν`; at `p = 1` the cap is the
//! exact answer.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Identifier of the composition formula, recorded in run metadata.
pub const ACCOUNTANT_FORMULA: &str =
    "gdp-clt-fixed-size-subsampling: mu = min(p*sqrt(T)*sqrt(exp(1/nu^2)-1), sqrt(T)/nu)";

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(invalid(format!("delta must lie in [0, 1], got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }
}

/// `μ` of a `μ`-GDP mechanism (`μ = Δ/σ` for the Gaussian mechanism).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct GdpParameter(pub f64);

impl GdpParameter {
    pub fn new(mu: f64) -> Result<Self> {
        if mu.is_nan() || mu < 0.0 {
            return Err(invalid(format!("mu must be >= 0, got {mu}")));
        }
        Ok(Self(mu))
    }

    pub fn mu(self) -> f64 {
        self.0
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `ln Φ(x)`, accurate far into the lower tail.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else if x > -30.0 {
        normal_cdf(x).ln()
    } else {
        // Φ(x) = φ(x)/|x| · Σ_k (-1)^k (2k-1)!! / x^{2k}
        let inv = 1.0 / (x * x);
        let mut term = 1.0;
        let mut series = 1.0;
        for k in 1..=12 {
            term *= -((2 * k - 1) as f64) * inv;
            series += term;
        }
        -0.5 * x * x - (-x).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// `ln δ(ε)` for a `μ`-GDP mechanism.
pub fn gdp_log_delta(mu: GdpParameter, epsilon: f64) -> Result<f64> {
    let mu = mu.0;
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(invalid(format!("mu must be positive and finite, got {mu}")));
    }
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon.is_infinite() {
        return Ok(f64::NEG_INFINITY);
    }
    let a = -epsilon / mu + mu / 2.0;
    let b = -epsilon / mu - mu / 2.0;
    let ln_a = log_normal_cdf(a);
    let ln_ratio = epsilon + log_normal_cdf(b) - ln_a;
    if ln_ratio >= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(ln_a + (-ln_ratio.exp_m1()).ln())
}

/// `δ(ε) = Φ(−ε/μ + μ/2) − e^ε Φ(−ε/μ − μ/2)`.
pub fn gdp_delta(mu: GdpParameter, epsilon: f64) -> Result<f64> {
    Ok(gdp_log_delta(mu, epsilon)?.exp())
}

/// Smallest `ε ≥ 0` with `δ(ε) ≤ delta` for a `μ`-GDP mechanism.
pub fn gdp_epsilon(mu: GdpParameter, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if mu.0 == 0.0 {
        return Ok(0.0);
    }
    if !mu.0.is_finite() {
        return Err(Error::Saturated(format!("mu = {} admits no finite epsilon", mu.0)));
    }
    let target = delta.ln();
    if gdp_log_delta(mu, 0.0)? <= target {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0f64;
    while gdp_log_delta(mu, hi)? > target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e9 {
            return Err(Error::Saturated(format!(
                "no epsilon below 1e9 reaches delta = {delta:e} at mu = {}",
                mu.0
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gdp_log_delta(mu, mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Amplification by fixed-size sampling without replacement at rate `p`:
/// `(ln(1 + p(e^ε − 1)), pδ)`.
pub fn subsample_amplify(budget: PrivacyBudget, p: f64) -> Result<PrivacyBudget> {
    check_rate(p)?;
    let eps = budget.epsilon;
    let amplified = if eps <= 1.0 {
        (p * eps.exp_m1()).ln_1p()
    } else {
        // ln(p e^ε + 1 − p) rewritten to avoid overflowing e^ε
        eps + (p + (1.0 - p) * (-eps).exp()).ln()
    };
    Ok(PrivacyBudget {
        epsilon: amplified.min(eps),
        delta: p * budget.delta,
    })
}

fn check_rate(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(format!("sampling rate must lie in (0, 1], got {p}")));
    }
    Ok(())
}

/// Composition state of a run of subsampled Gaussian steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    /// `ν = σ/Δ`.
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub target_delta: f64,
}

impl AccountantState {
    pub fn new(noise_multiplier: f64, sampling_rate: f64, target_delta: f64) -> Result<Self> {
        let state = Self {
            noise_multiplier,
            sampling_rate,
            steps: 0,
            target_delta,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_multiplier > 0.0) {
            return Err(invalid(format!(
                "noise multiplier must be positive, got {}",
                self.noise_multiplier
            )));
        }
        check_rate(self.sampling_rate)?;
        if !(self.target_delta > 0.0 && self.target_delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {}", self.target_delta)));
        }
        Ok(())
    }

    pub fn step(&mut self) {
        self.steps += 1;
    }

    pub fn mu(&self) -> GdpParameter {
        GdpParameter(composed_mu(self.noise_multiplier, self.sampling_rate, self.steps))
    }

    /// `ε` spent so far at the target `δ`.
    pub fn epsilon(&self) -> Result<f64> {
        if self.steps == 0 {
            return Ok(0.0);
        }
        compose_subsampled_gaussian(self, self.target_delta)
    }
}

/// GDP parameter of `steps` compositions of the rate-`p` subsampled Gaussian
/// mechanism with noise multiplier `ν`.
pub fn composed_mu(noise_multiplier: f64, p: f64, steps: u64) -> f64 {
    let sqrt_t = (steps as f64).sqrt();
    let exact_unsampled = sqrt_t / noise_multiplier;
    if p >= 1.0 {
        return exact_unsampled;
    }
    let clt = p * sqrt_t * (noise_multiplier.powi(-2)).exp_m1().sqrt();
    clt.min(exact_unsampled)
}

/// `ε` at `target_delta` of the `T`-fold subsampled composition.
pub fn compose_subsampled_gaussian(state: &AccountantState, target_delta: f64) -> Result<f64> {
    state.validate()?;
    if state.steps == 0 {
        return Err(invalid("accountant needs at least one step"));
    }
    gdp_epsilon(state.mu(), target_delta)
}

/// Conservative ceiling: each step is `(ε₀, δ₀)`-DP by the Gaussian curve,
/// amplified by subsampling and summed over steps, with `δ₀` chosen so that
/// the summed `δ` equals `target_delta`.
pub fn naive_composition_epsilon(noise_multiplier: f64, p: f64, steps: u64, target_delta: f64) -> Result<f64> {
    check_rate(p)?;
    if steps == 0 {
        return Err(invalid("need at least one step"));
    }
    let per_step_delta = (target_delta / (steps as f64 * p)).min(0.5);
    let eps0 = gdp_epsilon(GdpParameter(1.0 / noise_multiplier), per_step_delta)?;
    let amplified = subsample_amplify(PrivacyBudget::new(eps0, per_step_delta)?, p)?;
    Ok(steps as f64 * amplified.epsilon)
}

/// Calibrated noise for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub sigma: f64,
    pub noise_multiplier: f64,
    /// `ε` actually reached (`≤` the target).
    pub epsilon: f64,
    pub mu: f64,
}

fn epsilon_at(noise_multiplier: f64, steps: u64, p: f64, delta: f64) -> f64 {
    let mu = GdpParameter(composed_mu(noise_multiplier, p, steps));
    gdp_epsilon(mu, delta).unwrap_or(f64::INFINITY)
}

/// Smallest `σ` (to relative `1e-10`) such that `steps` subsampled Gaussian
/// steps with sensitivity `sensitivity` stay within `target`.
pub fn calibrate_noise(target: PrivacyBudget, steps: u64, p: f64, sensitivity: f64) -> Result<Calibration> {
    let mut bad = Vec::new();
    if !(target.epsilon > 0.0 && target.epsilon.is_finite()) {
        bad.push(format!("epsilon must be positive and finite, got {}", target.epsilon));
    }
    if !(target.delta > 0.0 && target.delta < 1.0) {
        bad.push(format!("delta must lie in (0, 1), got {}", target.delta));
    }
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        bad.push(format!("sensitivity must be positive and finite, got {sensitivity}"));
    }
    if steps == 0 {
        bad.push("steps must be >= 1".into());
    }
    if !(p > 0.0 && p <= 1.0) {
        bad.push(format!("sampling rate must lie in (0, 1], got {p}"));
    }
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    let meets = |nu: f64| epsilon_at(nu, steps, p, target.delta) <= target.epsilon;
    let (mut lo, mut hi) = (1.0, 1.0);
    if meets(hi) {
        while meets(lo) {
            hi = lo;
            lo *= 0.5;
            if lo < 1e-12 {
                return Err(Error::NonConvergent(format!(
                    "target {target:?} is met even with noise multiplier {lo:e}"
                )));
            }
        }
    } else {
        while !meets(hi) {
            lo = hi;
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::NonConvergent(format!(
                    "no noise multiplier below 1e12 meets {target:?} after {steps} steps at rate {p}"
                )));
            }
        }
    }
    while (hi - lo) > 1e-10 * hi {
        let mid = 0.5 * (lo + hi);
        if meets(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Calibration {
        sigma: hi * sensitivity,
        noise_multiplier: hi,
        epsilon: epsilon_at(hi, steps, p, target.delta),
        mu: composed_mu(hi, p, steps),
    })
}

/// `v + σ N(0, I)` with noise drawn from the stream `(seed, step)`.
pub fn gaussian_mechanism(v: &[f64], sigma: f64, seed: u64, step: u64) -> Result<Vec<f64>> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.to_vec());
    }
    let mut rng = rng::step_stream(seed, rng::streams::NOISE, step);
    Ok(v.iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            x + sigma * z
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsampling_examples() {
        let b = PrivacyBudget::new(0.7, 1e-5).unwrap();
        assert_eq!(subsample_amplify(b, 1.0).unwrap(), b);
        let half = subsample_amplify(PrivacyBudget::new(2f64.ln(), 1e-4).unwrap(), 0.5).unwrap();
        assert!((half.epsilon - 1.5f64.ln()).abs() < 1e-15);
        assert!((half.delta - 5e-5).abs() < 1e-20);
        for eps in [0.01, 0.05, 0.1] {
            let a = subsample_amplify(PrivacyBudget::new(eps, 0.0).unwrap(), 0.3).unwrap();
            assert!((a.epsilon / (0.3 * eps) - 1.0).abs() < 0.05);
        }
        assert!(subsample_amplify(b, 0.0).is_err());
        assert!(subsample_amplify(b, 1.5).is_err());
        let big = subsample_amplify(PrivacyBudget::new(800.0, 0.0).unwrap(), 0.1).unwrap();
        assert!((big.epsilon - (800.0 + 0.1f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn gdp_delta_limits() {
        assert!(gdp_delta(GdpParameter(1e-8), 1.0).unwrap() < 1e-300);
        let tiny = gdp_log_delta(GdpParameter(1.0), 50.0).unwrap();
        assert!(tiny.is_finite() && tiny < -690.0);
        assert!(gdp_delta(GdpParameter(0.0), 1.0).is_err());
        assert!(gdp_delta(GdpParameter(-1.0), 1.0).is_err());
    }

    #[test]
    fn log_cdf_branches_agree() {
        for x in [-29.0, -25.0, -10.0, -1.0, 0.0, 3.0] {
            let direct = normal_cdf(x).ln();
            assert!((log_normal_cdf(x) - direct).abs() < 1e-12 * direct.abs().max(1.0));
        }
        // asymptotic branch continues smoothly across the switch point
        let below = log_normal_cdf(-30.000001);
        let above = log_normal_cdf(-29.999999);
        assert!((below - above).abs() < 1e-4);
        assert!(below < above);
    }

    #[test]
    fn single_step_full_batch_is_exact_inversion() {
        let state = AccountantState {
            noise_multiplier: 1.3,
            sampling_rate: 1.0,
            steps: 1,
            target_delta: 1e-5,
        };
        let eps = compose_subsampled_gaussian(&state, 1e-5).unwrap();
        let delta = gdp_delta(GdpParameter(1.0 / 1.3), eps).unwrap();
        assert!((delta - 1e-5).abs() < 1e-9 * 1e-5 + 1e-18);
    }

    #[test]
    fn calibration_validation() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        assert!(matches!(calibrate_noise(b, 10, 0.1, 0.0), Err(Error::Validation(_))));
        assert!(calibrate_noise(b, 0, 0.1, 1.0).is_err());
        let c1 = calibrate_noise(b, 100, 0.2, 1.0).unwrap();
        let c2 = calibrate_noise(b, 100, 0.2, 0.5).unwrap();
        assert!((c2.sigma / c1.sigma - 0.5).abs() < 1e-12);
    }

    #[test]
    fn direct_inversion_for_one_full_step() {
        // a single full-batch step is μ-GDP with μ = Δ/σ
        let mu = 0.8;
        let delta = gdp_delta(GdpParameter(mu), 1.0).unwrap();
        let target = PrivacyBudget::new(1.0, delta).unwrap();
        let cal = calibrate_noise(target, 1, 1.0, 2.0).unwrap();
        assert!((cal.sigma - 2.0 / mu).abs() < 1e-8);
    }

    #[test]
    fn mechanism_is_identity_without_noise_and_reproducible() {
        let v = [1.0, -2.0, 3.0];
        assert_eq!(gaussian_mechanism(&v, 0.0, 5, 0).unwrap(), v.to_vec());
        let a = gaussian_mechanism(&v, 1.5, 5, 3).unwrap();
        assert_eq!(a, gaussian_mechanism(&v, 1.5, 5, 3).unwrap());
        assert_ne!(a, gaussian_mechanism(&v, 1.5, 5, 4).unwrap());
        assert!(gaussian_mechanism(&v, -1.0, 5, 0).is_err());
    }

    #[test]
    fn accountant_state_round_trips_through_json() {
        let mut s = AccountantState::new(1.1, 0.2, 1e-5).unwrap();
        s.step();
        s.step();
        let back: AccountantState = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.epsilon().unwrap(), s.epsilon().unwrap());
        assert!(AccountantState::new(0.0, 0.2, 1e-5).is_err());
    }
}
