//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! One step of DP-SGD with sampling rate `q` and noise multiplier `σ` satisfies
//! `(α, ε_RDP(α))`-RDP for every integer order `α ≥ 2`, with
//!
//! ```text
//! ε_RDP(α) = 1/(α-1) · log Σ_{k=0..α} C(α,k) (1-q)^(α-k) q^k exp(k(k-1)/(2σ²))
//! ```
//!
//! RDP composes additively over steps and converts to `(ε, δ)`-DP through
//! `ε = min_α ε_RDP(α) + log(1/δ)/(α-1)`. The accountant assumes Poisson
//! subsampling with rate `q`; batches drawn by shuffling are accounted as if
//! they were Poisson with `q = B/n`.
//!
//! The binomial sum is evaluated in log space. Because the `k = 0` and `k = 1`
//! terms carry `exp(0) = 1` and the full binomial expansion of
//! `((1-q) + q)^α` equals one, the sum is `1 + Σ_{k≥2} C(α,k)(1-q)^(α-k) q^k
//! expm1(k(k-1)/(2σ²))`. Every term of the remainder is positive, so its
//! log-sum-exp is free of cancellation even when `q` is tiny.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower and upper noise multipliers searched by [`calibrate_sigma`].
pub const SIGMA_BRACKET: (f64, f64) = (1e-2, 1e2);

/// Relative width at which the calibration bisection stops.
pub const CALIBRATION_TOLERANCE: f64 = 1e-4;

/// Orders `{2, …, 64} ∪ {128, 256, 512}`.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([128, 256, 512]).collect()
}

/// RDP values indexed by integer Rényi order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpProfile {
    orders: Vec<u32>,
    values: Vec<f64>,
}

impl RdpProfile {
    pub fn new(orders: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if orders.len() != values.len() {
            return Err(Error::Shape {
                what: "rdp values",
                expected: orders.len(),
                actual: values.len(),
            });
        }
        if let Some(&a) = orders.iter().find(|&&a| a < 2) {
            return Err(Error::domain(format!("Rényi order {a} is below 2")));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("Rényi orders must be strictly increasing"));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::domain(format!("RDP value {v} is not a nonnegative number")));
        }
        Ok(Self { orders, values })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.orders.iter().copied().zip(self.values.iter().copied())
    }

    /// Sequential composition with another mechanism accounted on the same orders.
    pub fn combine(&self, other: &RdpProfile) -> Result<RdpProfile> {
        if self.orders != other.orders {
            return Err(Error::domain("cannot combine RDP profiles over different orders"));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(RdpProfile {
            orders: self.orders.clone(),
            values,
        })
    }
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    let n = f64::from(n);
    let k = f64::from(k);
    libm::lgamma(n + 1.0) - libm::lgamma(k + 1.0) - libm::lgamma(n - k + 1.0)
}

/// `log(exp(x) - 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 1.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `log(1 + exp(x))`.
fn ln_1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn rdp_at_order(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = f64::from(alpha);
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    if q == 1.0 {
        return a * inv_two_var;
    }
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let terms: Vec<f64> = (2..=alpha)
        .map(|k| {
            let kf = f64::from(k);
            ln_binomial(alpha, k) + (a - kf) * log_1mq + kf * log_q + ln_expm1(kf * (kf - 1.0) * inv_two_var)
        })
        .collect();
    ln_1p_exp(log_sum_exp(&terms)) / (a - 1.0)
}

fn check_mechanism(q: f64, sigma: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain(format!("sampling rate {q} outside (0, 1]")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!(
            "noise multiplier {sigma} must be positive and finite"
        )));
    }
    Ok(())
}

/// Single-step RDP of the subsampled Gaussian mechanism at each order.
pub fn rdp_sampled_gaussian(q: f64, sigma: f64, orders: &[u32]) -> Result<RdpProfile> {
    check_mechanism(q, sigma)?;
    if let Some(&a) = orders.iter().find(|&&a| a < 2) {
        return Err(Error::domain(format!("Rényi order {a} is below 2")));
    }
    let values = orders.iter().map(|&a| rdp_at_order(q, sigma, a)).collect();
    RdpProfile::new(orders.to_vec(), values)
}

/// RDP of `steps` adaptive compositions of the same mechanism.
pub fn compose(profile: &RdpProfile, steps: u64) -> RdpProfile {
    let t = steps as f64;
    RdpProfile {
        orders: profile.orders.clone(),
        values: profile.values.iter().map(|v| v * t).collect(),
    }
}

/// Converts RDP to `(ε, δ)`-DP. Returns `ε` and the order attaining it; ties
/// go to the smallest order.
pub fn rdp_to_eps(profile: &RdpProfile, delta: f64) -> Result<(f64, u32)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta {delta} outside (0, 1)")));
    }
    if profile.is_empty() {
        return Err(Error::domain("empty RDP profile"));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, profile.orders[0]);
    for (alpha, rdp) in profile.iter() {
        let eps = rdp + log_inv_delta / f64::from(alpha - 1);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    Ok(best)
}

/// `(ε, best order)` after `steps` steps at rate `q` and noise multiplier `sigma`.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64, orders: &[u32]) -> Result<(f64, u32)> {
    let single = rdp_sampled_gaussian(q, sigma, orders)?;
    rdp_to_eps(&compose(&single, steps), delta)
}

/// Smallest noise multiplier (up to [`CALIBRATION_TOLERANCE`]) whose
/// accounted `ε` does not exceed `eps_target`.
///
/// Bisects on `log σ` over [`SIGMA_BRACKET`] and returns the upper, privacy
/// preserving end of the final interval.
pub fn calibrate_sigma(eps_target: f64, delta: f64, q: f64, steps: u64, orders: &[u32]) -> Result<f64> {
    if !(eps_target > 0.0 && eps_target.is_finite()) {
        return Err(Error::domain(format!("target epsilon {eps_target} must be positive")));
    }
    if steps == 0 {
        return Err(Error::domain("step count must be at least 1"));
    }
    let eps_at = |sigma: f64| epsilon_for(q, sigma, steps, delta, orders).map(|(e, _)| e);
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let eps_hi = eps_at(hi)?;
    if eps_hi > eps_target {
        return Err(Error::Bracket {
            endpoint: "upper",
            sigma: hi,
            epsilon: eps_hi,
            target: eps_target,
        });
    }
    let eps_lo = eps_at(lo)?;
    if eps_lo <= eps_target {
        return Err(Error::Bracket {
            endpoint: "lower",
            sigma: lo,
            epsilon: eps_lo,
            target: eps_target,
        });
    }
    while hi / lo > 1.0 + CALIBRATION_TOLERANCE {
        let mid = (0.5 * (lo.ln() + hi.ln())).exp();
        if eps_at(mid)? <= eps_target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Privacy parameters of a DP training run.
///
/// `noise_multiplier` is `None` until the spec is resolved, either by
/// [`PrivacySpec::calibrated`] or by setting it directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub noise_multiplier: Option<f64>,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64, clip_norm: f64, sampling_rate: f64, steps: u64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::domain(format!("epsilon {epsilon} must be positive")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::domain(format!("delta {delta} outside (0, 1)")));
        }
        if !(clip_norm > 0.0) {
            return Err(Error::domain(format!("clip norm {clip_norm} must be positive")));
        }
        if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
            return Err(Error::domain(format!("sampling rate {sampling_rate} outside (0, 1]")));
        }
        if steps == 0 {
            return Err(Error::domain("step count must be at least 1"));
        }
        Ok(Self {
            epsilon,
            delta,
            clip_norm,
            sampling_rate,
            steps,
            noise_multiplier: None,
        })
    }

    /// Logs a warning when `δ` is not below `1/n`.
    pub fn check_delta_for(&self, dataset_size: usize) {
        if self.delta >= 1.0 / dataset_size as f64 {
            log::warn!(
                "delta {} is not below 1/n = {}; the guarantee is weak",
                self.delta,
                1.0 / dataset_size as f64
            );
        }
    }

    pub fn calibrated(mut self, orders: &[u32]) -> Result<Self> {
        let sigma = calibrate_sigma(self.epsilon, self.delta, self.sampling_rate, self.steps, orders)?;
        self.noise_multiplier = Some(sigma);
        Ok(self)
    }

    pub fn with_noise_multiplier(mut self, sigma: f64) -> Self {
        self.noise_multiplier = Some(sigma);
        self
    }
}

/// Sampling model the accountant assumes; recorded in every report.
pub const SAMPLING_ASSUMPTION: &str = "poisson";

/// Achieved privacy of a resolved [`PrivacySpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    pub clip_norm: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub best_order: u32,
    pub rdp: Vec<(u32, f64)>,
    pub sampling_assumption: String,
}

impl PrivacyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn privacy_report(spec: &PrivacySpec) -> Result<PrivacyReport> {
    privacy_report_with_orders(spec, &default_orders())
}

pub fn privacy_report_with_orders(spec: &PrivacySpec, orders: &[u32]) -> Result<PrivacyReport> {
    let sigma = spec
        .noise_multiplier
        .ok_or_else(|| Error::State("privacy spec has no resolved noise multiplier".into()))?;
    let profile = compose(&rdp_sampled_gaussian(spec.sampling_rate, sigma, orders)?, spec.steps);
    let (epsilon, best_order) = rdp_to_eps(&profile, spec.delta)?;
    Ok(PrivacyReport {
        epsilon,
        delta: spec.delta,
        sigma,
        clip_norm: spec.clip_norm,
        sampling_rate: spec.sampling_rate,
        steps: spec.steps,
        best_order,
        rdp: profile.iter().collect(),
        sampling_assumption: SAMPLING_ASSUMPTION.to_string(),
    })
}
