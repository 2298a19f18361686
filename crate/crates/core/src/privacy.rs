//! Gaussian noise for DP-SGD and Rényi-DP accounting of the Poisson
//! subsampled Gaussian mechanism.
//!
//! A noisy step releases `(Σ_i clip(g_i) + σ·C·ζ) / B` with `ζ ~ N(0, I)`.
//! The accountant evaluates the mechanism's Rényi divergence at a grid of
//! orders, composes over steps by addition and converts to `(ε, δ)` with
//! `ε = min_α RDP(α) + ln(1/δ)/(α-1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::scalar::Scalar;
use crate::transformer::ModelParams;

/// Search bracket for [`calibrate_sigma`].
pub const SIGMA_BRACKET: (f64, f64) = (0.3, 50.0);

/// `{1.25, 1.5, 2, 3, …, 64, 128, 256}`
pub fn default_orders() -> Vec<f64> {
    let mut v = vec![1.25, 1.5];
    v.extend((2..=64).map(f64::from));
    v.extend([128.0, 256.0]);
    v
}

/// Adds `σ·C·N(0, 1)` to each coordinate of `summed` and divides by `b`.
/// With `σ = 0` no noise is drawn, so `C = ∞` is allowed.
pub fn dp_noise_average<T: Scalar>(
    summed: &[T],
    c: f64,
    sigma: f64,
    b_nominal: f64,
    rng: &mut Rng,
) -> Result<Vec<T>> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("noise multiplier {sigma} must be >= 0")));
    }
    if b_nominal.is_nan() || b_nominal <= 0.0 {
        return Err(Error::InvalidArgument(format!("batch size {b_nominal} must be positive")));
    }
    if sigma > 0.0 && !c.is_finite() {
        return Err(Error::InvalidArgument("noise needs a finite clipping norm".into()));
    }
    let inv_b = 1.0 / b_nominal;
    let std = sigma * c;
    Ok(summed
        .iter()
        .map(|&g| {
            let noise = if sigma > 0.0 { std * rng.normal() } else { 0.0 };
            T::of((g.as_f64() + noise) * inv_b)
        })
        .collect())
}

/// Noisy averaged gradient, group by group in canonical order.
pub fn dp_step<T: Scalar>(
    summed_clipped: &ModelParams<T>,
    c: f64,
    sigma: f64,
    b_nominal: f64,
    rng: &mut Rng,
) -> Result<ModelParams<T>> {
    let mut out = summed_clipped.clone();
    for id in summed_clipped.ids() {
        let a = out.get_mut(id).expect("own id");
        let noisy = dp_noise_average(a.data(), c, sigma, b_nominal, rng)?;
        a.data_mut().copy_from_slice(&noisy);
    }
    Ok(out)
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        // Cancellation below floating resolution.
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln(erfc(x))`, with an asymptotic series where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return libm::erfc(x).ln();
    }
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2)
        + 105.0 / (16.0 * x2 * x2 * x2 * x2);
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}

fn ln_binom_int(n: u64, k: u64) -> f64 {
    libm::lgamma((n + 1) as f64) - libm::lgamma((k + 1) as f64) - libm::lgamma((n - k + 1) as f64)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_a = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let fi = i as f64;
        let s = ln_binom_int(alpha, i) + fi * lq + (alpha - i) as f64 * l1q
            + (fi * fi - fi) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, s);
    }
    log_a
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = 2.0 * sigma * sigma;
    let mut coef = 1.0f64;
    let mut i = 0u32;
    loop {
        let fi = f64::from(i);
        let j = alpha - fi;
        let log_coef = coef.abs().ln();
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let log_s0 = log_t0 + (fi * fi - fi) / s2 + log_e0;
        let log_s1 = log_t1 + (j * j - j) / s2 + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        coef *= (alpha - fi) / (fi + 1.0);
        i += 1;
        if log_s0.max(log_s1) < -30.0 || i > 10_000 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// RDP of one step of the sampled Gaussian mechanism at order `alpha`.
pub fn rdp_sampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate {q} not in (0, 1]")));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("noise multiplier {sigma} must be > 0")));
    }
    if alpha.is_nan() || alpha <= 1.0 {
        return Err(Error::InvalidArgument(format!("order {alpha} must exceed 1")));
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 && alpha < 1e6 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    Ok((log_a / (alpha - 1.0)).max(0.0))
}

/// Converts composed RDP values to `(ε, best order)`.
pub fn epsilon_from_rdp(orders: &[f64], rdp: &[f64], delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} not in (0, 1)")));
    }
    let log_inv_delta = -delta.ln();
    orders
        .iter()
        .zip(rdp)
        .map(|(&a, &r)| (r + log_inv_delta / (a - 1.0), a))
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .ok_or_else(|| Error::InvalidArgument("no RDP orders".into()))
}

/// Accounting state for a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub sigma_dp: f64,
    pub q: f64,
    pub steps_taken: u64,
    pub delta: f64,
    pub rdp_orders: Vec<f64>,
    /// Batches were drawn uniformly rather than by Poisson sampling; the
    /// reported ε then treats `q = B/N` as a Poisson rate.
    pub uniform_sampling_caveat: bool,
}

impl PrivacyLedger {
    pub fn new(sigma_dp: f64, q: f64, delta: f64) -> Self {
        PrivacyLedger {
            sigma_dp,
            q,
            steps_taken: 0,
            delta,
            rdp_orders: default_orders(),
            uniform_sampling_caveat: false,
        }
    }

    pub fn advance(&mut self, steps: u64) {
        self.steps_taken += steps;
    }

    /// Composed RDP at every order.
    pub fn rdp(&self) -> Result<Vec<f64>> {
        self.rdp_orders
            .iter()
            .map(|&a| Ok(rdp_sampled_gaussian(self.q, self.sigma_dp, a)? * self.steps_taken as f64))
            .collect()
    }

    /// `(ε, best order)`
    pub fn epsilon_with_order(&self) -> Result<(f64, f64)> {
        if self.sigma_dp == 0.0 && self.steps_taken > 0 {
            return Ok((f64::INFINITY, f64::NAN));
        }
        if self.steps_taken == 0 {
            return Ok((0.0, f64::NAN));
        }
        epsilon_from_rdp(&self.rdp_orders, &self.rdp()?, self.delta)
    }

    pub fn epsilon(&self) -> Result<f64> {
        Ok(self.epsilon_with_order()?.0)
    }
}

/// ε spent after `steps` steps of the sampled Gaussian mechanism.
pub fn rdp_epsilon(sigma_dp: f64, q: f64, steps: u64, delta: f64) -> Result<f64> {
    let mut ledger = PrivacyLedger::new(sigma_dp, q, delta);
    ledger.advance(steps);
    ledger.epsilon()
}

/// Smallest noise multiplier in [`SIGMA_BRACKET`] whose ε does not exceed
/// the target, found by bisection until ε is within 0.1% below it.
pub fn calibrate_sigma(epsilon_target: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if epsilon_target.is_nan() || epsilon_target <= 0.0 {
        return Err(Error::InvalidArgument(format!("target epsilon {epsilon_target} must be positive")));
    }
    let (lo0, hi0) = SIGMA_BRACKET;
    let unreachable = Error::Calibration {
        target: epsilon_target,
        lo: lo0,
        hi: hi0,
    };
    let eps = |s: f64| rdp_epsilon(s, q, steps, delta);
    if eps(hi0)? > epsilon_target || eps(lo0)? < 0.999 * epsilon_target {
        return Err(unreachable);
    }
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..200 {
        let e_hi = eps(hi)?;
        if e_hi >= 0.999 * epsilon_target {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if eps(mid)? > epsilon_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(unreachable)
}
