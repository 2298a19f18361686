use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Array, Rng};

/// Mean of a standard Gumbel variable.
pub const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

/// Softmax with max subtraction.
pub fn stable_softmax<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut out: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v = *v / z);
    Ok(out)
}

pub fn logsumexp<T: Scalar>(x: &[T]) -> Result<T> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("logsumexp of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logsumexp input"));
    }
    let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let s: T = x.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte-Carlo estimate of `E[max_j (x_j + γ_j)]` with i.i.d. standard
/// Gumbel `γ_j`. The exact value is `logsumexp(x) + EULER_MASCHERONI`.
pub fn gumbel_max_expectation(
    x: &[f64],
    n_samples: usize,
    rng: &mut Rng,
) -> Result<MonteCarloEstimate> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("gumbel max of an empty vector".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let m = x
            .iter()
            .map(|&v| v + rng.gumbel())
            .fold(f64::NEG_INFINITY, f64::max);
        sum += m;
        sum_sq += m * m;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        mean,
        std_error: (var / n).sqrt(),
    })
}

/// I.i.d. `N(mean, variance)` draws.
pub fn gaussian_sample<T: Scalar>(
    mean: f64,
    variance: f64,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<Array<T>> {
    if !(variance >= 0.0) || !mean.is_finite() || !variance.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian moments ({mean}, {variance})"
        )));
    }
    let sd = variance.sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if sd == 0.0 {
                T::of(mean)
            } else {
                T::of(mean + sd * rng.normal())
            }
        })
        .collect();
    Array::from_vec(shape, data)
}
