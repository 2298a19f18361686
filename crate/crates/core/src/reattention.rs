//! Re-attention: debiasing attention under DP noise.
//!
//! A key `K_i ~ N(k_i, σ_i² I)` inflates the expected score of token `i` by
//! roughly `exp(C σ_i²/2)` with `C = ⟨q, q⟩`. The correction divides each
//! score by that factor and renormalizes. The variances come from effective
//! errors (DP noise per parameter, scaled by how many batch elements touch
//! it) propagated through the encoder with isotropic Gaussian moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{kernels, stable_softmax, Array, Rng};
use crate::scalar::Scalar;
use crate::seqdata::{SequenceBatch, PAD};
use crate::transformer::{
    forward_prefix, layer_norm, Activation, AttentionCorrection, ForwardCache, LnCache, ModelParams,
    MAX_CORRECTION_EXPONENT,
};

/// Per-parameter noise scales: `σ_dp/(B·p_i)` per token embedding row and
/// `σ_dp/B` for every parameter touched by every sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveError {
    pub token: Vec<f64>,
    pub weight: f64,
}

impl EffectiveError {
    pub fn zero(vocab_size: usize) -> Self {
        EffectiveError {
            token: vec![0.0; vocab_size],
            weight: 0.0,
        }
    }
}

/// `frequencies[i]` is the probability that a sample touches token `i + 1`.
pub fn effective_errors(sigma_dp: f64, batch_size: f64, frequencies: &[f64]) -> Result<EffectiveError> {
    if sigma_dp.is_nan() || sigma_dp < 0.0 {
        return Err(Error::InvalidArgument(format!("noise multiplier {sigma_dp} must be >= 0")));
    }
    if batch_size.is_nan() || batch_size < 1.0 {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} must be >= 1")));
    }
    let token = frequencies
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 && p <= 1.0 {
                Ok(sigma_dp / (batch_size * p))
            } else {
                Err(Error::InvalidArgument(format!(
                    "token {} has frequency {p}, outside (0, 1]",
                    i + 1
                )))
            }
        })
        .collect::<Result<_>>()?;
    Ok(EffectiveError {
        token,
        weight: sigma_dp / batch_size,
    })
}

/// Mean array with one isotropic variance for the whole tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments<T> {
    pub mean: Array<T>,
    pub variance: T,
}

impl<T: Scalar> GaussianMoments<T> {
    pub fn new(mean: Array<T>, variance: T) -> Result<Self> {
        if variance.is_nan() || variance < T::zero() {
            return Err(Error::InvalidArgument(format!(
                "variance {} must be non-negative",
                variance.as_f64()
            )));
        }
        Ok(GaussianMoments { mean, variance })
    }

    pub fn scalar(mean: T, variance: T) -> Result<Self> {
        Self::new(Array::filled(&[1], mean), variance)
    }

    /// `(rows, cols)` treating a vector as one row.
    fn matrix_dims(&self) -> (usize, usize) {
        match self.mean.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap_or(&1);
                (self.mean.len() / c.max(1), c)
            }
        }
    }
}

/// Variance of one output unit of `x·W`, summing over the fan-in and
/// reducing squared means to their mean square:
/// `d_in·vx·vW + vW·‖x‖² + vx·‖W‖²_F/d_out`.
pub(crate) fn linear_row_variance<T: Scalar>(x_sq: T, vx: T, w_sq: T, d_in: usize, d_out: usize, vw: T) -> T {
    T::of(d_in as f64) * vx * vw + vw * x_sq + vx * w_sq / T::of(d_out as f64)
}

/// Moments of `x·W` with independent `x` and `W`.
pub fn propagate_linear<T: Scalar>(x: &GaussianMoments<T>, w: &GaussianMoments<T>) -> Result<GaussianMoments<T>> {
    let (n, d_in) = x.matrix_dims();
    let ws = w.mean.shape();
    if ws.len() != 2 || ws[0] != d_in {
        return Err(Error::Shape(format!(
            "cannot multiply {:?} by {ws:?}",
            x.mean.shape()
        )));
    }
    let d_out = ws[1];
    let mut mean = vec![T::zero(); n * d_out];
    kernels::matmul(x.mean.data(), w.mean.data(), &mut mean, n, d_in, d_out);
    let x_sq = x.mean.sum_sq() / T::of(n as f64);
    let var = linear_row_variance(x_sq, x.variance, w.mean.sum_sq(), d_in, d_out, w.variance);
    let shape: Vec<usize> = if x.mean.shape().len() == 1 { vec![d_out] } else { vec![n, d_out] };
    GaussianMoments::new(Array::from_vec(&shape, mean)?, var)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// First two moments of `max(X1, X2)` for independent Gaussians given by
/// means and variances.
pub fn max_moments(mu1: f64, var1: f64, mu2: f64, var2: f64) -> (f64, f64) {
    let nu = (var1 + var2).sqrt();
    if nu == 0.0 {
        let z = mu1.max(mu2);
        return (z, z * z);
    }
    let g = (mu1 - mu2) / nu;
    let (cdf, cdf_neg, pdf) = (std_normal_cdf(g), std_normal_cdf(-g), std_normal_pdf(g));
    let ez = mu1 * cdf + mu2 * cdf_neg + nu * pdf;
    let ez2 = (mu1 * mu1 + var1) * cdf + (mu2 * mu2 + var2) * cdf_neg + (mu1 + mu2) * nu * pdf;
    (ez, ez2)
}

/// Mean and variance of `max(X, 0)` for `X ~ N(mu, var)`.
pub fn relu_moments(mu: f64, var: f64) -> (f64, f64) {
    let (ez, ez2) = max_moments(mu, var, 0.0, 0.0);
    (ez, (ez2 - ez * ez).max(0.0))
}

/// Element-wise ReLU moments; the output variance is the mean of the
/// per-element variances.
pub fn propagate_relu<T: Scalar>(x: &GaussianMoments<T>) -> Result<GaussianMoments<T>> {
    let v = x.variance.as_f64();
    let mut var_sum = 0.0;
    let mean: Vec<T> = x
        .mean
        .data()
        .iter()
        .map(|&m| {
            let (ez, vz) = relu_moments(m.as_f64(), v);
            var_sum += vz;
            T::of(ez)
        })
        .collect();
    let n = mean.len().max(1) as f64;
    GaussianMoments::new(Array::from_vec(x.mean.shape(), mean)?, T::of(var_sum / n))
}

/// GELU is approximated by the ReLU closed form, including the
/// deterministic limit `max(μ, 0)` at zero variance.
pub fn propagate_gelu<T: Scalar>(x: &GaussianMoments<T>) -> Result<GaussianMoments<T>> {
    propagate_relu(x)
}

/// Sum of independent tensors.
pub fn propagate_residual<T: Scalar>(a: &GaussianMoments<T>, b: &GaussianMoments<T>) -> Result<GaussianMoments<T>> {
    if a.mean.shape() != b.mean.shape() {
        return Err(Error::Shape(format!(
            "residual of {:?} and {:?}",
            a.mean.shape(),
            b.mean.shape()
        )));
    }
    let mut mean = a.mean.clone();
    mean.axpy(T::one(), &b.mean)?;
    GaussianMoments::new(mean, a.variance + b.variance)
}

/// Variance after layernorm of one row, first order in the input noise:
/// the normalized value has variance `vx/s²` (with `s` the row's standard
/// deviation on the mean path) and is then multiplied by a noisy gain and
/// shifted by a noisy bias.
pub(crate) fn layernorm_row_variance<T: Scalar>(normalized: &[T], inv_std: T, vx: T, gain: &[T], vg: T, vb: T) -> T {
    let d = T::of(normalized.len() as f64);
    let vn = vx * inv_std * inv_std;
    let ms_n = kernels::dot(normalized, normalized) / d;
    let ms_g = kernels::dot(gain, gain) / d;
    vn * vg + ms_n * vg + ms_g * vn + vb
}

/// Layernorm over the last axis with noisy gain and bias; the output
/// variance is averaged over rows.
pub fn propagate_layernorm<T: Scalar>(
    x: &GaussianMoments<T>,
    gain: &GaussianMoments<T>,
    bias: &GaussianMoments<T>,
    eps: f64,
) -> Result<GaussianMoments<T>> {
    let (n, d) = x.matrix_dims();
    if gain.mean.len() != d || bias.mean.len() != d {
        return Err(Error::Shape("layernorm affine parameters do not match width".into()));
    }
    let mut normalized = vec![T::zero(); n * d];
    let mut out = vec![T::zero(); n * d];
    let mut var = T::zero();
    for r in 0..n {
        let inv = crate::transformer::layer_norm_row(
            &x.mean.data()[r * d..(r + 1) * d],
            gain.mean.data(),
            bias.mean.data(),
            T::of(eps),
            &mut normalized[r * d..(r + 1) * d],
            &mut out[r * d..(r + 1) * d],
        );
        var = var
            + layernorm_row_variance(
                &normalized[r * d..(r + 1) * d],
                inv,
                x.variance,
                gain.mean.data(),
                gain.variance,
                bias.variance,
            );
    }
    GaussianMoments::new(Array::from_vec(x.mean.shape(), out)?, var / T::of(n as f64))
}

fn ln_variances<T: Scalar>(ln: &LnCache<T>, var: &[T], gain: &[T], vw: T, d: usize) -> Vec<T> {
    (0..var.len())
        .map(|r| {
            layernorm_row_variance(&ln.normalized[r * d..(r + 1) * d], ln.inv_std[r], var[r], gain, vw, vw)
        })
        .collect()
}

fn linear_variances<T: Scalar>(x: &[T], var: &[T], w: &Array<T>, vw: T) -> Vec<T> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let w_sq = w.sum_sq();
    (0..var.len())
        .map(|r| {
            let row = &x[r * d_in..(r + 1) * d_in];
            linear_row_variance(kernels::dot(row, row), var[r], w_sq, d_in, d_out, vw)
        })
        .collect()
}

/// Propagates per-position variances of the residual stream through one
/// block, using the cached mean path.
fn block_variances<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    bi: usize,
    var_x: &[T],
    vw: T,
) -> Vec<T> {
    let cfg = &params.config;
    let (l, d, h, dff) = (cache.seq_len, cfg.d_model, cfg.n_heads, cfg.d_ff);
    let bp = &params.blocks[bi];
    let bc = &cache.blocks[bi];
    let var_u1 = ln_variances(&bc.ln1, var_x, bp.ln1.gain.data(), vw, d);
    let var_v = linear_variances(&bc.u1, &var_u1, &bp.w_v, vw);
    let rows = var_x.len();
    let mut var_z = vec![T::zero(); rows];
    for (r, vz) in var_z.iter_mut().enumerate() {
        let (b, t) = (r / l, r % l);
        let mut acc = T::zero();
        for hh in 0..h {
            let base = ((b * h + hh) * l + t) * l;
            for j in 0..=t {
                let a = bc.probs[base + j];
                acc = acc + a * a * var_v[b * l + j];
            }
        }
        *vz = acc / T::of(h as f64);
    }
    let var_o = linear_variances(&bc.z, &var_z, &bp.w_o, vw);
    let var_mid: Vec<T> = var_x.iter().zip(&var_o).map(|(&a, &b)| a + b).collect();
    let var_u2 = ln_variances(&bc.ln2, &var_mid, bp.ln2.gain.data(), vw, d);
    let var_pre: Vec<T> = linear_variances(&bc.u2, &var_u2, &bp.w_1, vw)
        .into_iter()
        .map(|v| v + vw)
        .collect();
    let var_act: Vec<T> = (0..rows)
        .map(|r| {
            let pre = &bc.pre_act[r * dff..(r + 1) * dff];
            let v = var_pre[r].as_f64();
            let s: f64 = pre.iter().map(|&m| relu_moments(m.as_f64(), v).1).sum();
            T::of(s / dff as f64)
        })
        .collect();
    let var_y: Vec<T> = linear_variances(&bc.act, &var_act, &bp.w_2, vw)
        .into_iter()
        .map(|v| v + vw)
        .collect();
    var_mid.iter().zip(&var_y).map(|(&a, &b)| a + b).collect()
}

/// Per-block key variances `σ_i²` (`B×L` each) for a batch.
///
/// The embedding at each position starts with variance
/// `σ_eff(token)² + σ_eff(W)²` (token row plus positional row), and is
/// carried through layernorm, the linear maps, attention mixing, the
/// activation and the residual sums on the eval-mode mean path. Each
/// block's correction is applied to the mean path before later blocks are
/// evaluated. Padding positions get zero.
pub fn key_variances<T: Scalar>(
    params: &ModelParams<T>,
    errors: &EffectiveError,
    batch: &SequenceBatch,
    renormalize: bool,
) -> Result<Vec<Vec<T>>> {
    let cfg = &params.config;
    if errors.token.len() != cfg.vocab_size {
        return Err(Error::Shape(format!(
            "{} token errors for vocabulary {}",
            errors.token.len(),
            cfg.vocab_size
        )));
    }
    let rows = batch.batch_size * batch.seq_len;
    let vw = T::of(errors.weight * errors.weight);
    let var0: Vec<T> = batch
        .token_ids
        .iter()
        .map(|&t| {
            if t == PAD || t > cfg.vocab_size {
                T::zero()
            } else {
                T::of(errors.token[t - 1] * errors.token[t - 1]) + vw
            }
        })
        .collect();
    let mut correction = AttentionCorrection {
        key_variances: vec![vec![T::zero(); rows]; cfg.n_blocks],
        renormalize,
    };
    let d = cfg.d_model;
    for bi in 0..cfg.n_blocks {
        // Blocks before `bi` already carry their corrections.
        let cache = forward_prefix(params, batch, Some(&correction), bi)?;
        let mut var_x = var0.clone();
        for prev in 0..bi {
            var_x = block_variances(params, &cache, prev, &var_x, vw);
        }
        let bp = &params.blocks[bi];
        let (ln1, u1) = layer_norm(&cache.x_final, rows, d, &bp.ln1.gain, &bp.ln1.bias, T::of(cfg.ln_eps));
        let var_u1 = ln_variances(&ln1, &var_x, bp.ln1.gain.data(), vw, d);
        let mut var_k = linear_variances(&u1, &var_u1, &bp.w_k, vw);
        for (v, &t) in var_k.iter_mut().zip(&batch.token_ids) {
            if t == PAD {
                *v = T::zero();
            }
        }
        correction.key_variances[bi] = var_k;
    }
    Ok(correction.key_variances)
}

/// Key variances packaged as a forward-pass correction.
pub fn attention_correction<T: Scalar>(
    params: &ModelParams<T>,
    errors: &EffectiveError,
    batch: &SequenceBatch,
    renormalize: bool,
) -> Result<AttentionCorrection<T>> {
    Ok(AttentionCorrection {
        key_variances: key_variances(params, errors, batch, renormalize)?,
        renormalize,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reattended {
    pub scores: Vec<f64>,
    /// Number of exponents clamped at [`MAX_CORRECTION_EXPONENT`].
    pub clamped: usize,
}

/// Divides each score by `exp(⟨q,q⟩·σ_i²/2)` and, with `renormalize`,
/// rescales the row to sum to one. Zero (masked) scores stay zero.
pub fn reattend(scores: &[f64], q: &[f64], sigma_sq: &[f64], renormalize: bool) -> Result<Reattended> {
    if scores.len() != sigma_sq.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} variances",
            scores.len(),
            sigma_sq.len()
        )));
    }
    if scores.iter().chain(q).chain(sigma_sq).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("re-attention input"));
    }
    let c = kernels::dot(q, q);
    let mut clamped = 0;
    let mut out: Vec<f64> = scores
        .iter()
        .zip(sigma_sq)
        .map(|(&s, &v)| {
            let mut e = c * v / 2.0;
            if e > MAX_CORRECTION_EXPONENT {
                e = MAX_CORRECTION_EXPONENT;
                clamped += 1;
            }
            s / e.exp()
        })
        .collect();
    if renormalize {
        let z: f64 = out.iter().sum();
        if z > 0.0 {
            out.iter_mut().for_each(|x| *x /= z);
        }
    }
    Ok(Reattended {
        scores: out,
        clamped,
    })
}

/// Monte-Carlo mean of `softmax(⟨q, K_j⟩)` with `K_j ~ N(k_j, σ_j² I)`.
/// Returns the per-key means and their standard errors.
pub fn distraction_monte_carlo(
    q: &[f64],
    key_means: &Array<f64>,
    key_variances: &[f64],
    n_samples: usize,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = key_means.shape();
    if s.len() != 2 || s[1] != q.len() || s[0] != key_variances.len() {
        return Err(Error::Shape(format!(
            "keys {s:?}, query {}, variances {}",
            q.len(),
            key_variances.len()
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if key_variances.iter().any(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::InvalidArgument("key variances must be non-negative".into()));
    }
    let l = s[0];
    let base: Vec<f64> = (0..l).map(|j| kernels::dot(q, key_means.row(j))).collect();
    let qn = kernels::dot(q, q).sqrt();
    let mut sum = vec![0.0; l];
    let mut sum_sq = vec![0.0; l];
    let mut logits = vec![0.0; l];
    let mut shift: Vec<f64> = Vec::new();
    for _ in 0..n_samples {
        // ⟨q, K_j⟩ = ⟨q, k_j⟩ + ‖q‖·σ_j·z exactly in distribution.
        for j in 0..l {
            logits[j] = if key_variances[j] > 0.0 {
                base[j] + qn * key_variances[j].sqrt() * rng.normal()
            } else {
                base[j]
            };
        }
        let p = stable_softmax(&logits)?;
        // Moments are accumulated around the first draw for stability.
        if shift.is_empty() {
            shift = p.clone();
        }
        for j in 0..l {
            let dev = p[j] - shift[j];
            sum[j] += dev;
            sum_sq[j] += dev * dev;
        }
    }
    let n = n_samples as f64;
    let mean: Vec<f64> = (0..l).map(|j| shift[j] + sum[j] / n).collect();
    let se = (0..l)
        .map(|j| {
            let m = sum[j] / n;
            let var = (sum_sq[j] / n - m * m).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    Ok((mean, se))
}

/// One row of a distraction sweep: both tail keys carry variance `sigma_sq`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractionRow {
    pub sigma_sq: f64,
    pub noiseless: Vec<f64>,
    pub monte_carlo: Vec<f64>,
    pub monte_carlo_se: Vec<f64>,
    pub reattended: Vec<f64>,
    /// `exp(⟨q,q⟩·σ²/2)`
    pub predicted_inflation: f64,
    /// Monte-Carlo over noiseless score of the first tail key.
    pub observed_inflation: f64,
}

/// A query in `R^8` with `⟨q,q⟩ = 2`, two low-variance keys scoring 3 and
/// two tail keys scoring -1. Returns `(q, keys, tail indices)`.
pub fn distraction_setup() -> (Vec<f64>, Array<f64>, [usize; 2]) {
    let q = vec![0.5; 8];
    let mut keys = Vec::with_capacity(32);
    for (j, scale) in [1.5, 1.5, -0.5, -0.5].into_iter().enumerate() {
        // The orthogonal offset leaves ⟨q, k⟩ unchanged.
        let sign = if j % 2 == 0 { 0.3 } else { -0.3 };
        keys.extend((0..8).map(|c| scale * q[c] + if c < 4 { sign } else { -sign }));
    }
    (q, Array::from_vec(&[4, 8], keys).expect("4x8"), [2, 3])
}

pub fn distraction_sweep(sigma_sq: &[f64], n_samples: usize, seed: u64) -> Result<Vec<DistractionRow>> {
    let (q, keys, tail) = distraction_setup();
    let base: Vec<f64> = (0..4).map(|j| kernels::dot(&q, keys.row(j))).collect();
    let noiseless = stable_softmax(&base)?;
    let c = kernels::dot(&q, &q);
    let mut rng = Rng::new(seed, crate::numkit::Stream::MonteCarlo);
    sigma_sq
        .iter()
        .map(|&s2| {
            let mut var = vec![0.0; 4];
            for &t in &tail {
                var[t] = s2;
            }
            let (mc, se) = distraction_monte_carlo(&q, &keys, &var, n_samples, &mut rng)?;
            let re = reattend(&mc, &q, &var, true)?;
            Ok(DistractionRow {
                sigma_sq: s2,
                predicted_inflation: (c * s2 / 2.0).exp(),
                observed_inflation: mc[tail[0]] / noiseless[tail[0]],
                noiseless: noiseless.clone(),
                monte_carlo: mc,
                monte_carlo_se: se,
                reattended: re.scores,
            })
        })
        .collect()
}

/// Whether the activation is handled by the shared ReLU closed form.
pub fn uses_relu_closed_form(act: Activation) -> bool {
    matches!(act, Activation::Gelu | Activation::Relu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;
    use crate::transformer::{init_params, ModelConfig};

    fn mc_relu_var(mu: f64, std: f64, n: usize, rng: &mut Rng) -> f64 {
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = (mu + std * rng.normal()).max(0.0);
            s += z;
            s2 += z * z;
        }
        let m = s / n as f64;
        s2 / n as f64 - m * m
    }

    #[test]
    fn effective_error_examples() {
        let e = effective_errors(1.0, 512.0, &[1.0, 0.01]).unwrap();
        assert!((e.token[0] - 1.0 / 512.0).abs() < 1e-15);
        assert!((e.token[1] - 1.0 / 5.12).abs() < 1e-12);
        assert_eq!(e.weight, 1.0 / 512.0);
        assert!(effective_errors(1.0, 512.0, &[0.0]).is_err());
        let e = effective_errors(2.0, 8.0, &[0.5, 0.1, 0.9]).unwrap();
        assert!(e.token[1] > e.token[0] && e.token[0] > e.token[2]);
    }

    #[test]
    fn linear_examples() {
        let z = |v: f64| GaussianMoments::new(Array::filled(&[1, 1], 0.0), v).unwrap();
        let out = propagate_linear(&z(0.0), &z(0.0)).unwrap();
        assert_eq!(out.variance, 0.0);
        // Only the Var·Var term survives for zero means and unit fan-in.
        assert_eq!(propagate_linear(&z(1.0), &z(1.0)).unwrap().variance, 1.0);
        let x = GaussianMoments::new(Array::filled(&[1, 1], 2.0f64), 0.25).unwrap();
        let w = GaussianMoments::new(Array::filled(&[1, 1], 3.0f64), 0.04).unwrap();
        let out = propagate_linear(&x, &w).unwrap();
        assert!((out.variance - 2.42).abs() < 1e-12);
        assert_eq!(out.mean.data(), &[6.0]);
        assert!(GaussianMoments::scalar(0.0, -1.0).is_err());
    }

    #[test]
    fn relu_table_values() {
        for (std, expect) in [(0.01, 3.40e-5), (0.1, 0.0034), (1.0, 0.3408)] {
            let (_, v) = relu_moments(0.0, std * std);
            let rel = (v - expect).abs() / expect;
            assert!(rel < 5e-3, "{std}: {v}");
        }
        let x = GaussianMoments::scalar(0.0f64, 1.0).unwrap();
        assert!((propagate_relu(&x).unwrap().variance - 0.3408).abs() < 1e-4);
    }

    #[test]
    fn relu_limits() {
        let (m, v) = relu_moments(50.0, 0.3);
        assert!((m - 50.0).abs() < 1e-12 && (v - 0.3).abs() < 1e-9);
        assert_eq!(relu_moments(-2.0, 0.0), (0.0, 0.0));
        assert_eq!(relu_moments(1.5, 0.0), (1.5, 0.0));
        let g = propagate_gelu(&GaussianMoments::scalar(0.7, 0.0).unwrap()).unwrap();
        assert_eq!(g.mean.data(), &[0.7]);
    }

    #[test]
    fn gelu_shares_relu_form_within_five_percent() {
        let mut rng = Rng::new(3, Stream::MonteCarlo);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let g = crate::transformer::gelu(rng.normal());
            s += g;
            s2 += g * g;
        }
        let m = s / n as f64;
        let sampled = s2 / n as f64 - m * m;
        let analytic = relu_moments(0.0, 1.0).1;
        assert!((analytic - sampled).abs() / sampled < 0.05, "{sampled}");
    }

    #[test]
    fn relu_matches_monte_carlo() {
        let mut rng = Rng::new(4, Stream::MonteCarlo);
        for (mu, std) in [(0.3, 0.5), (-1.0, 2.0), (2.0, 0.7)] {
            let mc = mc_relu_var(mu, std, 1_000_000, &mut rng);
            let (_, v) = relu_moments(mu, std * std);
            assert!((mc - v).abs() / v < 0.02, "{mu} {std}: {mc} vs {v}");
        }
    }

    #[test]
    fn residual_examples() {
        let a = GaussianMoments::scalar(1.0, 1.0).unwrap();
        let b = GaussianMoments::scalar(2.0, 2.0).unwrap();
        let c = propagate_residual(&a, &b).unwrap();
        assert_eq!((c.mean.data()[0], c.variance), (3.0, 3.0));
        let z = GaussianMoments::scalar(0.0, 0.0).unwrap();
        assert_eq!(propagate_residual(&z, &z).unwrap().variance, 0.0);
        let wide = GaussianMoments::new(Array::zeros(&[2]), 0.0).unwrap();
        assert!(propagate_residual(&z, &wide).is_err());
    }

    #[test]
    fn reattend_examples() {
        let q = [1.0, 1.0];
        let out = reattend(&[0.5, 0.5], &q, &[0.0, 1.0], true).unwrap();
        let e = std::f64::consts::E;
        assert!((out.scores[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((out.scores[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        let row = [0.2, 0.0, 0.5, 0.3];
        assert_eq!(reattend(&row, &q, &[0.0; 4], true).unwrap().scores, row.to_vec());
        let same = reattend(&row, &q, &[0.7; 4], true).unwrap().scores;
        for (a, b) in same.iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
        let big = reattend(&[0.5, 0.5], &[10.0], &[0.0, 10.0], true).unwrap();
        assert_eq!(big.clamped, 1);
        assert!(reattend(&[f64::NAN], &q, &[0.0], true).is_err());
    }

    #[test]
    fn larger_variance_lowers_share() {
        let row = [0.25, 0.25, 0.5];
        let mut last = 1.0;
        for v in [0.0, 0.1, 0.5, 1.0] {
            let s = reattend(&row, &[1.0], &[0.0, v, 0.0], true).unwrap().scores[1];
            assert!(s < last || v == 0.0);
            last = s;
        }
    }

    #[test]
    fn deterministic_monte_carlo_equals_softmax() {
        let keys = Array::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let q = [0.3, -0.2];
        let (m, se) = distraction_monte_carlo(&q, &keys, &[0.0; 3], 10, &mut Rng::new(1, Stream::MonteCarlo)).unwrap();
        let base: Vec<f64> = (0..3).map(|j| kernels::dot(&q, keys.row(j))).collect();
        let exact = stable_softmax(&base).unwrap();
        for j in 0..3 {
            assert!((m[j] - exact[j]).abs() < 1e-15);
            assert!(se[j] < 1e-9);
        }
    }

    #[test]
    fn sweep_setup_scores() {
        let (q, keys, _) = distraction_setup();
        let s: Vec<f64> = (0..4).map(|j| kernels::dot(&q, keys.row(j))).collect();
        for (a, b) in s.iter().zip([3.0, 3.0, -1.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let rows = distraction_sweep(&[0.0, 0.4], 20_000, 1).unwrap();
        assert!((rows[0].observed_inflation - 1.0).abs() < 1e-12);
        assert!(rows[1].observed_inflation > 1.2);
    }

    fn tiny() -> (ModelParams<f64>, SequenceBatch) {
        let mut cfg = ModelConfig::new(6, 4);
        cfg.d_model = 8;
        cfg.d_ff = 8;
        let p = init_params(&cfg, &mut Rng::new(2, Stream::Init)).unwrap();
        let b = SequenceBatch::from_sequences(&[&[1, 2, 6, 3, 1], &[5, 6]], vec![0, 1], 4);
        (p, b)
    }

    #[test]
    fn zero_noise_gives_zero_key_variances() {
        let (p, b) = tiny();
        let v = key_variances(&p, &EffectiveError::zero(6), &b, true).unwrap();
        assert!(v.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn rarer_token_gets_larger_key_variance() {
        let (p, _) = tiny();
        // Same position, tokens 1 (common) and 6 (rare), one-token sequences.
        let b = SequenceBatch::for_inference(&[&[1], &[6]], vec![0, 1], 4);
        let mut freq = vec![0.5; 6];
        freq[5] = 0.005;
        let e = effective_errors(1.0, 16.0, &freq).unwrap();
        let v = key_variances(&p, &e, &b, true).unwrap();
        for blk in &v {
            assert!(blk[7] > blk[3], "{blk:?}");
        }
    }

    #[test]
    fn first_block_matches_hand_composition() {
        let (p, b) = tiny();
        let e = effective_errors(0.5, 4.0, &[0.3, 0.2, 0.1, 0.1, 0.2, 0.1]).unwrap();
        let v = key_variances(&p, &e, &b, true).unwrap();
        let vw = e.weight * e.weight;
        let blk = &p.blocks[0];
        // Last position of sample 0 holds token 3.
        let r = 3;
        let tok = b.token_ids[r];
        let x = GaussianMoments::new(
            Array::from_vec(&[1, 8], {
                let mut row = p.token_embedding.row(tok - 1).to_vec();
                kernels::axpy(1.0, p.positional.row(3), &mut row);
                row
            })
            .unwrap(),
            e.token[tok - 1].powi(2) + vw,
        )
        .unwrap();
        let g = GaussianMoments::new(blk.ln1.gain.clone(), vw).unwrap();
        let bb = GaussianMoments::new(blk.ln1.bias.clone(), vw).unwrap();
        let u = propagate_layernorm(&x, &g, &bb, p.config.ln_eps).unwrap();
        let k = propagate_linear(&u, &GaussianMoments::new(blk.w_k.clone(), vw).unwrap()).unwrap();
        assert!((v[0][r] - k.variance).abs() < 1e-12 * k.variance);
    }
}
