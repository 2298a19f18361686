use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numkit::{kernels, Array, Rng};
use crate::scalar::Scalar;
use crate::seqdata::{SequenceBatch, PAD};

use super::{Activation, ModelParams};

/// Correction exponents above this value are clamped.
pub const MAX_CORRECTION_EXPONENT: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-key variances used to debias attention rows in the forward pass.
///
/// For block `k`, `key_variances[k][b * L + j]` is the per-coordinate
/// variance of the key at position `j` of sample `b`. With `renormalize`
/// the corrected row is `softmax(s_j - c_j)`, which equals dividing each
/// probability by `exp(c_j)` and renormalizing; without it the
/// probabilities are only divided. The correction is a constant in backprop.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCorrection<T> {
    pub key_variances: Vec<Vec<T>>,
    pub renormalize: bool,
}

impl<T: Scalar> AttentionCorrection<T> {
    pub fn select(&self, rows: &[usize], seq_len: usize) -> Self {
        AttentionCorrection {
            key_variances: self
                .key_variances
                .iter()
                .map(|v| {
                    rows.iter()
                        .flat_map(|&r| v[r * seq_len..(r + 1) * seq_len].iter().copied())
                        .collect()
                })
                .collect(),
            renormalize: self.renormalize,
        }
    }
}

/// Inverted-dropout masks (entries are 0 or `1/(1-p)`), one per block.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks<T> {
    /// `B×H×L×L` per block.
    pub attn: Vec<Option<Vec<T>>>,
    /// `B×L×d_ff` per block.
    pub ffn: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> DropoutMasks<T> {
    pub fn none(n_blocks: usize) -> Self {
        DropoutMasks {
            attn: vec![None; n_blocks],
            ffn: vec![None; n_blocks],
        }
    }

    /// Masks of the listed samples; `per_sample` sizes are inferred from `batch`.
    pub fn select(&self, rows: &[usize], batch: usize) -> Self {
        let pick = |m: &Option<Vec<T>>| {
            m.as_ref().map(|v| {
                let stride = v.len() / batch;
                rows.iter()
                    .flat_map(|&r| v[r * stride..(r + 1) * stride].iter().copied())
                    .collect()
            })
        };
        DropoutMasks {
            attn: self.attn.iter().map(pick).collect(),
            ffn: self.ffn.iter().map(pick).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LnCache<T> {
    /// `(x - mean) / std`, same layout as the input.
    pub normalized: Vec<T>,
    /// One entry per row.
    pub inv_std: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCache<T> {
    pub ln1: LnCache<T>,
    pub u1: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Attention probabilities after correction, before dropout; `B×H×L×L`.
    pub probs: Vec<T>,
    /// Probabilities actually used for value weighting (after dropout).
    pub probs_used: Vec<T>,
    /// Multiplicative factors of an unrenormalized correction.
    pub correction_factors: Option<Vec<T>>,
    pub z: Vec<T>,
    pub x_mid: Vec<T>,
    pub ln2: LnCache<T>,
    pub u2: Vec<T>,
    pub pre_act: Vec<T>,
    pub act: Vec<T>,
    pub act_used: Vec<T>,
}

/// Everything backprop needs from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache<T> {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub x0: Vec<T>,
    pub blocks: Vec<BlockCache<T>>,
    /// Residual stream entering the final layernorm.
    pub x_final: Vec<T>,
    pub final_ln: LnCache<T>,
    /// Final hidden states `h`; logits are `h·Eᵀ`.
    pub hidden: Vec<T>,
    pub masks: DropoutMasks<T>,
    /// Number of clamped correction exponents.
    pub clamped: usize,
}

enum MaskSource<'a, T> {
    Off,
    Sample(&'a mut Rng, f64),
    Replay(&'a DropoutMasks<T>),
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn activate<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Gelu => gelu(x),
        Activation::Relu => x.max(T::zero()),
    }
}

pub(crate) fn activate_grad<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Gelu => gelu_grad(x),
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

/// Layernorm of one row; writes normalized and affine outputs, returns `1/std`.
pub(crate) fn layer_norm_row<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    normalized: &mut [T],
    out: &mut [T],
) -> T {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        normalized[i] = (x[i] - mean) * inv;
        out[i] = normalized[i] * gain[i] + bias[i];
    }
    inv
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    rows: usize,
    d: usize,
    gain: &Array<T>,
    bias: &Array<T>,
    eps: T,
) -> (LnCache<T>, Vec<T>) {
    let mut normalized = vec![T::zero(); rows * d];
    let mut out = vec![T::zero(); rows * d];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        inv_std[r] = layer_norm_row(
            &x[r * d..(r + 1) * d],
            gain.data(),
            bias.data(),
            eps,
            &mut normalized[r * d..(r + 1) * d],
            &mut out[r * d..(r + 1) * d],
        );
    }
    (LnCache { normalized, inv_std }, out)
}

fn draw_mask<T: Scalar>(n: usize, p: f64, rng: &mut Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub(crate) fn validate_batch<T: Scalar>(params: &ModelParams<T>, batch: &SequenceBatch) -> Result<()> {
    let cfg = &params.config;
    if batch.seq_len != cfg.max_len {
        return Err(Error::Shape(format!(
            "batch length {} but model length {}",
            batch.seq_len, cfg.max_len
        )));
    }
    if batch.token_ids.len() != batch.batch_size * batch.seq_len
        || batch.targets.len() != batch.token_ids.len()
    {
        return Err(Error::Shape("batch buffers disagree with B×L".into()));
    }
    for &t in batch.token_ids.iter().chain(&batch.targets) {
        if t > cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// Forward pass. Dropout is active only in [`Mode::Train`], with masks
/// drawn from `rng` and stored in the cache.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &SequenceBatch,
    mode: Mode,
    correction: Option<&AttentionCorrection<T>>,
    rng: &mut Rng,
) -> Result<(Array<T>, ForwardCache<T>)> {
    let p = params.config.dropout;
    let src = match mode {
        Mode::Train if p > 0.0 => MaskSource::Sample(rng, p),
        _ => MaskSource::Off,
    };
    let (logits, cache) = forward_impl(params, batch, src, correction, true, params.blocks.len())?;
    Ok((logits.expect("logits requested"), cache))
}

/// Eval-mode forward pass that stops at the final hidden states.
pub fn forward_hidden<T: Scalar>(
    params: &ModelParams<T>,
    batch: &SequenceBatch,
    correction: Option<&AttentionCorrection<T>>,
) -> Result<ForwardCache<T>> {
    Ok(forward_impl(params, batch, MaskSource::Off, correction, false, params.blocks.len())?.1)
}

/// Eval-mode pass through the first `n_run` blocks only; `x_final` is the
/// residual stream entering block `n_run`, and `final_ln`/`hidden` are
/// left empty.
pub(crate) fn forward_prefix<T: Scalar>(
    params: &ModelParams<T>,
    batch: &SequenceBatch,
    correction: Option<&AttentionCorrection<T>>,
    n_run: usize,
) -> Result<ForwardCache<T>> {
    Ok(forward_impl(params, batch, MaskSource::Off, correction, false, n_run)?.1)
}

/// Forward pass reusing previously drawn dropout masks.
pub fn forward_replay<T: Scalar>(
    params: &ModelParams<T>,
    batch: &SequenceBatch,
    masks: &DropoutMasks<T>,
    correction: Option<&AttentionCorrection<T>>,
) -> Result<(Array<T>, ForwardCache<T>)> {
    let (logits, cache) = forward_impl(params, batch, MaskSource::Replay(masks), correction, true, params.blocks.len())?;
    Ok((logits.expect("logits requested"), cache))
}

fn forward_impl<T: Scalar>(
    params: &ModelParams<T>,
    batch: &SequenceBatch,
    mut masks_src: MaskSource<'_, T>,
    correction: Option<&AttentionCorrection<T>>,
    with_logits: bool,
    n_run: usize,
) -> Result<(Option<Array<T>>, ForwardCache<T>)> {
    validate_batch(params, batch)?;
    let cfg = &params.config;
    let (bsz, l, d, m) = (batch.batch_size, batch.seq_len, cfg.d_model, cfg.vocab_size);
    let (h, dh, dff) = (cfg.n_heads, cfg.head_dim(), cfg.d_ff);
    let rows = bsz * l;
    let eps = T::of(cfg.ln_eps);
    if let Some(c) = correction {
        if c.key_variances.len() != cfg.n_blocks
            || c.key_variances.iter().any(|v| v.len() != rows)
        {
            return Err(Error::Shape("attention correction does not match B×L".into()));
        }
    }
    if let MaskSource::Replay(mk) = &masks_src {
        if mk.attn.len() != cfg.n_blocks || mk.ffn.len() != cfg.n_blocks {
            return Err(Error::Shape("dropout masks do not match block count".into()));
        }
    }

    let tokens = batch.token_ids.clone();
    let mut x = vec![T::zero(); rows * d];
    for r in 0..rows {
        let tok = tokens[r];
        if tok == PAD {
            continue;
        }
        let t = r % l;
        let e = params.token_embedding.row(tok - 1);
        let pos = params.positional.row(t);
        for i in 0..d {
            x[r * d + i] = e[i] + pos[i];
        }
    }
    let x0 = x.clone();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    let mut used_masks = DropoutMasks::none(cfg.n_blocks);
    let mut clamped = 0usize;
    let max_c = T::of(MAX_CORRECTION_EXPONENT);

    for (bi, bp) in params.blocks.iter().enumerate().take(n_run) {
        let (ln1, u1) = layer_norm(&x, rows, d, &bp.ln1.gain, &bp.ln1.bias, eps);
        let mut q = vec![T::zero(); rows * d];
        let mut k = vec![T::zero(); rows * d];
        let mut v = vec![T::zero(); rows * d];
        kernels::matmul(&u1, bp.w_q.data(), &mut q, rows, d, d);
        kernels::matmul(&u1, bp.w_k.data(), &mut k, rows, d, d);
        kernels::matmul(&u1, bp.w_v.data(), &mut v, rows, d, d);

        let mut probs = vec![T::zero(); bsz * h * l * l];
        let mut factors = correction
            .filter(|c| !c.renormalize)
            .map(|_| vec![T::one(); bsz * h * l * l]);
        let mut scores = vec![T::zero(); l];
        for b in 0..bsz {
            for hh in 0..h {
                for t in 0..l {
                    let qrow = &q[(b * l + t) * d + hh * dh..(b * l + t) * d + (hh + 1) * dh];
                    let qsq = kernels::dot(qrow, qrow) * scale * scale;
                    let mut mx = T::neg_infinity();
                    let mut any = false;
                    for j in 0..=t {
                        if tokens[b * l + j] == PAD {
                            continue;
                        }
                        let krow = &k[(b * l + j) * d + hh * dh..(b * l + j) * d + (hh + 1) * dh];
                        let mut s = kernels::dot(qrow, krow) * scale;
                        if let Some(c) = correction {
                            let mut e = qsq * c.key_variances[bi][b * l + j] * T::of(0.5);
                            if e > max_c {
                                e = max_c;
                                clamped += 1;
                            }
                            if c.renormalize {
                                s = s - e;
                            } else if let Some(f) = factors.as_mut() {
                                f[((b * h + hh) * l + t) * l + j] = (-e).exp();
                            }
                        }
                        scores[j] = s;
                        mx = mx.max(s);
                        any = true;
                    }
                    if !any {
                        continue;
                    }
                    let row = &mut probs[((b * h + hh) * l + t) * l..((b * h + hh) * l + t + 1) * l];
                    let mut z = T::zero();
                    for j in 0..=t {
                        if tokens[b * l + j] != PAD {
                            row[j] = (scores[j] - mx).exp();
                            z = z + row[j];
                        }
                    }
                    for j in 0..=t {
                        row[j] = row[j] / z;
                    }
                    if let Some(f) = factors.as_ref() {
                        let frow = &f[((b * h + hh) * l + t) * l..((b * h + hh) * l + t + 1) * l];
                        for j in 0..=t {
                            row[j] = row[j] * frow[j];
                        }
                    }
                }
            }
        }

        let attn_mask = match &mut masks_src {
            MaskSource::Off => None,
            MaskSource::Sample(rng, p) => Some(draw_mask(probs.len(), *p, rng)),
            MaskSource::Replay(mk) => mk.attn[bi].clone(),
        };
        let probs_used = match &attn_mask {
            Some(mk) => probs.iter().zip(mk).map(|(&a, &b)| a * b).collect(),
            None => probs.clone(),
        };

        let mut z = vec![T::zero(); rows * d];
        for b in 0..bsz {
            for hh in 0..h {
                for t in 0..l {
                    let prow = &probs_used[((b * h + hh) * l + t) * l..((b * h + hh) * l + t + 1) * l];
                    let zrow = (b * l + t) * d + hh * dh;
                    for j in 0..=t {
                        let pj = prow[j];
                        if pj != T::zero() {
                            let vrow = (b * l + j) * d + hh * dh;
                            let (src, dst) = (&v[vrow..vrow + dh], &mut z[zrow..zrow + dh]);
                            kernels::axpy(pj, src, dst);
                        }
                    }
                }
            }
        }
        let mut x_mid = x.clone();
        kernels::matmul_acc(&z, bp.w_o.data(), &mut x_mid, rows, d, d);

        let (ln2, u2) = layer_norm(&x_mid, rows, d, &bp.ln2.gain, &bp.ln2.bias, eps);
        let mut pre_act = vec![T::zero(); rows * dff];
        for r in 0..rows {
            pre_act[r * dff..(r + 1) * dff].copy_from_slice(bp.b_1.data());
        }
        kernels::matmul_acc(&u2, bp.w_1.data(), &mut pre_act, rows, d, dff);
        let act: Vec<T> = pre_act.iter().map(|&a| activate(cfg.activation, a)).collect();
        let ffn_mask = match &mut masks_src {
            MaskSource::Off => None,
            MaskSource::Sample(rng, p) => Some(draw_mask(act.len(), *p, rng)),
            MaskSource::Replay(mk) => mk.ffn[bi].clone(),
        };
        let act_used: Vec<T> = match &ffn_mask {
            Some(mk) => act.iter().zip(mk).map(|(&a, &b)| a * b).collect(),
            None => act.clone(),
        };
        let mut x_out = x_mid.clone();
        for r in 0..rows {
            kernels::axpy(T::one(), bp.b_2.data(), &mut x_out[r * d..(r + 1) * d]);
        }
        kernels::matmul_acc(&act_used, bp.w_2.data(), &mut x_out, rows, dff, d);

        used_masks.attn[bi] = attn_mask;
        used_masks.ffn[bi] = ffn_mask;
        blocks.push(BlockCache {
            ln1,
            u1,
            q,
            k,
            v,
            probs,
            probs_used,
            correction_factors: factors,
            z,
            x_mid,
            ln2,
            u2,
            pre_act,
            act,
            act_used,
        });
        x = x_out;
    }

    let (final_ln, hidden) = if n_run < params.blocks.len() {
        (
            LnCache {
                normalized: Vec::new(),
                inv_std: Vec::new(),
            },
            Vec::new(),
        )
    } else {
        layer_norm(&x, rows, d, &params.final_ln.gain, &params.final_ln.bias, eps)
    };
    let out_w = params
        .output_embedding
        .as_ref()
        .unwrap_or(&params.token_embedding);
    let logits = if with_logits {
        let mut logits = vec![T::zero(); rows * m];
        kernels::matmul_nt(&hidden, out_w.data(), &mut logits, rows, d, m);
        Some(Array::from_vec(&[bsz, l, m], logits)?)
    } else {
        None
    };
    Ok((
        logits,
        ForwardCache {
            batch: bsz,
            seq_len: l,
            tokens,
            x0,
            blocks,
            x_final: x,
            final_ln,
            hidden,
            masks: used_masks,
            clamped,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;
    use crate::transformer::{init_params, ModelConfig};

    fn tiny(l: usize) -> ModelParams<f64> {
        let mut cfg = ModelConfig::new(12, l);
        cfg.d_model = 8;
        cfg.d_ff = 8;
        cfg.n_heads = 2;
        init_params(&cfg, &mut Rng::new(5, Stream::Init)).unwrap()
    }

    fn batch(rows: &[&[usize]], l: usize) -> SequenceBatch {
        SequenceBatch::from_sequences(rows, (0..rows.len()).collect(), l)
    }

    #[test]
    fn single_position_shape() {
        let p = tiny(1);
        let b = batch(&[&[3, 4]], 1);
        let (logits, _) = forward(&p, &b, Mode::Eval, None, &mut Rng::new(0, Stream::Dropout)).unwrap();
        assert_eq!(logits.shape(), &[1, 1, 12]);
    }

    #[test]
    fn causal_mask() {
        let p = tiny(6);
        let a = batch(&[&[1, 2, 3, 4, 5, 6, 7]], 6);
        let mut b = a.clone();
        b.token_ids[4] = 9;
        let mut rng = Rng::new(0, Stream::Dropout);
        let (la, _) = forward(&p, &a, Mode::Eval, None, &mut rng).unwrap();
        let (lb, _) = forward(&p, &b, Mode::Eval, None, &mut rng).unwrap();
        let m = 12;
        for t in 0..4 {
            assert_eq!(la.data()[t * m..(t + 1) * m], lb.data()[t * m..(t + 1) * m]);
        }
        assert_ne!(la.data()[4 * m..5 * m], lb.data()[4 * m..5 * m]);
    }

    #[test]
    fn eval_is_deterministic_and_train_replays() {
        let p = tiny(5);
        let b = batch(&[&[1, 2, 3], &[4, 5, 6, 7, 8, 9]], 5);
        let mut rng = Rng::new(0, Stream::Dropout);
        let (e1, _) = forward(&p, &b, Mode::Eval, None, &mut rng).unwrap();
        let (e2, _) = forward(&p, &b, Mode::Eval, None, &mut rng).unwrap();
        assert_eq!(e1, e2);
        let (t1, cache) = forward(&p, &b, Mode::Train, None, &mut rng).unwrap();
        assert_ne!(t1, e1);
        let (t2, cache2) = forward_replay(&p, &b, &cache.masks, None).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(cache, cache2);
    }

    #[test]
    fn out_of_range_token() {
        let p = tiny(3);
        let mut b = batch(&[&[1, 2, 3]], 3);
        b.token_ids[2] = 13;
        assert!(matches!(
            forward(&p, &b, Mode::Eval, None, &mut Rng::new(0, Stream::Dropout)),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_variance_correction_is_bit_identical() {
        let p = tiny(5);
        let b = batch(&[&[1, 2, 3], &[4, 5, 6, 7, 8, 9]], 5);
        for renormalize in [true, false] {
            let corr = AttentionCorrection {
                key_variances: vec![vec![0.0; 10]; 2],
                renormalize,
            };
            let (a, _) = forward(&p, &b, Mode::Eval, None, &mut Rng::new(0, Stream::Dropout)).unwrap();
            let (c, _) =
                forward(&p, &b, Mode::Eval, Some(&corr), &mut Rng::new(0, Stream::Dropout)).unwrap();
            assert_eq!(a, c);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
