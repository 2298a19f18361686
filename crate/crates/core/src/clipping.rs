//! Per-sample gradient norms and clipped batch gradients.
//!
//! Linear layers use ghost norms: for `y = x·W` with per-sample input `a`
//! (`T×d_in`) and output gradient `g` (`T×d_out`), the per-sample gradient
//! is `aᵀg` and its squared Frobenius norm is `⟨a aᵀ, g gᵀ⟩`, computed from
//! `T×T` quantities only.
//!
//! The shared embedding receives gradient `a_sᵀ∇e_s + ∇e_c` per sample,
//! where `a_s` are the one-hot rows of the input tokens. Its squared norm is
//!
//! ```text
//! ⟨a_s a_sᵀ, ∇e_s ∇e_sᵀ⟩ + ‖∇e_c‖² + 2·⟨∇e_s, a_s ∇e_c⟩
//! ```
//!
//! where `a_s a_sᵀ` is the `L×L` token-equality Gram matrix and `a_s ∇e_c`
//! gathers rows of `∇e_c` at the input tokens. No `M×M` or per-sample
//! `M×d` buffer is formed beyond `∇e_c` itself.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{kernels, Array, Rng, Stream};
use crate::scalar::Scalar;
use crate::seqdata::{SequenceBatch, PAD};
use crate::transformer::{
    backward, backward_tape, forward, forward_replay, init_params, loss_next_token, AttentionCorrection,
    DropoutMasks, GradTape, ModelConfig, ModelParams, Mode, ParamId, TapeEntry,
};

/// Squared per-group norms for each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleNorms<T> {
    pub groups: Vec<ParamId>,
    /// `B×G`, row per sample.
    pub squared: Vec<T>,
    /// `‖g_i‖` per sample.
    pub total: Vec<T>,
}

impl<T: Scalar> PerSampleNorms<T> {
    /// Builds the table from squared group norms given as `groups × B`.
    pub fn from_group_squares(groups: Vec<ParamId>, per_group: Vec<Vec<T>>) -> Self {
        let b = per_group.first().map_or(0, Vec::len);
        let g = groups.len();
        let mut squared = vec![T::zero(); b * g];
        for (k, col) in per_group.iter().enumerate() {
            for i in 0..b {
                squared[i * g + k] = col[i].max(T::zero());
            }
        }
        let total = (0..b)
            .map(|i| squared[i * g..(i + 1) * g].iter().copied().sum::<T>().sqrt())
            .collect();
        PerSampleNorms {
            groups,
            squared,
            total,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.total.len()
    }

    pub fn group_norm(&self, sample: usize, group: ParamId) -> Option<T> {
        let k = self.groups.iter().position(|&g| g == group)?;
        Some(self.squared[sample * self.groups.len() + k].sqrt())
    }
}

pub(crate) fn ghost_norm_slices<T: Scalar>(
    a: &[T],
    g: &[T],
    b: usize,
    t: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); b];
    for (i, o) in out.iter_mut().enumerate() {
        let ai = &a[i * t * d_in..(i + 1) * t * d_in];
        let gi = &g[i * t * d_out..(i + 1) * t * d_out];
        let mut acc = T::zero();
        for r in 0..t {
            let gr = &gi[r * d_out..(r + 1) * d_out];
            let ar = &ai[r * d_in..(r + 1) * d_in];
            let ggd = kernels::dot(gr, gr);
            if ggd != T::zero() {
                acc = acc + kernels::dot(ar, ar) * ggd;
            }
            for s in 0..r {
                let gs = &gi[s * d_out..(s + 1) * d_out];
                let gg = kernels::dot(gr, gs);
                if gg != T::zero() {
                    acc = acc + T::of(2.0) * kernels::dot(ar, &ai[s * d_in..(s + 1) * d_in]) * gg;
                }
            }
        }
        *o = acc.max(T::zero());
    }
    out
}

/// Squared per-sample norms `‖a_iᵀ g_i‖²_F` of a linear layer from its
/// inputs `a` (`B×T×d_in`) and output gradients `g` (`B×T×d_out`).
pub fn ghost_norm_linear<T: Scalar>(a: &Array<T>, g: &Array<T>) -> Result<Vec<T>> {
    let (sa, sg) = (a.shape(), g.shape());
    if sa.len() != 3 || sg.len() != 3 || sa[0] != sg[0] || sa[1] != sg[1] {
        return Err(Error::Shape(format!("ghost norm inputs {sa:?} and {sg:?}")));
    }
    Ok(ghost_norm_slices(a.data(), g.data(), sa[0], sa[1], sa[2], sg[2]))
}

/// Which terms of the embedding identity to include.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum EmbeddingBranches {
    Both,
    InputOnly,
    OutputOnly,
}

pub(crate) fn phantom_slices<T: Scalar>(
    tokens: &[usize],
    grad_e_s: &[T],
    grad_e_c: &[T],
    b: usize,
    l: usize,
    m: usize,
    d: usize,
    branches: EmbeddingBranches,
) -> Result<Vec<T>> {
    if let Some(&bad) = tokens.iter().find(|&&t| t > m) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab_size: m,
        });
    }
    let use_in = branches != EmbeddingBranches::OutputOnly;
    let use_out = branches != EmbeddingBranches::InputOnly;
    // Token-equality Gram matrices a_s a_sᵀ, one L×L block per sample.
    let gram: Vec<T> = if use_in {
        let mut gram = vec![T::zero(); b * l * l];
        for i in 0..b {
            let tok = &tokens[i * l..(i + 1) * l];
            for r in 0..l {
                for s in 0..l {
                    if tok[r] != PAD && tok[r] == tok[s] {
                        gram[(i * l + r) * l + s] = T::one();
                    }
                }
            }
        }
        gram
    } else {
        Vec::new()
    };
    let mut out = vec![T::zero(); b];
    for (i, o) in out.iter_mut().enumerate() {
        let es = &grad_e_s[i * l * d..(i + 1) * l * d];
        let ec = &grad_e_c[i * m * d..(i + 1) * m * d];
        let tok = &tokens[i * l..(i + 1) * l];
        let mut acc = T::zero();
        if use_in {
            let gi = &gram[i * l * l..(i + 1) * l * l];
            for r in 0..l {
                for s in 0..l {
                    if gi[r * l + s] != T::zero() {
                        acc = acc + kernels::dot(&es[r * d..(r + 1) * d], &es[s * d..(s + 1) * d]);
                    }
                }
            }
        }
        if use_out {
            acc = acc + kernels::dot(ec, ec);
        }
        if use_in && use_out {
            let mut cross = T::zero();
            for r in 0..l {
                if tok[r] != PAD {
                    let row = (tok[r] - 1) * d;
                    cross = cross + kernels::dot(&es[r * d..(r + 1) * d], &ec[row..row + d]);
                }
            }
            acc = acc + T::of(2.0) * cross;
        }
        *o = acc.max(T::zero());
    }
    Ok(out)
}

/// Squared per-sample norms of the shared-embedding gradient from the
/// input tokens `a_s` (`B×L`, 0 = padding), `∇e_s` (`B×L×d`) and `∇e_c`
/// (`B×M×d`).
pub fn phantom_norm_embedding<T: Scalar>(
    tokens: &[usize],
    grad_e_s: &Array<T>,
    grad_e_c: &Array<T>,
) -> Result<Vec<T>> {
    let (ss, sc) = (grad_e_s.shape(), grad_e_c.shape());
    if ss.len() != 3 || sc.len() != 3 || ss[0] != sc[0] || ss[2] != sc[2] || tokens.len() != ss[0] * ss[1] {
        return Err(Error::Shape(format!(
            "embedding norm inputs: {} tokens, {ss:?}, {sc:?}",
            tokens.len()
        )));
    }
    phantom_slices(
        tokens,
        grad_e_s.data(),
        grad_e_c.data(),
        ss[0],
        ss[1],
        sc[1],
        ss[2],
        EmbeddingBranches::Both,
    )
}

/// Shared-embedding norms with the one-hot inputs of both branches stacked
/// into an `(L+M)`-row input and every Gram block materialized, as a
/// linear-layer ghost norm would. Used only as a benchmark baseline.
pub fn ghost_norm_embedding_dense<T: Scalar>(tape: &GradTape<T>) -> Result<Vec<T>> {
    let (b, l, m, d) = (tape.batch, tape.seq_len, tape.vocab_size, tape.d_model);
    let mut out = vec![T::zero(); b];
    // a_c a_cᵀ is the M×M identity and a_s a_cᵀ the L×M one-hot matrix;
    // both are held densely, one sample at a time.
    let mut gram_cc = vec![T::zero(); m * m];
    let mut gram_sc = vec![T::zero(); l * m];
    for (i, o) in out.iter_mut().enumerate() {
        let tok = &tape.tokens[i * l..(i + 1) * l];
        let es = &tape.grad_e_s[i * l * d..(i + 1) * l * d];
        let ec = &tape.grad_e_c[i * m * d..(i + 1) * m * d];
        gram_cc.iter_mut().for_each(|x| *x = T::zero());
        for v in 0..m {
            gram_cc[v * m + v] = T::one();
        }
        gram_sc.iter_mut().for_each(|x| *x = T::zero());
        for r in 0..l {
            if tok[r] != PAD {
                gram_sc[r * m + tok[r] - 1] = T::one();
            }
        }
        let mut acc = T::zero();
        for r in 0..l {
            for s in 0..l {
                if tok[r] != PAD && tok[r] == tok[s] {
                    acc = acc + kernels::dot(&es[r * d..(r + 1) * d], &es[s * d..(s + 1) * d]);
                }
            }
        }
        for u in 0..m {
            for v in 0..m {
                let a = gram_cc[u * m + v];
                if a != T::zero() {
                    acc = acc + a * kernels::dot(&ec[u * d..(u + 1) * d], &ec[v * d..(v + 1) * d]);
                }
            }
        }
        for r in 0..l {
            for v in 0..m {
                let a = gram_sc[r * m + v];
                if a != T::zero() {
                    acc = acc
                        + T::of(2.0) * a * kernels::dot(&es[r * d..(r + 1) * d], &ec[v * d..(v + 1) * d]);
                }
            }
        }
        *o = acc.max(T::zero());
    }
    Ok(out)
}

fn embedding_branches<T: Scalar>(tape: &GradTape<T>, which: EmbeddingBranches) -> Result<Vec<T>> {
    phantom_slices(
        &tape.tokens,
        &tape.grad_e_s,
        &tape.grad_e_c,
        tape.batch,
        tape.seq_len,
        tape.vocab_size,
        tape.d_model,
        which,
    )
}

fn direct_norms<T: Scalar>(per_sample: &[T], dim: usize) -> Vec<T> {
    per_sample.chunks(dim).map(|c| kernels::dot(c, c)).collect()
}

fn tape_norms<T: Scalar>(
    tape: &GradTape<T>,
    groups: &[ParamId],
    dense_embedding: bool,
) -> Result<PerSampleNorms<T>> {
    let (b, l) = (tape.batch, tape.seq_len);
    let mut cols = Vec::with_capacity(groups.len());
    for &id in groups {
        let col = match tape.get(id)? {
            TapeEntry::Linear {
                input,
                output_grad,
                d_in,
                d_out,
            } => ghost_norm_slices(input, output_grad, b, l, *d_in, *d_out),
            TapeEntry::Direct { per_sample, dim } => direct_norms(per_sample, *dim),
            TapeEntry::SharedEmbedding if dense_embedding => ghost_norm_embedding_dense(tape)?,
            TapeEntry::SharedEmbedding => embedding_branches(tape, EmbeddingBranches::Both)?,
            TapeEntry::InputEmbedding => embedding_branches(tape, EmbeddingBranches::InputOnly)?,
            TapeEntry::OutputEmbedding => embedding_branches(tape, EmbeddingBranches::OutputOnly)?,
            TapeEntry::Positional => direct_norms(&tape.grad_e_s, l * tape.d_model),
        };
        cols.push(col);
    }
    Ok(PerSampleNorms::from_group_squares(groups.to_vec(), cols))
}

/// Per-sample norms of every group in `groups` from a tape, combined by
/// summing squared group norms.
pub fn fast_per_sample_norms<T: Scalar>(
    tape: &GradTape<T>,
    groups: &[ParamId],
) -> Result<PerSampleNorms<T>> {
    tape_norms(tape, groups, false)
}

/// Per-sample gradients by running one batch-size-1 backward per sample.
///
/// `masks` and `correction` describe the full batch and are sliced per
/// sample, so the oracle differentiates exactly the function seen by the
/// batched pass. Without masks dropout is off.
pub fn naive_per_sample_gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &SequenceBatch,
    masks: Option<&DropoutMasks<T>>,
    correction: Option<&AttentionCorrection<T>>,
) -> Result<Vec<ModelParams<T>>> {
    let none = DropoutMasks::none(params.config.n_blocks);
    (0..batch.batch_size)
        .map(|i| {
            let one = batch.select(&[i]);
            let m = masks.map_or_else(|| none.clone(), |m| m.select(&[i], batch.batch_size));
            let c = correction.map(|c| c.select(&[i], batch.seq_len));
            let (logits, cache) = forward_replay(params, &one, &m, c.as_ref())?;
            let loss = loss_next_token(&logits, &one.targets)?;
            Ok(backward(params, &cache, &loss.grad, None)?.0)
        })
        .collect()
}

pub fn norms_of_gradients<T: Scalar>(grads: &[ModelParams<T>]) -> PerSampleNorms<T> {
    let groups = grads.first().map(|g| g.ids()).unwrap_or_default();
    let cols = groups
        .iter()
        .map(|&id| grads.iter().map(|g| g.get(id).map_or(T::zero(), |a| a.sum_sq())).collect())
        .collect();
    PerSampleNorms::from_group_squares(groups, cols)
}

/// Exact per-sample norms by instantiating every per-sample gradient
/// (dropout off, no attention correction).
pub fn naive_per_sample_norms<T: Scalar>(
    params: &ModelParams<T>,
    batch: &SequenceBatch,
) -> Result<PerSampleNorms<T>> {
    Ok(norms_of_gradients(&naive_per_sample_gradients(params, batch, None, None)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipMode {
    /// `min(C/‖g‖, 1)`
    Clip,
    /// `C/(‖g‖ + 1e-6)`
    Normalize,
}

impl std::str::FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(ClipMode::Clip),
            "normalize" => Ok(ClipMode::Normalize),
            _ => Err(Error::InvalidArgument(format!("unknown clip mode {s:?}"))),
        }
    }
}

pub const NORMALIZE_STABILIZER: f64 = 1e-6;

pub fn clip_factors<T: Scalar>(norms: &[T], c: f64, mode: ClipMode) -> Result<Vec<T>> {
    if c.is_nan() || c <= 0.0 {
        return Err(Error::InvalidArgument(format!("clipping norm {c} must be positive")));
    }
    if mode == ClipMode::Normalize && c.is_infinite() {
        return Err(Error::InvalidArgument("normalize mode needs a finite clipping norm".into()));
    }
    norms
        .iter()
        .map(|&n| {
            let n = n.as_f64();
            if n.is_nan() || n < 0.0 {
                return Err(Error::InvalidArgument(format!("norm {n} must be non-negative")));
            }
            let f = match mode {
                ClipMode::Clip => (c / n).min(1.0),
                ClipMode::Normalize => c / (n + NORMALIZE_STABILIZER),
            };
            Ok(T::of(f))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClippedGradient<T> {
    /// `Σ_i factor_i · g_i`
    pub gradient: ModelParams<T>,
    pub norms: PerSampleNorms<T>,
    pub factors: Vec<T>,
    /// Mean per-sample loss of the batch.
    pub loss: T,
    /// Masks used by both passes.
    pub masks: DropoutMasks<T>,
}

/// Two-pass clipped gradient: the first backward fills the tape and the
/// per-sample norms, the second reweights each sample's loss by its clip
/// factor. Both passes share one forward, hence the same dropout masks.
pub fn clipped_batch_gradient<T: Scalar>(
    params: &ModelParams<T>,
    batch: &SequenceBatch,
    c: f64,
    mode: ClipMode,
    forward_mode: Mode,
    correction: Option<&AttentionCorrection<T>>,
    rng: &mut Rng,
) -> Result<ClippedGradient<T>> {
    let (logits, cache) = forward(params, batch, forward_mode, correction, rng)?;
    let loss = loss_next_token(&logits, &batch.targets)?;
    let tape = backward_tape(params, &cache, &loss.grad)?;
    let norms = fast_per_sample_norms(&tape, &params.ids())?;
    drop(tape);
    let factors = clip_factors(&norms.total, c, mode)?;
    let (gradient, _) = backward(params, &cache, &loss.grad, Some(&factors))?;
    Ok(ClippedGradient {
        gradient,
        norms,
        factors,
        loss: loss.mean,
        masks: cache.masks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipMethod {
    Naive,
    Ghost,
    Phantom,
}

impl std::str::FromStr for ClipMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(ClipMethod::Naive),
            "ghost" => Ok(ClipMethod::Ghost),
            "phantom" => Ok(ClipMethod::Phantom),
            _ => Err(Error::InvalidArgument(format!("unknown clipping method {s:?}"))),
        }
    }
}

/// Auxiliary floats needed for the embedding's per-sample norms, itemized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub method: ClipMethod,
    pub batch: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub items: Vec<(String, u64)>,
    pub auxiliary_float_count: u64,
}

impl MemoryReport {
    pub fn item(&self, name: &str) -> Option<u64> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub fn aux_memory_report(b: usize, l: usize, m: usize, d: usize, method: ClipMethod) -> Result<MemoryReport> {
    if b == 0 || l == 0 || m == 0 || d == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    let (b, l, m, d) = (b as u64, l as u64, m as u64, d as u64);
    let items: Vec<(&str, u64)> = match method {
        ClipMethod::Phantom => vec![
            ("token_gram", b * l * l),
            ("grad_e_s", b * l * d),
            ("grad_e_c", b * m * d),
        ],
        ClipMethod::Ghost => vec![
            ("token_gram", b * l * l),
            ("grad_e_s", b * l * d),
            ("grad_e_c", b * m * d),
            ("candidate_gram", b * m * m),
            ("cross_gram", b * l * m),
        ],
        ClipMethod::Naive => vec![("per_sample_embedding_grads", b * m * d)],
    };
    Ok(MemoryReport {
        method,
        batch: b as usize,
        seq_len: l as usize,
        vocab_size: m as usize,
        d_model: d as usize,
        auxiliary_float_count: items.iter().map(|(_, v)| v).sum(),
        items: items.into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: ClipMethod,
    pub repeats: usize,
    /// Mean seconds per per-sample-norm computation (forward and backward included).
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub memory: MemoryReport,
}

/// Times per-sample norm computation for one method on a random model and
/// batch of the given size.
pub fn bench_clip(
    b: usize,
    l: usize,
    m: usize,
    d: usize,
    method: ClipMethod,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    let memory = aux_memory_report(b, l, m, d, method)?;
    let mut cfg = ModelConfig::new(m, l);
    cfg.d_model = d;
    cfg.d_ff = d;
    cfg.dropout = 0.0;
    let params: ModelParams<f64> = init_params(&cfg, &mut Rng::new(seed, Stream::Init))?;
    let mut rng = Rng::new(seed, Stream::Data);
    use rand::Rng as _;
    let seqs: Vec<Vec<usize>> = (0..b)
        .map(|_| (0..=l).map(|_| rng.random_range(1..=m)).collect())
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let batch = SequenceBatch::from_sequences(&refs, (0..b).collect(), l);
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let norms = match method {
            ClipMethod::Naive => naive_per_sample_norms(&params, &batch)?,
            ClipMethod::Ghost | ClipMethod::Phantom => {
                let (logits, cache) = forward(&params, &batch, Mode::Eval, None, &mut rng)?;
                let loss = loss_next_token(&logits, &batch.targets)?;
                let (_, tape) = backward(&params, &cache, &loss.grad, None)?;
                tape_norms(&tape, &params.ids(), method == ClipMethod::Ghost)?
            }
        };
        std::hint::black_box(&norms);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(BenchReport {
        method,
        repeats: times.len(),
        mean_seconds: times.iter().sum::<f64>() / times.len() as f64,
        min_seconds: times.iter().copied().fold(f64::INFINITY, f64::min),
        memory,
    })
}
