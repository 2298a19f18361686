use crate::error::{Error, Result};
use crate::numkit::{kernels, Array};
use crate::scalar::Scalar;
use crate::seqdata::PAD;

use super::forward::{activate_grad, ForwardCache, LnCache};
use super::{BlockParam, ModelParams, ParamId};

/// What the tape records for one parameter group. All buffers are
/// sample-major, so sample `i` owns a contiguous slice.
#[derive(Clone, Debug, PartialEq)]
pub enum TapeEntry<T> {
    /// `y = x·W`: inputs `B×T×d_in` and output gradients `B×T×d_out`.
    Linear {
        input: Vec<T>,
        output_grad: Vec<T>,
        d_in: usize,
        d_out: usize,
    },
    /// Small parameters whose per-sample gradients are stored outright (`B×dim`).
    Direct { per_sample: Vec<T>, dim: usize },
    /// Shared embedding: reads `tokens`, `grad_e_s` and `grad_e_c`.
    SharedEmbedding,
    /// Input-only embedding: reads `tokens` and `grad_e_s`.
    InputEmbedding,
    /// Output-only embedding: reads `grad_e_c`.
    OutputEmbedding,
    /// Positional embedding: its per-sample gradient is `grad_e_s` itself.
    Positional,
}

/// Per-layer records of one backward pass, enough to recover every
/// per-sample gradient norm without forming per-sample gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTape<T> {
    pub batch: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    /// `B×L` token ids (0 = padding), standing for one-hot rows `a_s`.
    pub tokens: Vec<usize>,
    /// Gradient w.r.t. the looked-up embeddings, `B×L×d`, zero at padding.
    pub grad_e_s: Vec<T>,
    /// Gradient w.r.t. the output embedding matrix, `B×M×d`.
    pub grad_e_c: Vec<T>,
    pub entries: Vec<(ParamId, TapeEntry<T>)>,
}

impl<T: Scalar> GradTape<T> {
    pub fn get(&self, id: ParamId) -> Result<&TapeEntry<T>> {
        self.entries
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::MissingTapeEntry(id.to_string()))
    }
}

fn ln_backward<T: Scalar>(
    cache: &LnCache<T>,
    gain: &[T],
    dout: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let rows = cache.inv_std.len();
    let nd = T::of(d as f64);
    let mut dn = vec![T::zero(); d];
    for r in 0..rows {
        let n = &cache.normalized[r * d..(r + 1) * d];
        let g = &dout[r * d..(r + 1) * d];
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for i in 0..d {
            dgain[r * d + i] = g[i] * n[i];
            dbias[r * d + i] = g[i];
            dn[i] = g[i] * gain[i];
            s1 = s1 + dn[i];
            s2 = s2 + dn[i] * n[i];
        }
        let c = cache.inv_std[r] / nd;
        for i in 0..d {
            dx[r * d + i] = dx[r * d + i] + c * (nd * dn[i] - s1 - n[i] * s2);
        }
    }
}

/// Sums a `B×L×dim` row buffer over positions, giving `B×dim`.
fn per_sample_sum<T: Scalar>(rows: &[T], b: usize, l: usize, dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * dim];
    for i in 0..b {
        for t in 0..l {
            let r = i * l + t;
            kernels::axpy(T::one(), &rows[r * dim..(r + 1) * dim], &mut out[i * dim..(i + 1) * dim]);
        }
    }
    out
}

fn sum_samples<T: Scalar>(per_sample: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); dim];
    for chunk in per_sample.chunks(dim) {
        kernels::axpy(T::one(), chunk, &mut out);
    }
    out
}

fn set<T: Scalar>(grads: &mut ModelParams<T>, id: ParamId, data: Vec<T>) -> Result<()> {
    let a = grads.get_mut(id).expect("group exists");
    let shape = a.shape().to_vec();
    *a = Array::from_vec(&shape, data)?;
    Ok(())
}

/// Backpropagates `dlogits` (`B×L×M`) through the cached forward pass.
///
/// With `weights`, sample `i`'s logit gradient is scaled by `weights[i]`
/// first. Returns the summed gradient and the tape.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &Array<T>,
    weights: Option<&[T]>,
) -> Result<(ModelParams<T>, GradTape<T>)> {
    let (grads, tape) = backward_impl(params, cache, dlogits, weights, true)?;
    Ok((grads.expect("gradients requested"), tape))
}

/// Records only the tape; the summed gradient is not formed.
pub fn backward_tape<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &Array<T>,
) -> Result<GradTape<T>> {
    Ok(backward_impl(params, cache, dlogits, None, false)?.1)
}

fn backward_impl<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &Array<T>,
    weights: Option<&[T]>,
    need_grads: bool,
) -> Result<(Option<ModelParams<T>>, GradTape<T>)> {
    let cfg = &params.config;
    let (bsz, l, d, m) = (cache.batch, cache.seq_len, cfg.d_model, cfg.vocab_size);
    let (h, dh, dff) = (cfg.n_heads, cfg.head_dim(), cfg.d_ff);
    let rows = bsz * l;
    if dlogits.shape() != [bsz, l, m] {
        return Err(Error::Shape(format!(
            "logit gradient {:?} but expected [{bsz}, {l}, {m}]",
            dlogits.shape()
        )));
    }
    if cache.blocks.len() != cfg.n_blocks || cache.hidden.len() != rows * d {
        return Err(Error::Shape("cache does not match the model".into()));
    }
    let mut dlog = dlogits.data().to_vec();
    if let Some(w) = weights {
        if w.len() != bsz {
            return Err(Error::Shape(format!("{} weights for batch of {bsz}", w.len())));
        }
        for (i, &wi) in w.iter().enumerate() {
            dlog[i * l * m..(i + 1) * l * m].iter_mut().for_each(|x| *x = *x * wi);
        }
    }

    let mut entries: Vec<(ParamId, TapeEntry<T>)> = Vec::new();

    // Output branch: logits = h · Wᵀ.
    let out_w = params.output_embedding.as_ref().unwrap_or(&params.token_embedding);
    let mut grad_e_c = vec![T::zero(); bsz * m * d];
    for i in 0..bsz {
        kernels::matmul_tn_acc(
            &dlog[i * l * m..(i + 1) * l * m],
            &cache.hidden[i * l * d..(i + 1) * l * d],
            &mut grad_e_c[i * m * d..(i + 1) * m * d],
            l,
            m,
            d,
        );
    }
    let e_c_sum = if need_grads { sum_samples(&grad_e_c, m * d) } else { Vec::new() };
    let mut dx = vec![T::zero(); rows * d];
    kernels::matmul(&dlog, out_w.data(), &mut dx, rows, m, d);

    // Final layernorm.
    let mut dres = vec![T::zero(); rows * d];
    let mut dg = vec![T::zero(); rows * d];
    let mut db = vec![T::zero(); rows * d];
    ln_backward(&cache.final_ln, params.final_ln.gain.data(), &dx, d, &mut dres, &mut dg, &mut db);
    let final_gain = per_sample_sum(&dg, bsz, l, d);
    let final_bias = per_sample_sum(&db, bsz, l, d);

    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut block_entries = Vec::with_capacity(cfg.n_blocks);
    for bi in (0..cfg.n_blocks).rev() {
        let bp = &params.blocks[bi];
        let bc = &cache.blocks[bi];
        let mut ent: Vec<(BlockParam, TapeEntry<T>)> = Vec::new();

        // FFN: x_out = x_mid + act_used·W2 + b2.
        let dx_out = dres;
        let mut dx_mid = dx_out.clone();
        let mut dact = vec![T::zero(); rows * dff];
        kernels::matmul_nt(&dx_out, bp.w_2.data(), &mut dact, rows, d, dff);
        if let Some(mask) = &cache.masks.ffn[bi] {
            dact.iter_mut().zip(mask).for_each(|(g, &k)| *g = *g * k);
        }
        let dpre: Vec<T> = dact
            .iter()
            .zip(&bc.pre_act)
            .map(|(&g, &x)| g * activate_grad(cfg.activation, x))
            .collect();
        let mut du2 = vec![T::zero(); rows * d];
        kernels::matmul_nt(&dpre, bp.w_1.data(), &mut du2, rows, dff, d);
        let mut dg2 = vec![T::zero(); rows * d];
        let mut db2 = vec![T::zero(); rows * d];
        ln_backward(&bc.ln2, bp.ln2.gain.data(), &du2, d, &mut dx_mid, &mut dg2, &mut db2);

        ent.push((
            BlockParam::Ffn2,
            TapeEntry::Linear {
                input: bc.act_used.clone(),
                output_grad: dx_out.clone(),
                d_in: dff,
                d_out: d,
            },
        ));
        ent.push((
            BlockParam::Ffn2Bias,
            TapeEntry::Direct {
                per_sample: per_sample_sum(&dx_out, bsz, l, d),
                dim: d,
            },
        ));
        ent.push((
            BlockParam::Ffn1Bias,
            TapeEntry::Direct {
                per_sample: per_sample_sum(&dpre, bsz, l, dff),
                dim: dff,
            },
        ));
        ent.push((
            BlockParam::Ffn1,
            TapeEntry::Linear {
                input: bc.u2.clone(),
                output_grad: dpre,
                d_in: d,
                d_out: dff,
            },
        ));
        ent.push((
            BlockParam::Ln2Gain,
            TapeEntry::Direct {
                per_sample: per_sample_sum(&dg2, bsz, l, d),
                dim: d,
            },
        ));
        ent.push((
            BlockParam::Ln2Bias,
            TapeEntry::Direct {
                per_sample: per_sample_sum(&db2, bsz, l, d),
                dim: d,
            },
        ));

        // Attention: x_mid = x + z·Wo.
        let mut dxb = dx_mid.clone();
        let mut dz = vec![T::zero(); rows * d];
        kernels::matmul_nt(&dx_mid, bp.w_o.data(), &mut dz, rows, d, d);
        ent.push((
            BlockParam::Output,
            TapeEntry::Linear {
                input: bc.z.clone(),
                output_grad: dx_mid,
                d_in: d,
                d_out: d,
            },
        ));
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); l];
        for b in 0..bsz {
            for hh in 0..h {
                for t in 0..l {
                    let base = ((b * h + hh) * l + t) * l;
                    let prow = &bc.probs[base..base + l];
                    if prow.iter().all(|&p| p == T::zero()) {
                        continue;
                    }
                    let pused = &bc.probs_used[base..base + l];
                    let zo = (b * l + t) * d + hh * dh;
                    let dzr = &dz[zo..zo + dh];
                    for j in 0..=t {
                        let vo = (b * l + j) * d + hh * dh;
                        dp[j] = kernels::dot(dzr, &bc.v[vo..vo + dh]);
                        if pused[j] != T::zero() {
                            let g: Vec<T> = dzr.iter().map(|&x| x * pused[j]).collect();
                            kernels::axpy(T::one(), &g, &mut dv[vo..vo + dh]);
                        }
                    }
                    if let Some(mask) = &cache.masks.attn[bi] {
                        for j in 0..=t {
                            dp[j] = dp[j] * mask[base + j];
                        }
                    }
                    // Softmax part, with P = softmax · f when a plain
                    // multiplicative correction is active.
                    let mut soft = prow[..=t].to_vec();
                    if let Some(f) = &bc.correction_factors {
                        for j in 0..=t {
                            soft[j] = soft[j] / f[base + j];
                            dp[j] = dp[j] * f[base + j];
                        }
                    }
                    let inner = (0..=t).map(|j| soft[j] * dp[j]).sum::<T>();
                    let qo = (b * l + t) * d + hh * dh;
                    for j in 0..=t {
                        if soft[j] == T::zero() {
                            continue;
                        }
                        let ds = soft[j] * (dp[j] - inner) * scale;
                        let ko = (b * l + j) * d + hh * dh;
                        let (qrow, krow) = (&bc.q[qo..qo + dh], &bc.k[ko..ko + dh]);
                        for c in 0..dh {
                            dq[qo + c] = dq[qo + c] + ds * krow[c];
                            dk[ko + c] = dk[ko + c] + ds * qrow[c];
                        }
                    }
                }
            }
        }
        let mut du1 = vec![T::zero(); rows * d];
        kernels::matmul_nt_acc(&dq, bp.w_q.data(), &mut du1, rows, d, d);
        kernels::matmul_nt_acc(&dk, bp.w_k.data(), &mut du1, rows, d, d);
        kernels::matmul_nt_acc(&dv, bp.w_v.data(), &mut du1, rows, d, d);
        for (which, g) in [
            (BlockParam::Query, dq),
            (BlockParam::Key, dk),
            (BlockParam::Value, dv),
        ] {
            ent.push((
                which,
                TapeEntry::Linear {
                    input: bc.u1.clone(),
                    output_grad: g,
                    d_in: d,
                    d_out: d,
                },
            ));
        }
        let mut dg1 = vec![T::zero(); rows * d];
        let mut db1 = vec![T::zero(); rows * d];
        ln_backward(&bc.ln1, bp.ln1.gain.data(), &du1, d, &mut dxb, &mut dg1, &mut db1);
        ent.push((
            BlockParam::Ln1Gain,
            TapeEntry::Direct {
                per_sample: per_sample_sum(&dg1, bsz, l, d),
                dim: d,
            },
        ));
        ent.push((
            BlockParam::Ln1Bias,
            TapeEntry::Direct {
                per_sample: per_sample_sum(&db1, bsz, l, d),
                dim: d,
            },
        ));
        block_entries.push((bi, ent));
        dres = dxb;
    }

    // Embedding lookup and positions; padded rows hold constants.
    let mut grad_e_s = dres;
    for r in 0..rows {
        if cache.tokens[r] == PAD {
            grad_e_s[r * d..(r + 1) * d].iter_mut().for_each(|x| *x = T::zero());
        }
    }
    if !need_grads {
        for (bi, ent) in block_entries.into_iter().rev() {
            entries.extend(ent.into_iter().map(|(which, e)| (ParamId::Block(bi, which), e)));
        }
        if params.output_embedding.is_some() {
            entries.push((ParamId::TokenEmbedding, TapeEntry::InputEmbedding));
            entries.push((ParamId::OutputEmbedding, TapeEntry::OutputEmbedding));
        } else {
            entries.push((ParamId::TokenEmbedding, TapeEntry::SharedEmbedding));
        }
        entries.push((ParamId::Positional, TapeEntry::Positional));
        entries.push((ParamId::FinalLnGain, TapeEntry::Direct { per_sample: final_gain, dim: d }));
        entries.push((ParamId::FinalLnBias, TapeEntry::Direct { per_sample: final_bias, dim: d }));
        let order = params.ids();
        entries.sort_by_key(|(id, _)| order.iter().position(|x| x == id));
        let tape = GradTape {
            batch: bsz,
            seq_len: l,
            vocab_size: m,
            d_model: d,
            tokens: cache.tokens.clone(),
            grad_e_s,
            grad_e_c,
            entries,
        };
        return Ok((None, tape));
    }
    let mut grads = params.zeros_like();
    let mut e_grad = vec![T::zero(); m * d];
    let mut p_grad = vec![T::zero(); l * d];
    for r in 0..rows {
        let tok = cache.tokens[r];
        if tok == PAD {
            continue;
        }
        let g = &grad_e_s[r * d..(r + 1) * d];
        kernels::axpy(T::one(), g, &mut e_grad[(tok - 1) * d..tok * d]);
        let t = r % l;
        kernels::axpy(T::one(), g, &mut p_grad[t * d..(t + 1) * d]);
    }
    if params.output_embedding.is_some() {
        set(&mut grads, ParamId::TokenEmbedding, e_grad)?;
        set(&mut grads, ParamId::OutputEmbedding, e_c_sum)?;
        entries.push((ParamId::TokenEmbedding, TapeEntry::InputEmbedding));
        entries.push((ParamId::OutputEmbedding, TapeEntry::OutputEmbedding));
    } else {
        let shared = e_grad.iter().zip(&e_c_sum).map(|(&a, &b)| a + b).collect();
        set(&mut grads, ParamId::TokenEmbedding, shared)?;
        entries.push((ParamId::TokenEmbedding, TapeEntry::SharedEmbedding));
    }
    set(&mut grads, ParamId::Positional, p_grad)?;
    entries.push((ParamId::Positional, TapeEntry::Positional));

    block_entries.reverse();
    for (bi, ent) in block_entries {
        for (which, e) in ent {
            let id = ParamId::Block(bi, which);
            let summed = match &e {
                TapeEntry::Linear {
                    input,
                    output_grad,
                    d_in,
                    d_out,
                } => {
                    let mut w = vec![T::zero(); d_in * d_out];
                    kernels::matmul_tn_acc(input, output_grad, &mut w, rows, *d_in, *d_out);
                    w
                }
                TapeEntry::Direct { per_sample, dim } => sum_samples(per_sample, *dim),
                _ => unreachable!("blocks hold linear and direct entries only"),
            };
            set(&mut grads, id, summed)?;
            entries.push((id, e));
        }
    }
    set(&mut grads, ParamId::FinalLnGain, sum_samples(&final_gain, d))?;
    set(&mut grads, ParamId::FinalLnBias, sum_samples(&final_bias, d))?;
    entries.push((
        ParamId::FinalLnGain,
        TapeEntry::Direct {
            per_sample: final_gain,
            dim: d,
        },
    ));
    entries.push((
        ParamId::FinalLnBias,
        TapeEntry::Direct {
            per_sample: final_bias,
            dim: d,
        },
    ));

    let order = params.ids();
    entries.sort_by_key(|(id, _)| order.iter().position(|x| x == id));
    let tape = GradTape {
        batch: bsz,
        seq_len: l,
        vocab_size: m,
        d_model: d,
        tokens: cache.tokens.clone(),
        grad_e_s,
        grad_e_c,
        entries,
    };
    Ok((Some(grads), tape))
}
