use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{kernels, Rng, Stream};
use crate::reattention::{attention_correction, EffectiveError};
use crate::scalar::Scalar;
use crate::seqdata::{SequenceBatch, SequenceDataset};
use crate::transformer::{forward_hidden, ModelParams};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    /// Drop the user's own training items (other than the target) from
    /// the candidates.
    pub exclude_seen: bool,
    /// Rank against this many uniformly sampled negatives instead of the
    /// full vocabulary.
    pub sampled_negatives: Option<usize>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: 10,
            exclude_seen: false,
            sampled_negatives: None,
            seed: 0,
        }
    }
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub ndcg: f64,
    pub hit: f64,
    pub users: usize,
}

/// 1-based rank of `target` (a token id) among the candidate columns.
/// Higher logits rank first; equal logits rank lower token ids first.
pub fn rank_of_target<T: Scalar>(logits: &[T], target: usize, candidates: impl IntoIterator<Item = usize>) -> usize {
    let s = logits[target - 1];
    1 + candidates
        .into_iter()
        .filter(|&t| t != target)
        .filter(|&t| {
            let x = logits[t - 1];
            x > s || (x == s && t < target)
        })
        .count()
}

/// `(NDCG, HIT)` credit of one rank, as fractions.
pub fn rank_credit(rank: usize, k: usize) -> (f64, f64) {
    if rank <= k {
        (1.0 / ((rank + 1) as f64).log2(), 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// NDCG@K and HIT@K of next-token ranking at the last position of each
/// user's training sequence. With `errors`, attention is corrected as in
/// training.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &SequenceDataset,
    opts: &EvalOptions,
    errors: Option<(&EffectiveError, bool)>,
) -> Result<EvalMetrics> {
    let n = dataset.n_users();
    if n == 0 || dataset.test_targets.len() != n {
        return Err(Error::InvalidArgument("dataset has no test targets".into()));
    }
    if opts.k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let m = dataset.vocab_size;
    let mut rng = Rng::new(opts.seed, Stream::Custom(7));
    let (mut ndcg, mut hit) = (0.0, 0.0);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let seqs: Vec<&[usize]> = rows.iter().map(|&r| dataset.sequences[r].as_slice()).collect();
        let batch = SequenceBatch::for_inference(&seqs, rows.clone(), dataset.max_len);
        let correction = match errors {
            Some((e, renorm)) => Some(attention_correction(params, e, &batch, renorm)?),
            None => None,
        };
        let cache = forward_hidden(params, &batch, correction.as_ref())?;
        let l = batch.seq_len;
        let d = params.config.d_model;
        let out_w = params.output_embedding.as_ref().unwrap_or(&params.token_embedding);
        let mut row = vec![T::zero(); m];
        for (bi, &u) in rows.iter().enumerate() {
            // Sequences are left padded, so the last position is the newest token.
            let r = bi * l + l - 1;
            kernels::matmul_nt(&cache.hidden[r * d..(r + 1) * d], out_w.data(), &mut row, 1, d, m);
            let row = row.as_slice();
            let target = dataset.test_targets[u];
            let seen = &dataset.sequences[u];
            let allowed = |t: usize| !(opts.exclude_seen && t != target && seen.contains(&t));
            let rank = match opts.sampled_negatives {
                None => rank_of_target(row, target, (1..=m).filter(|&t| allowed(t))),
                Some(count) => {
                    let pool: Vec<usize> = (1..=m).filter(|&t| t != target && allowed(t)).collect();
                    let take = count.min(pool.len());
                    let negatives = sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i]);
                    rank_of_target(row, target, negatives)
                }
            };
            let (g, h) = rank_credit(rank, opts.k);
            ndcg += g;
            hit += h;
        }
    }
    Ok(EvalMetrics {
        ndcg: 100.0 * ndcg / n as f64,
        hit: 100.0 * hit / n as f64,
        users: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        let logits = [0.1f64, 0.9, 0.5, 0.5];
        assert_eq!(rank_of_target(&logits, 2, 1..=4), 1);
        // Token 3 ties token 4 and wins on the lower id.
        assert_eq!(rank_of_target(&logits, 3, 1..=4), 2);
        assert_eq!(rank_of_target(&logits, 4, 1..=4), 3);
        assert_eq!(rank_of_target(&logits, 4, [1, 4]), 1);
    }

    #[test]
    fn credit_examples() {
        assert_eq!(rank_credit(1, 10), (1.0, 1.0));
        let (g, h) = rank_credit(2, 10);
        assert!((100.0 * g - 63.092_975).abs() < 1e-5);
        assert_eq!(h, 1.0);
        assert_eq!(rank_credit(11, 10), (0.0, 0.0));
    }
}
