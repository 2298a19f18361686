use crate::error::{Error, Result};
use crate::numkit::Array;
use crate::scalar::Scalar;
use crate::seqdata::PAD;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    /// Mean of the per-sample losses over samples that have targets.
    pub mean: T,
    /// Per sample, the mean cross-entropy over its non-padded positions.
    pub per_sample: Vec<T>,
    /// Gradient of the sum of per-sample losses w.r.t. the logits, so
    /// slice `i` is the gradient of sample `i`'s own loss.
    pub grad: Array<T>,
}

/// Next-token cross-entropy. `targets` is `B×L` with 0 marking no target;
/// target token `t` corresponds to logit column `t - 1`.
pub fn loss_next_token<T: Scalar>(logits: &Array<T>, targets: &[usize]) -> Result<LossOutput<T>> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] * shape[1] != targets.len() {
        return Err(Error::Shape(format!(
            "logits {shape:?} vs {} targets",
            targets.len()
        )));
    }
    let (b, l, m) = (shape[0], shape[1], shape[2]);
    let data = logits.data();
    let mut grad = vec![T::zero(); data.len()];
    let mut per_sample = vec![T::zero(); b];
    let mut with_targets = 0usize;
    for i in 0..b {
        let row_targets = &targets[i * l..(i + 1) * l];
        let n = row_targets.iter().filter(|&&t| t != PAD).count();
        if n == 0 {
            continue;
        }
        with_targets += 1;
        let inv_n = T::one() / T::of(n as f64);
        let mut total = T::zero();
        for (t, &target) in row_targets.iter().enumerate() {
            if target == PAD {
                continue;
            }
            if target > m {
                return Err(Error::TokenOutOfRange {
                    token: target,
                    vocab_size: m,
                });
            }
            let off = (i * l + t) * m;
            let row = &data[off..off + m];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|&x| (x - mx).exp()).sum::<T>();
            let lse = mx + z.ln();
            total = total + lse - row[target - 1];
            let g = &mut grad[off..off + m];
            for c in 0..m {
                g[c] = (row[c] - lse).exp() * inv_n;
            }
            g[target - 1] = g[target - 1] - inv_n;
        }
        per_sample[i] = total * inv_n;
    }
    if with_targets == 0 {
        return Err(Error::NoTargets);
    }
    let mean = per_sample.iter().copied().sum::<T>() / T::of(with_targets as f64);
    Ok(LossOutput {
        mean,
        per_sample,
        grad: Array::from_vec(shape, grad)?,
    })
}
