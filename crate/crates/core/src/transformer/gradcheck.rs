use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::numkit::{Rng, Stream};
use crate::scalar::Scalar;
use crate::seqdata::SequenceBatch;

use super::{backward, forward, loss_next_token, ModelParams, Mode, ParamId};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / (|numeric| + 1e-8)`.
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Groups that received at least one checked coordinate.
    pub groups_covered: Vec<ParamId>,
    /// The coordinate with the largest error.
    pub worst: Option<(ParamId, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

fn total_loss(params: &ModelParams<f64>, batch: &SequenceBatch) -> Result<f64> {
    let mut rng = Rng::new(0, Stream::Dropout);
    let (logits, _) = forward(params, batch, Mode::Eval, None, &mut rng)?;
    Ok(loss_next_token(&logits, &batch.targets)?.per_sample.iter().sum())
}

/// Analytic gradient of the summed per-sample loss in eval mode.
pub(crate) fn analytic_gradient(
    params: &ModelParams<f64>,
    batch: &SequenceBatch,
) -> Result<ModelParams<f64>> {
    let mut rng = Rng::new(0, Stream::Dropout);
    let (logits, cache) = forward(params, batch, Mode::Eval, None, &mut rng)?;
    let loss = loss_next_token(&logits, &batch.targets)?;
    Ok(backward(params, &cache, &loss.grad, None)?.0)
}

/// Central differences on `n_coords` coordinates, spread round-robin over
/// every parameter group, compared against the backward pass.
pub fn finite_difference_check(
    params: &ModelParams<f64>,
    batch: &SequenceBatch,
    epsilon: f64,
    n_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradient(params, batch)?;
    compare_with_finite_differences(params, batch, &analytic, epsilon, n_coords, rng)
}

/// Like [`finite_difference_check`] with a caller-supplied analytic gradient.
pub fn compare_with_finite_differences(
    params: &ModelParams<f64>,
    batch: &SequenceBatch,
    analytic: &ModelParams<f64>,
    epsilon: f64,
    n_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let ids = params.ids();
    let mut picks: Vec<(ParamId, usize)> = Vec::with_capacity(n_coords);
    let mut per_group: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| {
            let mut idx: Vec<usize> = (0..params.get(id).map_or(0, |a| a.len())).collect();
            idx.shuffle(rng);
            idx
        })
        .collect();
    let mut g = 0;
    while picks.len() < n_coords && per_group.iter().any(|v| !v.is_empty()) {
        if let Some(k) = per_group[g % ids.len()].pop() {
            picks.push((ids[g % ids.len()], k));
        }
        g += 1;
    }
    // Top up with repeats if the model is smaller than the request.
    while picks.len() < n_coords {
        let id = ids[rng.random_range(0..ids.len())];
        let n = params.get(id).map_or(0, |a| a.len());
        if n > 0 {
            picks.push((id, rng.random_range(0..n)));
        }
    }

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut covered: Vec<ParamId> = Vec::new();
    for &(id, k) in &picks {
        let orig = work.get(id).expect("listed id").data()[k];
        work.get_mut(id).expect("listed id").data_mut()[k] = orig + epsilon;
        let plus = total_loss(&work, batch)?;
        work.get_mut(id).expect("listed id").data_mut()[k] = orig - epsilon;
        let minus = total_loss(&work, batch)?;
        work.get_mut(id).expect("listed id").data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.get(id).map_or(0.0, |g| g.data()[k].as_f64());
        let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some((id, k));
        }
        if !covered.contains(&id) {
            covered.push(id);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        coordinates: picks.len(),
        groups_covered: covered,
        worst,
    })
}
