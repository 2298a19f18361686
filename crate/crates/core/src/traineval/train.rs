use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clipping::{clipped_batch_gradient, ClipMode};
use crate::error::{Error, Result};
use crate::numkit::{Rng, Stream};
use crate::privacy::{calibrate_sigma, dp_step, epsilon_from_rdp, PrivacyLedger};
use crate::reattention::{attention_correction, effective_errors, EffectiveError};
use crate::seqdata::{sample_minibatch, SamplingMode, SequenceDataset};
use crate::transformer::{init_params, Activation, ModelConfig, ModelParams, Mode};

use super::eval::{evaluate, EvalMetrics, EvalOptions};
use super::optim::{adam_update, lr_schedule, AdamState};

/// How the privacy level is specified; exactly one of the two.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Target ε; the noise multiplier is calibrated before training.
    Epsilon(f64),
    /// Fixed noise multiplier.
    Sigma(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSpec {
    /// Expected batch size `B`; the sampling rate is `B/N`.
    Size(usize),
    /// Sampling rate `q`; the expected batch size is `q·N`.
    Rate(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Poisson,
    /// Fixed-size batches without replacement (accounted as Poisson).
    Uniform,
}

/// Which per-token probability sets the effective batch `B·p_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyBasis {
    /// Fraction of sequences containing the token.
    SequenceRate,
    /// Fraction of all token occurrences.
    Occurrence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            d_model: 64,
            n_blocks: 2,
            n_heads: 1,
            d_ff: 64,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub noise: NoiseSpec,
    /// Defaults to `1/(10·N)`.
    pub delta: Option<f64>,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub batch: BatchSpec,
    pub sampling: Sampling,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub model: ModelSpec,
    pub dropout: f64,
    pub reattention: bool,
    pub renormalize: bool,
    pub frequency_basis: FrequencyBasis,
    pub sharing: bool,
    pub seed: u64,
    /// Evaluate every this many epochs and after the last one; 0 evaluates
    /// only at the end.
    pub eval_every: usize,
    pub eval: EvalOptions,
    /// Record wall-clock time. Off by default so reports are reproducible.
    pub record_runtime: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            noise: NoiseSpec::Epsilon(5.0),
            delta: None,
            epochs: 100,
            warmup_fraction: 0.2,
            batch: BatchSpec::Size(256),
            sampling: Sampling::Poisson,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            clip_mode: ClipMode::Normalize,
            model: ModelSpec::default(),
            dropout: 0.2,
            reattention: true,
            renormalize: true,
            frequency_basis: FrequencyBasis::SequenceRate,
            sharing: true,
            seed: 0,
            eval_every: 5,
            eval: EvalOptions::default(),
            record_runtime: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup fraction {} not in [0, 1)", self.warmup_fraction));
        }
        match self.noise {
            NoiseSpec::Epsilon(e) if !(e > 0.0) => return bad(format!("epsilon {e} must be positive")),
            NoiseSpec::Sigma(s) if !(s >= 0.0) || s.is_infinite() => {
                return bad(format!("noise multiplier {s} must be finite and >= 0"))
            }
            _ => {}
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return bad(format!("delta {d} not in (0, 1)"));
            }
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.model.d_model == 0 || self.model.n_heads == 0 || self.model.d_model % self.model.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads".into());
        }
        Ok(())
    }

    pub fn model_config(&self, dataset: &SequenceDataset) -> ModelConfig {
        let mut cfg = ModelConfig::new(dataset.vocab_size, dataset.max_len);
        cfg.d_model = self.model.d_model;
        cfg.n_blocks = self.model.n_blocks;
        cfg.n_heads = self.model.n_heads;
        cfg.d_ff = self.model.d_ff;
        cfg.activation = self.model.activation;
        cfg.dropout = self.dropout;
        cfg.share_embedding = self.sharing;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ndcg: f64,
    pub hit: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped early; metrics cover the epochs that finished.
    Aborted(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: TrainConfig,
    pub users: usize,
    pub vocab_size: usize,
    pub sigma_dp: f64,
    pub sampling_rate: f64,
    pub expected_batch: f64,
    pub delta: f64,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    /// Mean training loss per finished epoch.
    pub epoch_losses: Vec<f64>,
    pub history: Vec<EpochMetrics>,
    /// `None` when no noise was added.
    pub final_epsilon: Option<f64>,
    pub ledger: PrivacyLedger,
    pub status: RunStatus,
    pub runtime_seconds: Option<f64>,
}

impl MetricsReport {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.history.last()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct TrainOutcome {
    pub params: ModelParams<f64>,
    pub report: MetricsReport,
    pub errors: Option<EffectiveError>,
}

/// Resolved sampling setup: `(q, expected batch size, steps per epoch)`.
fn resolve_batch(batch: BatchSpec, n: usize) -> Result<(f64, f64, usize)> {
    let q = match batch {
        BatchSpec::Size(b) if b >= 1 && b <= n => b as f64 / n as f64,
        BatchSpec::Rate(q) if q > 0.0 && q <= 1.0 => q,
        other => {
            return Err(Error::InvalidArgument(format!("batch {other:?} invalid for {n} users")))
        }
    };
    let b = q * n as f64;
    Ok((q, b, (n as f64 / b).ceil() as usize))
}

fn ledger_epsilon(rdp_step: &[f64], orders: &[f64], steps: usize, delta: f64) -> Result<f64> {
    if steps == 0 {
        return Ok(0.0);
    }
    let rdp: Vec<f64> = rdp_step.iter().map(|r| r * steps as f64).collect();
    Ok(epsilon_from_rdp(orders, &rdp, delta)?.0)
}

/// DP training: per step, sample a batch, form the clipped batch gradient
/// (with re-attention when enabled), add noise, take an Adam step and
/// charge the ledger.
pub fn train(config: &TrainConfig, dataset: &SequenceDataset) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let n = dataset.n_users();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (q, b_nominal, steps_per_epoch) = resolve_batch(config.batch, n)?;
    let total_steps = steps_per_epoch * config.epochs;
    let delta = config.delta.unwrap_or(1.0 / (10.0 * n as f64));
    let sigma = match config.noise {
        NoiseSpec::Sigma(s) => s,
        NoiseSpec::Epsilon(e) => calibrate_sigma(e, delta, q, total_steps.max(1) as u64)?,
    };
    let mut ledger = PrivacyLedger::new(sigma, q, delta);
    ledger.uniform_sampling_caveat = config.sampling == Sampling::Uniform;
    let rdp_step = if sigma > 0.0 {
        let mut one = ledger.clone();
        one.advance(1);
        one.rdp()?
    } else {
        Vec::new()
    };
    let mode = match config.sampling {
        Sampling::Poisson => SamplingMode::Poisson(q),
        Sampling::Uniform => SamplingMode::Uniform((b_nominal.round() as usize).clamp(1, n)),
    };

    let model_cfg = config.model_config(dataset);
    let mut params: ModelParams<f64> = init_params(&model_cfg, &mut Rng::new(config.seed, Stream::Init))?;
    let errors = if config.reattention && sigma > 0.0 {
        let freq = match config.frequency_basis {
            FrequencyBasis::SequenceRate => &dataset.frequencies.sequence_rate,
            FrequencyBasis::Occurrence => &dataset.frequencies.p,
        };
        Some(effective_errors(sigma, b_nominal, freq)?)
    } else {
        None
    };
    let mut adam = AdamState::new(&params);
    let mut data_rng = Rng::new(config.seed, Stream::Data);
    let mut noise_rng = Rng::new(config.seed, Stream::DpNoise);
    let mut dropout_rng = Rng::new(config.seed, Stream::Dropout);
    let mut eval_opts = config.eval.clone();
    eval_opts.seed = config.seed;

    let mut report = MetricsReport {
        config: config.clone(),
        users: n,
        vocab_size: dataset.vocab_size,
        sigma_dp: sigma,
        sampling_rate: q,
        expected_batch: b_nominal,
        delta,
        steps_per_epoch,
        total_steps,
        epoch_losses: Vec::new(),
        history: Vec::new(),
        final_epsilon: None,
        ledger: ledger.clone(),
        status: RunStatus::Completed,
        runtime_seconds: None,
    };
    let ceiling = match config.noise {
        NoiseSpec::Epsilon(e) => Some(e),
        NoiseSpec::Sigma(_) => None,
    };
    let forward_mode = if config.dropout > 0.0 { Mode::Train } else { Mode::Eval };
    let mut step = 0usize;
    'epochs: for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = sample_minibatch(dataset, mode, &mut data_rng)?;
            let correction = match &errors {
                Some(e) => Some(attention_correction(&params, e, &batch, config.renormalize)?),
                None => None,
            };
            let clipped = clipped_batch_gradient(
                &params,
                &batch,
                config.clip_norm,
                config.clip_mode,
                forward_mode,
                correction.as_ref(),
                &mut dropout_rng,
            )?;
            let noisy = dp_step(&clipped.gradient, config.clip_norm, sigma, b_nominal, &mut noise_rng)?;
            // Midpoint of the step keeps the first and last updates nonzero.
            let lr = lr_schedule(
                step as f64 + 0.5,
                total_steps as f64,
                config.learning_rate,
                config.warmup_fraction,
            );
            adam_update(&mut params, &noisy, &mut adam, lr, config.weight_decay)?;
            ledger.advance(1);
            step += 1;
            loss_sum += clipped.loss;
            if let Some(target) = ceiling {
                let spent = ledger_epsilon(&rdp_step, &ledger.rdp_orders, step, delta)?;
                if spent > target {
                    report.status = RunStatus::Aborted(
                        Error::BudgetExceeded {
                            spent,
                            budget: target,
                            step,
                        }
                        .to_string(),
                    );
                    break 'epochs;
                }
            }
        }
        report.epoch_losses.push(loss_sum / steps_per_epoch as f64);
        let due = config.eval_every > 0 && epoch % config.eval_every == 0;
        if due || epoch == config.epochs {
            let m: EvalMetrics = evaluate(
                &params,
                dataset,
                &eval_opts,
                errors.as_ref().map(|e| (e, config.renormalize)),
            )?;
            report.history.push(EpochMetrics {
                epoch,
                ndcg: m.ndcg,
                hit: m.hit,
                epsilon: if sigma > 0.0 {
                    ledger_epsilon(&rdp_step, &ledger.rdp_orders, step, delta)?
                } else {
                    0.0
                },
            });
        }
    }
    report.final_epsilon = if sigma > 0.0 {
        Some(ledger_epsilon(&rdp_step, &ledger.rdp_orders, step, delta)?)
    } else {
        None
    };
    report.ledger = ledger;
    if config.record_runtime {
        report.runtime_seconds = Some(started.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome {
        params,
        report,
        errors,
    })
}
