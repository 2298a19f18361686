use proptest::prelude::*;
use rand::Rng as _;

use dptrain::numkit::{Array, Rng, Stream};
use dptrain::reattention::{
    attention_correction, distraction_sweep, effective_errors, key_variances, propagate_layernorm,
    propagate_linear, propagate_relu, propagate_residual, reattend, relu_moments, GaussianMoments,
};
use dptrain::seqdata::{SequenceBatch, PAD};
use dptrain::transformer::{forward, init_params, ModelConfig, ModelParams, Mode, MAX_CORRECTION_EXPONENT};

fn setup(seed: u64) -> (ModelParams<f64>, SequenceBatch, Vec<f64>) {
    let (m, l) = (20, 6);
    let mut cfg = ModelConfig::new(m, l);
    cfg.d_model = 8;
    cfg.d_ff = 8;
    cfg.n_heads = 2;
    cfg.dropout = 0.0;
    let params = init_params(&cfg, &mut Rng::new(seed, Stream::Init)).unwrap();
    let mut rng = Rng::new(seed, Stream::Data);
    let seqs: Vec<Vec<usize>> = (0..4)
        .map(|_| {
            let n = rng.random_range(2..=l + 1);
            (0..n).map(|_| rng.random_range(1..=m)).collect()
        })
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let batch = SequenceBatch::from_sequences(&refs, (0..4).collect(), l);
    // Zipf-like inclusion rates: token t is rarer as t grows.
    let freq = (1..=m).map(|t| 0.6 / t as f64).collect();
    (params, batch, freq)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reattended_rows_stay_distributions(
        raw in prop::collection::vec(-4.0f64..4.0, 1..10),
        var in prop::collection::vec(0.0f64..3.0, 10),
        q in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = raw.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let row: Vec<f64> = e.iter().map(|x| x / z).collect();
        let var = &var[..row.len()];
        let out = reattend(&row, &q, var, true).unwrap();
        prop_assert!((out.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.scores.iter().all(|&x| x >= 0.0));
        // Relative to a lower-variance key, a higher-variance key never gains share.
        for i in 0..row.len() {
            for j in 0..row.len() {
                if var[i] >= var[j] && row[i] > 0.0 && row[j] > 0.0 {
                    prop_assert!(out.scores[i] / out.scores[j] <= row[i] / row[j] * (1.0 + 1e-9));
                }
            }
        }
    }

    #[test]
    fn relu_moments_are_valid(mu in -5.0f64..5.0, sd in 0.0f64..3.0) {
        let (m, v) = relu_moments(mu, sd * sd);
        prop_assert!(m >= mu.max(0.0) - 1e-12);
        prop_assert!(v >= 0.0 && v <= sd * sd + 1e-12);
    }

    #[test]
    fn key_variances_grow_with_noise(seed in 0u64..50, sigma in 0.1f64..3.0) {
        let (params, batch, freq) = setup(seed);
        let low = key_variances(&params, &effective_errors(sigma, 16.0, &freq).unwrap(), &batch, true).unwrap();
        let high = key_variances(&params, &effective_errors(2.0 * sigma, 16.0, &freq).unwrap(), &batch, true).unwrap();
        // Later blocks see a mean path that already carries the earlier
        // corrections, so only block 0 is monotone in the noise.
        for (bi, (lb, hb)) in low.iter().zip(&high).enumerate() {
            for (r, (&a, &b)) in lb.iter().zip(hb).enumerate() {
                prop_assert!(a >= 0.0 && b >= 0.0);
                if bi == 0 {
                    prop_assert!(b >= a);
                }
                if batch.token_ids[r] == PAD {
                    prop_assert_eq!(b, 0.0);
                } else {
                    prop_assert!(a > 0.0);
                }
            }
        }
    }
}

#[test]
fn correction_shifts_attention_away_from_rare_tokens() {
    let (params, batch, freq) = setup(3);
    let errors = effective_errors(0.5, 16.0, &freq).unwrap();
    let corr = attention_correction(&params, &errors, &batch, true).unwrap();
    let mut rng = Rng::new(0, Stream::Dropout);
    let (_, plain) = forward(&params, &batch, Mode::Eval, None, &mut rng).unwrap();
    let (_, fixed) = forward(&params, &batch, Mode::Eval, Some(&corr), &mut rng).unwrap();
    let l = batch.seq_len;
    let block0 = &corr.key_variances[0];
    let (p0, p1) = (&plain.blocks[0].probs, &fixed.blocks[0].probs);
    let heads = params.config.n_heads;
    for b in 0..batch.batch_size {
        for h in 0..heads {
            for t in 0..l {
                let row = ((b * heads + h) * l + t) * l;
                let total: f64 = p1[row..row + l].iter().sum();
                if total == 0.0 {
                    continue;
                }
                assert!((total - 1.0).abs() < 1e-12);
                // The key with the largest variance loses share, the smallest gains.
                let keys: Vec<usize> = (0..=t).filter(|&j| batch.token_ids[b * l + j] != PAD).collect();
                let by_var = |j: &usize| block0[b * l + *j];
                let hi = *keys.iter().max_by(|x, y| by_var(x).total_cmp(&by_var(y))).unwrap();
                let lo = *keys.iter().min_by(|x, y| by_var(x).total_cmp(&by_var(y))).unwrap();
                if by_var(&hi) > by_var(&lo) {
                    assert!(p1[row + hi] <= p0[row + hi] + 1e-12);
                    assert!(p1[row + lo] >= p0[row + lo] - 1e-12);
                }
            }
        }
    }
    assert_eq!(fixed.clamped, 0);
}

#[test]
fn huge_variances_are_clamped() {
    let q = [10.0, 10.0];
    let out = reattend(&[0.5, 0.5], &q, &[1e6, 0.0], false).unwrap();
    assert_eq!(out.clamped, 1);
    let expect = 0.5 * (-MAX_CORRECTION_EXPONENT).exp();
    assert!((out.scores[0] / expect - 1.0).abs() < 1e-12);
    assert_eq!(out.scores[1], 0.5);
    assert!(reattend(&[0.5], &q, &[0.1, 0.2], true).is_err());
}

#[test]
fn composed_propagation_matches_monte_carlo() {
    // x -> layernorm -> linear -> ReLU -> residual, against sampling.
    let d = 6;
    let mut rng = Rng::new(11, Stream::MonteCarlo);
    let mean: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let w_mean: Vec<f64> = (0..d * d).map(|_| 0.4 * rng.normal()).collect();
    let (vx, vw) = (0.01, 0.0004);
    let gain = Array::filled(&[d], 1.0);
    let bias = Array::zeros(&[d]);
    let x = GaussianMoments::new(Array::from_vec(&[1, d], mean.clone()).unwrap(), vx).unwrap();
    let gain_m = GaussianMoments::new(gain, vw).unwrap();
    let bias_m = GaussianMoments::new(bias, vw).unwrap();
    let w = GaussianMoments::new(Array::from_vec(&[d, d], w_mean.clone()).unwrap(), vw).unwrap();
    let n1 = propagate_layernorm(&x, &gain_m, &bias_m, 1e-5).unwrap();
    let h = propagate_relu(&propagate_linear(&n1, &w).unwrap()).unwrap();
    let y = propagate_residual(&x, &h).unwrap();

    let n = 200_000;
    let mut acc = vec![0.0; d];
    let mut acc2 = vec![0.0; d];
    let mut xs = vec![0.0; d];
    let mut ns = vec![0.0; d];
    for _ in 0..n {
        for i in 0..d {
            xs[i] = mean[i] + vx.sqrt() * rng.normal();
        }
        let mu = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        for i in 0..d {
            let g = 1.0 + vw.sqrt() * rng.normal();
            let b = vw.sqrt() * rng.normal();
            ns[i] = (xs[i] - mu) / (var + 1e-5).sqrt() * g + b;
        }
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                s += ns[i] * (w_mean[i * d + j] + vw.sqrt() * rng.normal());
            }
            let out = xs[j] + s.max(0.0);
            acc[j] += out;
            acc2[j] += out * out;
        }
    }
    let mut mc_var = 0.0;
    for j in 0..d {
        let m = acc[j] / n as f64;
        mc_var += (acc2[j] / n as f64 - m * m) / d as f64;
        assert!((m - y.mean.data()[j]).abs() < 0.05 * (1.0 + m.abs()), "mean {j}: {m} vs {}", y.mean.data()[j]);
    }
    // The analytic path is a first-order approximation through layernorm.
    let ratio = y.variance / mc_var;
    assert!((0.7..1.4).contains(&ratio), "{} vs {mc_var}", y.variance);
}

#[test]
fn distraction_sweep_tracks_the_prediction() {
    let rows = distraction_sweep(&[0.0, 0.25, 0.5], 50_000, 1).unwrap();
    assert_eq!(rows[0].observed_inflation, 1.0);
    for r in &rows {
        assert!((r.observed_inflation / r.predicted_inflation - 1.0).abs() < 0.1, "{r:?}");
        for (a, b) in r.reattended.iter().zip(&r.noiseless) {
            assert!((a / b - 1.0).abs() < 0.2);
        }
    }
    assert!(rows[2].observed_inflation > rows[1].observed_inflation);
}
