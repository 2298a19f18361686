use proptest::prelude::*;
use rand::Rng as _;

use dptrain::clipping::{
    aux_memory_report, bench_clip, clip_factors, clipped_batch_gradient, fast_per_sample_norms, ghost_norm_linear,
    naive_per_sample_gradients, naive_per_sample_norms, ClipMethod, ClipMode,
};
use dptrain::numkit::{Array, Rng, Stream};
use dptrain::seqdata::SequenceBatch;
use dptrain::transformer::{backward_tape, forward, init_params, loss_next_token, ModelConfig, ModelParams, Mode};

fn model(seed: u64, m: usize, l: usize, d: usize, share: bool, dropout: f64) -> ModelParams<f64> {
    let mut cfg = ModelConfig::new(m, l);
    cfg.d_model = d;
    cfg.d_ff = d;
    cfg.n_heads = if d % 2 == 0 { 2 } else { 1 };
    cfg.share_embedding = share;
    cfg.dropout = dropout;
    init_params(&cfg, &mut Rng::new(seed, Stream::Init)).unwrap()
}

fn batch(seed: u64, b: usize, l: usize, m: usize) -> SequenceBatch {
    let mut rng = Rng::new(seed, Stream::Data);
    let seqs: Vec<Vec<usize>> = (0..b)
        .map(|_| {
            let n = rng.random_range(2..=l + 1);
            (0..n).map(|_| rng.random_range(1..=m)).collect()
        })
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    SequenceBatch::from_sequences(&refs, (0..b).collect(), l)
}

fn tape_norms(params: &ModelParams<f64>, batch: &SequenceBatch) -> Vec<f64> {
    let (logits, cache) = forward(params, batch, Mode::Eval, None, &mut Rng::new(0, Stream::Dropout)).unwrap();
    let loss = loss_next_token(&logits, &batch.targets).unwrap();
    let tape = backward_tape(params, &cache, &loss.grad).unwrap();
    fast_per_sample_norms(&tape, &params.ids()).unwrap().total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn fast_norms_match_instantiated(
        seed in any::<u64>(),
        b in 1usize..4,
        l in 1usize..7,
        m in 1usize..12,
        half_d in 1usize..4,
        share in any::<bool>(),
    ) {
        let params = model(seed, m, l, 2 * half_d, share, 0.0);
        let batch = batch(seed, b, l, m);
        let fast = tape_norms(&params, &batch);
        let naive = naive_per_sample_norms(&params, &batch).unwrap().total;
        for (f, n) in fast.iter().zip(&naive) {
            prop_assert!((f - n).abs() <= 1e-9 * n.max(1e-12), "{} vs {}", f, n);
        }
    }

    #[test]
    fn clipped_contributions_respect_the_bound(
        seed in any::<u64>(),
        b in 1usize..5,
        c in 1e-3f64..10.0,
        normalize in any::<bool>(),
    ) {
        let (m, l) = (9, 5);
        let params = model(seed, m, l, 4, true, 0.1);
        let batch = batch(seed ^ 1, b, l, m);
        let mode = if normalize { ClipMode::Normalize } else { ClipMode::Clip };
        let out = clipped_batch_gradient(&params, &batch, c, mode, Mode::Train, None, &mut Rng::new(seed, Stream::Dropout))
            .unwrap();
        for (f, n) in out.factors.iter().zip(&out.norms.total) {
            prop_assert!(f * n <= c * (1.0 + 1e-12));
            if !normalize && *n <= c {
                prop_assert_eq!(*f, 1.0);
            }
        }
        // The triangle inequality bounds the summed clipped gradient.
        prop_assert!(out.gradient.norm() <= b as f64 * c * (1.0 + 1e-9));
        let per_sample = naive_per_sample_gradients(&params, &batch, Some(&out.masks), None).unwrap();
        for (g, n) in per_sample.iter().zip(&out.norms.total) {
            prop_assert!((g.norm() - n).abs() <= 1e-9 * n.max(1e-12));
        }
    }

    #[test]
    fn ghost_norm_is_scale_equivariant(seed in any::<u64>(), s in 0.1f64..10.0) {
        let mut rng = Rng::new(seed, Stream::Custom(3));
        let a = Array::from_vec(&[2, 3, 4], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let g = Array::from_vec(&[2, 3, 5], (0..30).map(|_| rng.normal()).collect()).unwrap();
        let mut a2 = a.clone();
        a2.scale(s);
        let base = ghost_norm_linear(&a, &g).unwrap();
        let scaled = ghost_norm_linear(&a2, &g).unwrap();
        for (x, y) in base.iter().zip(&scaled) {
            prop_assert!((y - s * s * x).abs() <= 1e-9 * y.max(1e-12));
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let params = model(7, 15, 6, 8, true, 0.0);
    let batch = batch(7, 3, 6, 15);
    let wide = tape_norms(&params, &batch);
    let p32 = params.cast::<f32>();
    let (logits, cache) = forward(&p32, &batch, Mode::Eval, None, &mut Rng::new(0, Stream::Dropout)).unwrap();
    let loss = loss_next_token(&logits, &batch.targets).unwrap();
    let tape = backward_tape(&p32, &cache, &loss.grad).unwrap();
    let narrow = fast_per_sample_norms(&tape, &p32.ids()).unwrap().total;
    for (w, n) in wide.iter().zip(&narrow) {
        assert!((w - f64::from(*n)).abs() < 1e-4 * w, "{w} vs {n}");
    }
}

#[test]
fn invalid_clip_settings() {
    assert!(clip_factors(&[1.0f64], 0.0, ClipMode::Clip).is_err());
    assert!(clip_factors(&[1.0f64], f64::INFINITY, ClipMode::Normalize).is_err());
    assert!(clip_factors(&[f64::NAN], 1.0, ClipMode::Clip).is_err());
    assert_eq!(clip_factors(&[0.0f64, 4.0], f64::INFINITY, ClipMode::Clip).unwrap(), vec![1.0, 1.0]);
    assert!(aux_memory_report(0, 1, 1, 1, ClipMethod::Phantom).is_err());
    assert!("fancy".parse::<ClipMethod>().is_err());
    assert_eq!("ghost".parse::<ClipMethod>().unwrap(), ClipMethod::Ghost);
}

#[test]
fn bench_methods_agree_on_memory_ordering() {
    let mut floats = Vec::new();
    for method in [ClipMethod::Phantom, ClipMethod::Ghost, ClipMethod::Naive] {
        let r = bench_clip(4, 6, 40, 8, method, 1, 0).unwrap();
        assert_eq!(r.repeats, 1);
        assert!(r.mean_seconds >= r.min_seconds && r.min_seconds > 0.0);
        floats.push(r.memory.auxiliary_float_count);
    }
    // Ghost holds everything phantom holds plus the M×M and L×M Gram blocks.
    assert!(floats[1] > floats[0]);
    let ghost = aux_memory_report(4, 6, 40, 8, ClipMethod::Ghost).unwrap();
    assert_eq!(ghost.item("candidate_gram"), Some(4 * 40 * 40));
    assert_eq!(ghost.item("cross_gram"), Some(4 * 6 * 40));
    assert_eq!(floats[0] + 4 * 40 * 40 + 4 * 6 * 40, floats[1]);
}
