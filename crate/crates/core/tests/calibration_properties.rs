//! Threshold sweep checked against a naive re-scoring of every candidate.

mod oracle;

use dfpq::calibration::{calibrate_network, ActivationThreshold, threshold_sweep, weight_thresholds, CalibrationConfig, SweepConfig};
use dfpq::graph::{Convolution, Graph, Node, Op};
use dfpq::{dequantize_tensor, quantize_tensor, FloatFormat, Tensor, Threshold};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sample(seed: u64, len: usize, shape: u8) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
    (0..len)
        .map(|_| match shape % 3 {
            0 => rng.gen_range(-1.0..1.0),
            1 => normal.sample(&mut rng),
            _ => normal.sample(&mut rng).powi(3),
        })
        .collect()
}

fn config(bins: usize) -> SweepConfig {
    SweepConfig { bins, ..SweepConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sweep_matches_naive_rescoring(
        seed in any::<u64>(), shape in any::<u8>(), len in 50usize..2000, n in 3u32..=6, p_frac in 0.0f64..1.0, bins in 70usize..300,
    ) {
        let p = ((n - 1) as f64 * p_frac) as u32;
        let f = FloatFormat::new(n, p).unwrap();
        let x = sample(seed, len, shape);
        let got = threshold_sweep(&x, &f, &config(bins)).unwrap();
        let want = oracle::sweep(&x, &f, bins);
        prop_assert_eq!(got.index, Some(want.index));
        prop_assert_eq!(got.gamma, want.gamma);
        prop_assert!((got.delta - want.delta).abs() <= 1e-12 * want.delta.abs().max(1e-300), "{} vs {}", got.delta, want.delta);
        let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(got.gamma <= max);
        prop_assert_eq!(threshold_sweep(&x, &f, &config(bins)).unwrap(), got);
    }

    #[test]
    fn identity_resampling_leaves_no_error_at_the_last_candidate(seed in any::<u64>(), shape in any::<u8>(), bins in 40usize..200) {
        let f = FloatFormat::new(5, 2).unwrap();
        let x = sample(seed, 500, shape);
        let got = threshold_sweep(&x, &f, &SweepConfig { bins, resample: false, ..SweepConfig::default() }).unwrap();
        prop_assert_eq!(got.delta, 0.0);
    }

    /// Pointwise errors can go either way (a value may sit on the coarse grid
    /// but not the fine one); the guaranteed bound `α·gap/2` cannot grow.
    #[test]
    fn per_channel_weights_have_no_larger_error_bound(seed in any::<u64>(), channels in 1usize..6, per in 1usize..20, n in 3u32..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::new(
            vec![channels, per],
            (0..channels * per).map(|k| rng.gen_range(-1.0f32..1.0) * (1 + k / per) as f32).collect(),
        );
        let f = FloatFormat::new(n, n / 2).unwrap();
        let values = f.enumerate_values();
        let gap = values.windows(2).map(|v| v[1] - v[0]).fold(0.0, f64::max);
        let (gammas, _) = weight_thresholds(&w);
        let global = gammas.iter().copied().fold(0.0, f64::max);
        let errors = |t: Threshold| {
            let d = dequantize_tensor(&quantize_tensor(&w, &t, f).unwrap());
            let mut e = vec![0.0f64; channels];
            for (k, (a, b)) in w.data.iter().zip(&d.data).enumerate() {
                e[k / per] = e[k / per].max((a - b).abs() as f64);
            }
            e
        };
        let tensor_bound = global / f.beta_max() * gap / 2.0;
        for (c, e) in errors(Threshold::PerChannel(gammas.clone())).iter().enumerate() {
            let channel_bound = gammas[c] / f.beta_max() * gap / 2.0;
            prop_assert!(channel_bound <= tensor_bound);
            prop_assert!(*e <= channel_bound * (1.0 + 1e-6), "channel {}: {} > {}", c, e, channel_bound);
        }
        for e in errors(Threshold::PerTensor(global)) {
            prop_assert!(e <= tensor_bound * (1.0 + 1e-6));
        }
    }
}

#[test]
fn input_record_delta_rescores_its_candidate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let weight = Tensor::new(vec![2, 2, 1, 1], (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
    let graph = Graph::new(vec![
        Node::new("in", Op::Input { shape: vec![2, 3, 3] }, &[], &["x"]),
        Node::new("conv", Op::Convolution(Convolution { weight, bias: vec![0.0; 2], stride: 1, pad: 0, groups: 1 }), &["x"], &["c"]),
        Node::new("relu", Op::ReLU, &["c"], &["r"]),
        Node::new("out", Op::Output, &["r"], &[]),
    ]);
    let batch: Vec<Tensor> = (0..8).map(|_| Tensor::new(vec![2, 3, 3], (0..18).map(|_| rng.gen_range(-2.0f32..2.0)).collect())).collect();
    let f = FloatFormat::new(4, 1).unwrap();
    let mut cfg = CalibrationConfig::new(f);
    cfg.activation_threshold = ActivationThreshold::Sweep(config(64));
    let cal = calibrate_network(&graph, &batch, &cfg).unwrap();
    let record = &cal.records["x"];
    let pooled: Vec<f64> = batch.iter().flat_map(|t| t.data.iter().map(|&v| v as f64)).collect();
    let want = oracle::sweep(&pooled, &f, 64);
    let index = record.candidate.unwrap();
    let rescored = want.scores.iter().find(|(i, _)| *i == index).unwrap().1;
    assert!((record.delta.unwrap() - rescored).abs() <= 1e-12 * rescored.max(1e-300));
    assert_eq!(record.gamma, vec![want.gamma]);
}
