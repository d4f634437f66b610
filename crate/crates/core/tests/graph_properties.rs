//! Graph passes on randomly weighted networks that use every layer kind.

use std::collections::HashMap;

use dfpq::calibration::{calibrate_network, ActivationThreshold, CalibrationConfig, SweepConfig};
use dfpq::engine::reference_outputs;
use dfpq::graph::{
    assign_downscale_factors, fold_linear, merge_fork_join, needs_downscale_splice, preprocess, splice_identity_downscale,
    splice_out_unity, Convolution, Graph, InnerProduct, Node, Op, Pool,
};
use dfpq::{FloatFormat, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize, groups: usize, bias: bool) -> Op {
    Op::Convolution(Convolution {
        weight: random(rng, vec![cout, cin / groups, k, k], -0.5, 0.5),
        bias: if bias { (0..cout).map(|_| rng.gen_range(-0.2..0.2)).collect() } else { vec![0.0; cout] },
        stride: 1,
        pad: k / 2,
        groups,
    })
}

fn batchnorm(rng: &mut ChaCha8Rng, id: &str, c: usize, x: &str, y: &str) -> Vec<Node> {
    let (norm, scaled) = (format!("{id}/norm"), format!("{id}/scaled"));
    let v = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| (0..c).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f32>>();
    vec![
        Node::new(id, Op::BatchNorm { mean: v(rng, -0.3, 0.3), variance: v(rng, 0.2, 2.0), epsilon: 1e-5 }, &[x], &[&norm]),
        Node::new(format!("{id}_scale"), Op::Scale { factors: v(rng, 0.5, 1.5) }, &[&norm], &[&scaled]),
        Node::new(format!("{id}_bias"), Op::Bias { values: v(rng, -0.2, 0.2) }, &[&scaled], &[y]),
    ]
}

/// Small network in the shape of the fixture: folded batchnorm, grouped
/// convolution, residual join feeding max pooling, nested concats, global
/// average pooling and a classifier.
fn network(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![
        Node::new("data", Op::Input { shape: vec![3, 8, 8] }, &[], &["data"]),
        Node::new("conv1", conv(&mut rng, 8, 3, 3, 1, false), &["data"], &["conv1"]),
    ];
    nodes.extend(batchnorm(&mut rng, "bn1", 8, "conv1", "bn1"));
    nodes.extend([
        Node::new("relu1", Op::ReLU, &["bn1"], &["relu1"]),
        Node::new("pool1", Op::MaxPool(Pool::window(2, 2, 0)), &["relu1"], &["pool1"]),
        Node::new("conv2a", conv(&mut rng, 8, 8, 3, 4, true), &["pool1"], &["conv2a"]),
        Node::new("relu2a", Op::ReLU, &["conv2a"], &["relu2a"]),
        Node::new("conv2b", conv(&mut rng, 8, 8, 3, 1, false), &["relu2a"], &["conv2b"]),
    ]);
    nodes.extend(batchnorm(&mut rng, "bn2b", 8, "conv2b", "bn2b"));
    nodes.extend([
        Node::new("res", Op::EltwiseAdd, &["pool1", "bn2b"], &["res"]),
        Node::new("relu2", Op::ReLU, &["res"], &["relu2"]),
        Node::new("pool2", Op::MaxPool(Pool::window(2, 2, 0)), &["relu2"], &["pool2"]),
        Node::new("inc1", conv(&mut rng, 2, 8, 1, 1, true), &["pool2"], &["inc1"]),
        Node::new("inc1_relu", Op::ReLU, &["inc1"], &["inc1_relu"]),
        Node::new("inc3", conv(&mut rng, 2, 8, 3, 1, true), &["pool2"], &["inc3"]),
        Node::new("inc3_relu", Op::ReLU, &["inc3"], &["inc3_relu"]),
        Node::new("incpool", Op::MaxPool(Pool::window(3, 1, 1)), &["pool2"], &["incpool"]),
        Node::new("cat_ab", Op::Concat { axis: 0 }, &["inc1_relu", "inc3_relu"], &["cat_ab"]),
        Node::new("cat", Op::Concat { axis: 0 }, &["cat_ab", "incpool"], &["cat"]),
        Node::new("gap", Op::AvgPool(Pool::global()), &["cat"], &["gap"]),
        Node::new("fc", Op::InnerProduct(InnerProduct { weight: random(&mut rng, vec![5, 12], -0.5, 0.5), bias: vec![0.1; 5] }), &["gap"], &["fc"]),
        Node::new("prob", Op::Output, &["fc"], &[]),
    ]);
    Graph::new(nodes)
}

fn assert_equivalent(a: &Graph, b: &Graph, seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10 {
        let x = random(&mut rng, vec![3, 8, 8], -1.0, 1.0);
        let (ya, yb) = (&reference_outputs(a, &x).unwrap()[0], &reference_outputs(b, &x).unwrap()[0]);
        let scale = ya.max_abs().max(1e-6) as f64;
        for (u, v) in ya.data.iter().zip(&yb.data) {
            prop_assert!(((u - v).abs() as f64) <= 1e-4 * scale, "{} vs {}", u, v);
        }
    }
    Ok(())
}

fn unit_thresholds(g: &Graph, seed: u64) -> HashMap<String, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.nodes.iter().flat_map(|n| n.outputs.iter()).map(|t| (t.clone(), rng.gen_range(0.5..2.0))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn passes_preserve_outputs_and_are_idempotent(seed in any::<u64>()) {
        let g = network(seed);
        let merged = merge_fork_join(&g);
        prop_assert_eq!(merge_fork_join(&merged), merged.clone());
        assert_equivalent(&g, &merged, seed)?;

        let folded = fold_linear(&merged).unwrap();
        prop_assert_eq!(fold_linear(&folded).unwrap(), folded.clone());
        let unfolded = folded.nodes.iter().any(|n| matches!(n.op, Op::BatchNorm { .. } | Op::Scale { .. } | Op::Bias { .. }));
        prop_assert!(!unfolded);
        assert_equivalent(&g, &folded, seed)?;

        let spliced = splice_identity_downscale(&folded);
        prop_assert_eq!(splice_identity_downscale(&spliced), spliced.clone());
        assert_equivalent(&g, &spliced, seed)?;
        for join in spliced.nodes.iter().filter(|n| n.op.is_join()) {
            for t in &join.inputs {
                prop_assert!(!needs_downscale_splice(&spliced, t), "{} -> {}", t, join.id);
            }
        }
        prop_assert_eq!(preprocess(&g).unwrap(), spliced.clone());
        prop_assert_eq!(preprocess(&spliced).unwrap(), spliced.clone());

        let thresholds = unit_thresholds(&spliced, seed);
        let assigned = assign_downscale_factors(&spliced, &thresholds).unwrap();
        prop_assert_eq!(assign_downscale_factors(&assigned, &thresholds).unwrap(), assigned.clone());
        for n in &assigned.nodes {
            if let Op::IdentityDownscale { factor } = n.op {
                prop_assert!(factor > 0.0 && factor <= 1.0);
            }
        }
        let pruned = splice_out_unity(&assigned);
        prop_assert_eq!(splice_out_unity(&pruned), pruned.clone());
        assert_equivalent(&g, &pruned, seed)?;
    }
}

#[test]
fn calibrated_join_inputs_never_exceed_the_join_scale() {
    let g = preprocess(&network(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<Tensor> = (0..4).map(|_| random(&mut rng, vec![3, 8, 8], -1.0, 1.0)).collect();
    let mut config = CalibrationConfig::new(FloatFormat::new(8, 4).unwrap());
    config.activation_threshold = ActivationThreshold::Sweep(SweepConfig { bins: 512, ..SweepConfig::default() });
    let cal = calibrate_network(&g, &batch, &config).unwrap();
    let th = |t: &str| cal.thresholds[t];
    for n in &g.nodes {
        if n.op.is_join() {
            for t in &n.inputs {
                assert!(th(t) <= th(n.output()), "{t} into {}", n.id);
            }
        }
        if matches!(n.op, Op::IdentityDownscale { .. }) {
            assert!(th(&n.inputs[0]) <= th(n.output()), "{}", n.id);
        }
    }
    let assigned = assign_downscale_factors(&g, &cal.thresholds.clone().into_iter().collect()).unwrap();
    for n in &assigned.nodes {
        if let Op::IdentityDownscale { factor } = n.op {
            assert_eq!(factor, th(&n.inputs[0]) / th(n.output()));
        }
    }
}
