use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::calibration::weight_thresholds;
use crate::format::FloatFormat;
use crate::graph::{Convolution, InnerProduct, Pool};
use crate::quantize::{quantize_tensor, Scale, Threshold};

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn f84() -> FloatFormat {
    FloatFormat::new(8, 4).unwrap()
}

fn codes_of(format: FloatFormat, alpha: f64, betas: &[f64], shape: Vec<usize>) -> QTensor {
    let book = format.codebook();
    QTensor { shape, codes: betas.iter().map(|&b| book.round(b).unwrap()).collect(), format, scale: Scale::PerTensor(alpha) }
}

fn weights_for(w: &Tensor, format: FloatFormat) -> QuantizedWeights {
    let (gamma, degenerate) = weight_thresholds(w);
    QuantizedWeights { codes: quantize_tensor(w, &Threshold::PerChannel(gamma.clone()), format).unwrap(), gamma, degenerate }
}

fn conv_node(weight: Tensor, bias: Vec<f32>, pad: usize, groups: usize) -> Node {
    Node::new("conv", Op::Convolution(Convolution { weight, bias, stride: 1, pad, groups }), &["x"], &["y"])
}

#[test]
fn reference_identity_conv_and_eltwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, vec![3, 4, 4]);
    let mut w = Tensor::zeros(vec![3, 3, 1, 1]);
    for c in 0..3 {
        w.data[c * 3 + c] = 1.0;
    }
    let g = Graph::new(vec![
        Node::new("in", Op::Input { shape: vec![3, 4, 4] }, &[], &["x"]),
        conv_node(w, vec![], 0, 1),
        Node::new("sum", Op::EltwiseAdd, &["x", "x"], &["z"]),
    ]);
    let out = reference_forward(&g, &x).unwrap();
    assert_eq!(out["y"], x);
    assert_eq!(out["z"].data, x.data.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
    let bad = Tensor::zeros(vec![3, 4, 5]);
    assert!(matches!(reference_forward(&g, &bad), Err(EngineError::InputShape { .. })));
}

#[test]
fn reference_pooling() {
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, -6.0, 4.0, 3.0]);
    let node = Node::new("p", Op::MaxPool(Pool::window(2, 2, 0)), &["x"], &["y"]);
    assert_eq!(eval_float_node(&node, &[&x]).unwrap().data, vec![4.0]);
    let node = Node::new("p", Op::AvgPool(Pool::global()), &["x"], &["y"]);
    assert_eq!(eval_float_node(&node, &[&x]).unwrap().data, vec![0.5]);
}

#[test]
fn all_zero_weights_give_zero_codes() {
    let f = f84();
    let w = Tensor::zeros(vec![2, 3, 3, 3]);
    let qw = weights_for(&w, f);
    assert_eq!(qw.degenerate, vec![0, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = quantize_tensor(&random(&mut rng, vec![3, 5, 5]), &Threshold::PerTensor(1.0), f).unwrap();
    let node = conv_node(w, vec![], 1, 1);
    let mac = PreparedMac::new(&node, Some(&qw), &[3, 5, 5], f, 1.0 / 1984.0, &EngineConfig::default()).unwrap();
    let y = mac.run(&x, 0.01).unwrap();
    let book = f.codebook();
    assert!(y.codes.iter().all(|&c| book.value(c) == 0.0));
}

#[test]
fn identity_conv_keeps_codes() {
    let f = f84();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = quantize_tensor(&random(&mut rng, vec![4, 3, 3]), &Threshold::PerTensor(1.0), f).unwrap();
    let alpha = x.scale.per_tensor().unwrap();
    // depthwise identity: weight 1 in every channel, so α_w = 1 / β_max
    let w = Tensor::new(vec![4, 1, 1, 1], vec![1.0; 4]);
    let qw = weights_for(&w, f);
    let node = conv_node(w, vec![], 0, 4);
    let mac = PreparedMac::new(&node, Some(&qw), &[4, 3, 3], f, alpha, &EngineConfig::default()).unwrap();
    // α_z = α_x·α_w makes the requantization ratio exactly 1
    let alpha_z = alpha * qw.codes.scale.for_channel(0);
    let y = mac.run(&x, alpha_z).unwrap();
    let book = f.codebook();
    let expected: Vec<f64> = x.codes.iter().map(|&c| book.value(c) * 1984.0).collect();
    let got: Vec<f64> = y.codes.iter().map(|&c| book.value(c)).collect();
    for (e, g) in expected.iter().zip(&got) {
        assert_eq!(book.value(book.round_clamped(*e)), *g);
    }
    // same scale in and out through a 1×1 identity with unit weight codes
    let ones = FloatFormat::new(2, 1).unwrap();
    let unit = QuantizedWeights {
        codes: QTensor { shape: vec![4, 1, 1, 1], codes: vec![ones.round_to_format(1.0).unwrap(); 4], format: ones, scale: Scale::PerChannel(vec![1.0; 4]) },
        gamma: vec![1.0; 4],
        degenerate: vec![],
    };
    let mac = PreparedMac::new(&node, Some(&unit), &[4, 3, 3], f, alpha, &EngineConfig::default()).unwrap();
    assert_eq!(mac.run(&x, alpha).unwrap().codes, x.codes);
}

#[test]
fn bias_enters_the_accumulator() {
    let f = f84();
    let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]);
    let qw = weights_for(&w, f);
    let alpha_w = qw.codes.scale.for_channel(0);
    let node = conv_node(w, vec![0.5], 0, 1);
    let x = codes_of(f, 0.25, &[0.0, 2.0], vec![1, 1, 2]);
    let mac = PreparedMac::new(&node, Some(&qw), &[1, 1, 2], f, 0.25, &EngineConfig::default()).unwrap();
    let totals = mac.totals(&x).unwrap();
    let bias_int = (0.5 / (0.25 * alpha_w)).round_ties_even();
    assert_eq!(totals, vec![bias_int, 2.0 * 1984.0 + bias_int]);
    let real = mac.real_outputs(&x).unwrap();
    assert!((real[0] - 0.5).abs() < 1e-12 && (real[1] - 1.0).abs() < 1e-12);

    let out_mode = EngineConfig { bias_mode: BiasMode::Output, ..EngineConfig::default() };
    let mac = PreparedMac::new(&node, Some(&qw), &[1, 1, 2], f, 0.25, &out_mode).unwrap();
    assert_eq!(mac.totals(&x).unwrap(), vec![0.0, 2.0 * 1984.0]);
    let y = mac.run(&x, 0.125).unwrap();
    let book = f.codebook();
    assert_eq!(y.codes.iter().map(|&c| book.value(c)).collect::<Vec<_>>(), vec![4.0, 8.0]);
}

#[test]
fn eltwise_examples() {
    let f = f84();
    let book = f.codebook();
    let a = codes_of(f, 0.5, &[3.0], vec![1]);
    let b = codes_of(f, 0.5, &[4.0], vec![1]);
    let y = quantized_eltwise_add("sum", &[&a, &b], 0.5).unwrap();
    assert_eq!(book.value(y.codes[0]), 7.0);

    let x = codes_of(f, 0.5, &[-5.0, 12.0, 1984.0], vec![3]);
    let neg = codes_of(f, 0.5, &[5.0, -12.0, -1984.0], vec![3]);
    let y = quantized_eltwise_add("sum", &[&x, &neg], 0.5).unwrap();
    assert!(y.codes.iter().all(|&c| book.value(c) == 0.0));

    // α ratio 0.5: 0.5·6 + 5 = 8
    let fine = codes_of(f, 0.25, &[6.0], vec![1]);
    let coarse = codes_of(f, 0.5, &[5.0], vec![1]);
    let y = quantized_eltwise_add("sum", &[&fine, &coarse], 0.5).unwrap();
    assert_eq!(book.value(y.codes[0]), 8.0);

    assert!(matches!(quantized_eltwise_add("sum", &[&coarse, &fine], 0.25), Err(EngineError::ScaleOrder { .. })));
}

#[test]
fn pointwise_examples() {
    let f = f84();
    let book = f.codebook();
    let x = codes_of(f, 1.0, &[-2.0, 0.0, 5.0], vec![3]);
    let y = quantized_relu(&x);
    assert_eq!(y.codes.iter().map(|&c| book.value(c)).collect::<Vec<_>>(), vec![0.0, 0.0, 5.0]);

    let x = codes_of(f, 1.0, &[-6.0, 4.0, -1.0, 2.0], vec![1, 2, 2]);
    let y = quantized_max_pool("p", &x, &Pool::window(2, 2, 0)).unwrap();
    assert_eq!(book.value(y.codes[0]), 4.0);

    let y = quantized_downscale("d", &x, 1.0).unwrap();
    assert_eq!(y.codes, x.codes);
    let y = quantized_downscale("d", &x, 2.0).unwrap();
    assert_eq!(y.codes.iter().map(|&c| book.value(c)).collect::<Vec<_>>(), vec![-3.0, 2.0, -0.0, 1.0]);

    let a = codes_of(f, 1.0, &[1.0, 2.0], vec![2, 1, 1]);
    let b = codes_of(f, 1.0, &[3.0], vec![1, 1, 1]);
    let y = quantized_concat("c", &[&a, &b], 0, 1.0).unwrap();
    assert_eq!(y.shape, vec![3, 1, 1]);
    assert_eq!(y.codes.iter().map(|&c| book.value(c)).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
    let c = codes_of(f, 0.5, &[3.0], vec![1, 1, 1]);
    assert_eq!(quantized_concat("c", &[&a, &c], 0, 1.0), Err(EngineError::ConcatScaleMismatch("c".into())));
}

#[test]
fn relu_and_maxpool_commute_with_dequantization() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, p) in [(8, 4), (6, 1), (5, 3)] {
        let f = FloatFormat::new(n, p).unwrap();
        let x = quantize_tensor(&random(&mut rng, vec![2, 6, 6]), &Threshold::PerTensor(0.8), f).unwrap();
        let deq = dequantize_tensor(&x);
        let relu = Node::new("r", Op::ReLU, &["x"], &["y"]);
        assert_eq!(dequantize_tensor(&quantized_relu(&x)), eval_float_node(&relu, &[&deq]).unwrap());
        let pool = Pool::window(3, 2, 1);
        let mp = Node::new("m", Op::MaxPool(pool), &["x"], &["y"]);
        assert_eq!(dequantize_tensor(&quantized_max_pool("m", &x, &pool).unwrap()), eval_float_node(&mp, &[&deq]).unwrap());
    }
}

#[test]
fn compare_examples() {
    let a = Tensor::new(vec![3], vec![1.0, 2.0, -4.0]);
    let r = compare_outputs(&a, &a).unwrap();
    assert_eq!((r.max_abs_err, r.max_rel_err, r.top1_match), (0.0, 0.0, true));
    let b = Tensor::new(vec![3], a.data.iter().map(|v| v + 1e-3).collect());
    let r = compare_outputs(&a, &b).unwrap();
    assert!((r.max_abs_err - 1e-3).abs() < 1e-6);
    let c = Tensor::new(vec![3], vec![1.5, 2.5, -3.0]);
    assert!(compare_outputs(&a, &c).unwrap().top1_match);
    assert!(compare_outputs(&a, &Tensor::zeros(vec![2])).is_err());
}

fn mac_layer(terms: usize) -> (Node, QuantizedWeights) {
    let f = f84();
    let w = Tensor::new(vec![1, terms], vec![-1.0; terms]);
    let node = Node::new("fc", Op::InnerProduct(InnerProduct { weight: w.clone(), bias: vec![] }), &["x"], &["y"]);
    (node, weights_for(&w, f))
}

#[test]
fn accumulator_guard_at_capacity() {
    let f = f84();
    let config = EngineConfig { accumulator_bits: Some(24), ..EngineConfig::default() };
    // (2^23 - 1) / 1984² = 2.13…: two terms fit
    let (node, w) = mac_layer(2);
    let mac = PreparedMac::new(&node, Some(&w), &[2], f, 1.0, &config).unwrap();
    assert_eq!(mac.report().kind, AccumulatorKind::Int64);
    let x = codes_of(f, 1.0, &[-1984.0, -1984.0], vec![2]);
    let totals = mac.totals(&x).unwrap();
    assert_eq!(totals, vec![2.0 * 1984.0 * 1984.0]);
    assert!(totals[0] < 2f64.powi(23));

    let (node, w) = mac_layer(3);
    match PreparedMac::new(&node, Some(&w), &[3], f, 1.0, &config) {
        Err(EngineError::AccumulatorTooNarrow { q, limit, n_max, terms, .. }) => {
            assert_eq!((q, limit, terms, n_max.as_str()), (25, 24, 3, "2"));
        }
        other => panic!("expected a plan error, got {other:?}"),
    }
}

#[test]
fn fixed64_rejects_low_precision_formats() {
    // n = 8, p = 2: β_max = 7·2^30, a single product needs 72 bits
    let f = FloatFormat::new(8, 2).unwrap();
    let w = Tensor::new(vec![1, 1], vec![1.0]);
    let node = Node::new("fc", Op::InnerProduct(InnerProduct { weight: w.clone(), bias: vec![] }), &["x"], &["y"]);
    let qw = weights_for(&w, f);
    assert!(PreparedMac::new(&node, Some(&qw), &[1], f, 1.0, &EngineConfig::fixed64()).is_err());
    let mac = PreparedMac::new(&node, Some(&qw), &[1], f, 1.0, &EngineConfig::default()).unwrap();
    assert_eq!(mac.report().kind, AccumulatorKind::Int128);
}

#[test]
fn bucket_accumulation_is_exact() {
    // n = 8, p = 0: β_max = 2^126, beyond i64 tables
    let f = FloatFormat::new(8, 0).unwrap();
    let bmax = f.beta_max();
    let w = Tensor::new(vec![1, 3], vec![1.0, 1.0, -1.0]);
    let node = Node::new("fc", Op::InnerProduct(InnerProduct { weight: w.clone(), bias: vec![] }), &["x"], &["y"]);
    let qw = weights_for(&w, f);
    let mac = PreparedMac::new(&node, Some(&qw), &[3], f, 1.0, &EngineConfig::default()).unwrap();
    assert_eq!(mac.report().kind, AccumulatorKind::Buckets);
    let x = codes_of(f, 1.0, &[bmax, 1.0, 1.0], vec![3]);
    // 2^252 + 1 - 1
    assert_eq!(mac.totals(&x).unwrap(), vec![bmax * bmax]);
}

/// conv → relu → global avgpool → fc with thresholds from the float run.
fn small_model(format: FloatFormat, rng: &mut ChaCha8Rng) -> (QuantizedModel, Tensor) {
    let graph = Graph::new(vec![
        Node::new("in", Op::Input { shape: vec![2, 5, 5] }, &[], &["x"]),
        Node::new("conv", Op::Convolution(Convolution { weight: random(rng, vec![3, 2, 3, 3]), bias: vec![0.1, -0.2, 0.05], stride: 1, pad: 1, groups: 1 }), &["x"], &["c"]),
        Node::new("relu", Op::ReLU, &["c"], &["r"]),
        Node::new("gap", Op::AvgPool(Pool::global()), &["r"], &["g"]),
        Node::new("fc", Op::InnerProduct(InnerProduct { weight: random(rng, vec![4, 3]), bias: vec![0.3, 0.0, -0.1, 0.2] }), &["g"], &["logits"]),
        Node::new("out", Op::Output, &["logits"], &[]),
    ]);
    let x = random(rng, vec![2, 5, 5]);
    let reference = reference_forward(&graph, &x).unwrap();
    let mut thresholds = BTreeMap::new();
    for (t, v) in &reference {
        thresholds.insert(t.clone(), (v.max_abs() as f64).max(1e-3));
    }
    let shared = thresholds["r"];
    thresholds.insert("c".into(), shared);
    let mut weights = BTreeMap::new();
    for n in &graph.nodes {
        match &n.op {
            Op::Convolution(c) => weights.insert(n.id.clone(), weights_for(&c.weight, format)),
            Op::InnerProduct(ip) => weights.insert(n.id.clone(), weights_for(&ip.weight, format)),
            _ => None,
        };
    }
    let model = QuantizedModel { graph, activation_format: format, weight_format: format, bias_mode: BiasMode::Accumulator, thresholds, weights };
    (model, x)
}

#[test]
fn wide_format_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = FloatFormat::new(16, 15).unwrap();
    let (model, x) = small_model(f, &mut rng);
    let plan = ExecutionPlan::new(&model, &EngineConfig::fixed64()).unwrap();
    let run = quantized_forward(&plan, &x).unwrap();
    let reference = reference_outputs(&model.graph, &x).unwrap();
    let r = compare_outputs(&reference[0], run.logits()).unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
    assert_eq!(plan.accumulator_reports().len(), 3);
}

#[test]
fn repeated_runs_are_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (model, _) = small_model(f84(), &mut rng);
    let plan = ExecutionPlan::new(&model, &EngineConfig::default()).unwrap();
    let zero = Tensor::zeros(vec![2, 5, 5]);
    let a = quantized_forward(&plan, &zero).unwrap();
    let b = quantized_forward(&plan, &zero).unwrap();
    assert_eq!(a, b);
    assert_eq!(plan.order(), vec!["in", "conv", "relu", "gap", "fc", "out"]);
}

#[test]
fn unfolded_layers_cannot_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut model, _) = small_model(f84(), &mut rng);
    model.graph.nodes[2].op = Op::Scale { factors: vec![1.0; 3] };
    assert!(matches!(ExecutionPlan::new(&model, &EngineConfig::default()), Err(EngineError::Unsupported { .. })));
}
