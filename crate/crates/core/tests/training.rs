mod common;

use common::*;
use proptest::prelude::*;
use slbf::data::{load_mnist_dir, synth_dataset, LabeledDataset, MnistFiles, Normalization, SynthSpec};
use slbf::nn::{
    argmax_rows, softmax_cross_entropy, BatchNorm, Layer, LayerSpec, Linear, Network, NetworkSpec, Optimizer,
    OptimizerConfig, StepDecay, BN_EPS,
};
use slbf::slbf::{binarize_bank, project_selector, SlbfLayerConfig};
use slbf::train::{evaluate, train, train_network, TrainConfig};
use slbf::{ConvGeometry, Fraction, Tensor4};

fn frac(n: u32, d: u32) -> Fraction {
    Fraction::new(n, d).unwrap()
}

fn tiny_cnn(scaling: bool) -> NetworkSpec {
    NetworkSpec {
        input: [4, 8, 8],
        layers: vec![
            LayerSpec::SlbfConv(SlbfLayerConfig::new(
                ConvGeometry::new(4, 8, 3).with_padding(1),
                frac(1, 2),
                frac(1, 2),
                scaling,
            )),
            LayerSpec::BatchNorm { affine: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 128, outputs: 4 },
            LayerSpec::SoftmaxCrossEntropy,
        ],
    }
}

fn synth(samples: usize, seed: u64) -> LabeledDataset {
    synth_dataset(
        &SynthSpec {
            dims: [4, 8, 8],
            classes: 4,
            samples,
            noise: 0.8,
        },
        seed,
    )
    .unwrap()
}

fn lenet(slbf: bool) -> NetworkSpec {
    let conv2 = ConvGeometry::new(6, 16, 5);
    NetworkSpec {
        input: [1, 28, 28],
        layers: vec![
            LayerSpec::Conv {
                geometry: ConvGeometry::new(1, 6, 5).with_padding(2),
                bias: false,
            },
            LayerSpec::BatchNorm { affine: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            if slbf {
                LayerSpec::SlbfConv(SlbfLayerConfig::new(conv2, Fraction::ONE, frac(1, 4), true))
            } else {
                LayerSpec::Conv {
                    geometry: conv2,
                    bias: false,
                }
            },
            LayerSpec::BatchNorm { affine: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 400, outputs: 120 },
            LayerSpec::Relu,
            LayerSpec::Linear { inputs: 120, outputs: 84 },
            LayerSpec::Relu,
            LayerSpec::Linear { inputs: 84, outputs: 10 },
            LayerSpec::SoftmaxCrossEntropy,
        ],
    }
}

fn mean_loss(net: &Network, data: &LabeledDataset) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&idx).unwrap();
    softmax_cross_entropy(&net.infer(&x).unwrap(), &y).unwrap().0 as f64
}

#[test]
fn tiny_cnn_fits_synthetic_data() {
    for seed in 1..=3 {
        let data = synth(64, seed);
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::sgd(0.05, 0.9),
            batch_size: 16,
            epochs: 5,
            seed,
            ..TrainConfig::default()
        };
        let (net, _) = train(&tiny_cnn(true), &data, None, &cfg, |_| {}).unwrap();
        assert_eq!(evaluate(&net, &data, 64).unwrap(), 1.0, "seed {seed}");
    }
}

#[test]
fn clipped_proxies_do_not_move() {
    let data = synth(32, 9);
    let mut net = tiny_cnn(true).build(&mut rng(3)).unwrap();
    let Layer::Slbf(l) = &mut net.layers_mut()[0] else { panic!() };
    let r = &mut l.proxies_mut().unwrap().r.value;
    let frozen = [0usize, 5, 17, 40];
    for (n, &i) in frozen.iter().enumerate() {
        r[i] = if n % 2 == 0 { 1.5 } else { -2.25 };
    }
    let before: Vec<f32> = frozen.iter().map(|&i| r[i]).collect();
    let cfg = TrainConfig {
        optimizer: OptimizerConfig::sgd(0.1, 0.0),
        batch_size: 8,
        epochs: 2,
        ..TrainConfig::default()
    };
    train_network(&mut net, &data, None, &cfg, |_| {}).unwrap();
    let Layer::Slbf(l) = &net.layers()[0] else { panic!() };
    let p = l.proxies().unwrap();
    for (&i, &b) in frozen.iter().zip(&before) {
        assert_eq!(p.r.value[i].to_bits(), b.to_bits());
    }
}

#[test]
fn frozen_parts_are_sign_and_argmax_of_proxies() {
    let data = synth(32, 4);
    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 1,
        ..TrainConfig::default()
    };
    let (mut net, _) = train(&tiny_cnn(true), &data, None, &cfg, |_| {}).unwrap();
    let Layer::Slbf(l) = &net.layers()[0] else { panic!() };
    let p = l.proxies().unwrap().clone();
    let shape = *l.shape();
    let before = net.infer(&data.batch(&[0, 1, 2]).unwrap().0).unwrap();
    net.freeze().unwrap();
    let Layer::Slbf(l) = &net.layers()[0] else { panic!() };
    assert!(l.proxies().is_none());
    assert_eq!(l.bank(), &binarize_bank(&p.r.value, shape.m, shape.s, 3).unwrap());
    for (t, sel) in l.selectors().iter().enumerate() {
        let q = &p.q.value[t * shape.m * shape.k()..(t + 1) * shape.m * shape.k()];
        assert_eq!(sel, &project_selector(q, shape.m, shape.k(), t, true));
    }
    let after = net.infer(&data.batch(&[0, 1, 2]).unwrap().0).unwrap();
    assert_eq!(before, after);
}

#[test]
fn constant_predictor_scores_one_tenth() {
    let data = synth_dataset(
        &SynthSpec {
            dims: [1, 2, 2],
            classes: 10,
            samples: 200,
            noise: 0.3,
        },
        5,
    )
    .unwrap();
    let mut bias = vec![0.0; 10];
    bias[3] = 1.0;
    let head = Linear::from_parts(4, 10, vec![0.0; 40], bias).unwrap();
    let net = Network::new([1, 2, 2], vec![Layer::Flatten(Default::default()), Layer::Linear(head)]).unwrap();
    assert_eq!(evaluate(&net, &data, 64).unwrap(), 0.10);
}

#[test]
fn step_decay_schedule() {
    let s = StepDecay {
        factor: 0.1,
        interval: 15,
    };
    assert_eq!(s.lr_at(0.01, 0), 0.01);
    assert_eq!(s.lr_at(0.01, 14), 0.01);
    assert!((s.lr_at(0.01, 15) - 0.001).abs() < 1e-9);
}

#[test]
fn sgd_momentum_matches_hand_update() {
    let mut p = slbf::nn::Param::new(vec![1.0, -2.0]);
    let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5, 0.9));
    p.grad = vec![1.0, 2.0];
    opt.step(vec![&mut p], 0.5);
    assert_eq!(p.value, vec![0.5, -3.0]);
    opt.step(vec![&mut p], 0.5);
    // v = 0.9 * 1 + 1 = 1.9
    assert_eq!(p.value, vec![0.5 - 0.95, -3.0 - 1.9]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batchnorm_matches_f64_moments(seed in any::<u64>(), shift in -3.0f32..3.0, scale in 0.1f32..4.0) {
        let mut r = rng(seed);
        let x = Tensor4::from_fn([3, 2, 4, 4], |_| shift + scale * rand::Rng::gen_range(&mut r, -1.0f32..1.0));
        let mut bn = BatchNorm::new(2, false);
        let y = bn.forward_train(&x).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..16).map(move |i| (n, i)))
                .map(|(n, i)| x.at(n, c, i / 4, i % 4) as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / 48.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0;
            for n in 0..3 {
                for i in 0..16 {
                    let want = (x.at(n, c, i / 4, i % 4) as f64 - mean) / (var + BN_EPS as f64).sqrt();
                    prop_assert!((y.at(n, c, i / 4, i % 4) as f64 - want).abs() <= 1e-4);
                }
            }
            let unbiased = var * 48.0 / 47.0;
            prop_assert!((bn.running_mean[c] as f64 - 0.1 * mean).abs() <= 1e-5);
            prop_assert!((bn.running_var[c] as f64 - (0.9 + 0.1 * unbiased)).abs() <= 1e-4);
        }
    }

    #[test]
    fn softmax_matches_log_sum_exp(
        rows in prop::collection::vec(prop::collection::vec(-30.0f32..30.0, 5), 1..6),
        seed in any::<u64>(),
    ) {
        let n = rows.len();
        let labels: Vec<usize> = (0..n).map(|i| ((seed >> i) % 5) as usize).collect();
        let logits = Tensor4::new([n, 5, 1, 1], rows.concat()).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut want = 0.0f64;
        for (i, row) in rows.iter().enumerate() {
            let lse = row.iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
            want += lse - row[labels[i]] as f64;
            for c in 0..5 {
                let p = (row[c] as f64 - lse).exp();
                let t = if c == labels[i] { 1.0 } else { 0.0 };
                prop_assert!((grad.at(i, c, 0, 0) as f64 - (p - t) / n as f64).abs() <= 1e-6);
            }
        }
        prop_assert!((loss as f64 - want / n as f64).abs() <= 1e-4 * want.abs().max(1.0));
        prop_assert_eq!(argmax_rows(&logits).len(), n);
    }
}

#[test]
fn untrained_lenet_is_near_chance() {
    let Some(dir) = mnist_dir() else {
        eprintln!("skipped: MNIST not found");
        return;
    };
    let (_, test) = load_mnist_dir(&dir, &MnistFiles::default(), Normalization::default()).unwrap();
    for seed in 0..5 {
        let net = lenet(true).build(&mut rng(seed)).unwrap();
        let acc = evaluate(&net, &test, 1000).unwrap();
        assert!((0.05..=0.20).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn first_epoch_lowers_loss() {
    let Some(dir) = mnist_dir() else {
        eprintln!("skipped: MNIST not found");
        return;
    };
    let (train_set, _) = load_mnist_dir(&dir, &MnistFiles::default(), Normalization::default()).unwrap();
    let subset = train_set.take(2000);
    for (lr, seed) in [0.01, 0.1].into_iter().flat_map(|lr| (1..=3).map(move |s| (lr, s))) {
        let mut net = lenet(true).build(&mut rng(seed)).unwrap();
        let start = mean_loss(&net, &subset);
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::sgd(lr, 0.9),
            epochs: 1,
            seed,
            ..TrainConfig::default()
        };
        let log = train_network(&mut net, &subset, None, &cfg, |_| {}).unwrap();
        let end = mean_loss(&net, &subset);
        assert!(end < start, "lr {lr} seed {seed}: {start} -> {end}");
        assert!(log[0].train_loss.is_finite());
    }
}
