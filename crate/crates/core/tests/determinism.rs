//! Kept in its own binary: it flips the process-wide execution mode.

use slbf::data::{synth_dataset, SynthSpec};
use slbf::exec;
use slbf::model_io;
use slbf::nn::{LayerSpec, NetworkSpec, OptimizerConfig};
use slbf::slbf::SlbfLayerConfig;
use slbf::train::{train, TrainConfig};
use slbf::{ConvGeometry, Fraction};

fn run() -> (Vec<u8>, Vec<u64>) {
    let half = Fraction::new(1, 2).unwrap();
    let spec = NetworkSpec {
        input: [4, 8, 8],
        layers: vec![
            LayerSpec::SlbfConv(SlbfLayerConfig::new(ConvGeometry::new(4, 8, 3).with_padding(1), half, half, true)),
            LayerSpec::BatchNorm { affine: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Conv {
                geometry: ConvGeometry::new(8, 8, 3),
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 32, outputs: 4 },
            LayerSpec::SoftmaxCrossEntropy,
        ],
    };
    let data = synth_dataset(
        &SynthSpec {
            dims: [4, 8, 8],
            classes: 4,
            samples: 96,
            noise: 1.0,
        },
        11,
    )
    .unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerConfig::sgd(0.05, 0.9),
        batch_size: 24,
        epochs: 3,
        seed: 7,
        ..TrainConfig::default()
    };
    let (mut net, log) = train(&spec, &data, Some(&data), &cfg, |_| {}).unwrap();
    net.freeze().unwrap();
    let bytes = model_io::save(&net).unwrap();
    (bytes, log.iter().map(|m| m.train_loss.to_bits()).collect())
}

#[test]
fn deterministic_training_is_bitwise_reproducible() {
    exec::set_deterministic(true);
    let a = run();
    let b = run();
    assert_eq!(a, b);
    exec::set_sequential(true);
    let c = run();
    exec::set_sequential(false);
    assert_eq!(a, c, "sequential and parallel runs differ");
}
