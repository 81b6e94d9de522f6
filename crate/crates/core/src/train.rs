//! Minibatch training loop and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, softmax_cross_entropy, Network, NetworkSpec, Optimizer, OptimizerConfig, StepDecay};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: StepDecay,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::sgd(0.01, 0.9),
            batch_size: 64,
            epochs: 20,
            seed: 1,
            schedule: StepDecay {
                factor: 0.1,
                interval: 15,
            },
            eval_batch: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::config("lr", "learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no test set was given.
    pub test_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch\ttrain_loss\ttest_acc";

impl EpochMetrics {
    /// One tab-separated record; a missing accuracy is written as `-`.
    pub fn record(&self) -> String {
        match self.test_acc {
            Some(a) => format!("{}\t{:.6}\t{:.4}", self.epoch, self.train_loss, a),
            None => format!("{}\t{:.6}\t-", self.epoch, self.train_loss),
        }
    }
}

/// Header plus one line per epoch.
pub fn metrics_file(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(out, "{}", m.record());
    }
    out
}

/// Per-epoch shuffle seed.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64))
}

/// Builds the network from `spec` with `cfg.seed` and trains it.
pub fn train(
    spec: &NetworkSpec,
    train_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Network, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = spec.build(&mut rng)?;
    let metrics = train_network(&mut net, train_set, test_set, cfg, on_epoch)?;
    Ok((net, metrics))
}

/// Trains an already built network in place.
///
/// Each iteration realizes every SLBF layer's bank and selectors from its
/// proxies, runs forward and loss, backpropagates, and updates all parameters.
pub fn train_network(
    net: &mut Network,
    train_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if train_set.dims() != net.input() {
        return Err(Error::dim(format!(
            "dataset items are {:?}, network expects {:?}",
            train_set.dims(),
            net.input()
        )));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let lr = cfg.schedule.lr_at(cfg.optimizer.lr(), epoch);
        let mut loss_sum = 0.0f64;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch(chunk)?;
            let logits = net.forward_train(&x)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss is {loss} at epoch {}, step {step}",
                    epoch + 1
                )));
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            net.backward(&grad)?;
            optimizer.step(net.params_mut(), lr);
            if !net.proxies_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite proxy after epoch {}, step {step}",
                    epoch + 1
                )));
            }
        }
        let test_acc = match test_set {
            Some(t) => Some(evaluate(net, t, cfg.eval_batch)?),
            None => None,
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            test_acc,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(metrics)
}

/// Top-1 accuracy in inference mode.
pub fn evaluate(net: &Network, data: &LabeledDataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let batch = batch.max(1);
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch) {
        let (x, y) = data.batch(chunk)?;
        let pred = argmax_rows(&net.infer(&x)?);
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::nn::LayerSpec;

    #[test]
    fn record_format() {
        let m = EpochMetrics {
            epoch: 3,
            train_loss: 0.1234567,
            test_acc: Some(0.98765),
        };
        assert_eq!(m.record(), "3\t0.123457\t0.9877");
        assert!(metrics_file(&[m]).starts_with("epoch\ttrain_loss\ttest_acc\n"));
    }

    #[test]
    fn empty_evaluation_is_error() {
        let spec = NetworkSpec {
            input: [1, 2, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::Linear { inputs: 4, outputs: 2 }],
        };
        let net = spec.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ds = synth_dataset(
            &SynthSpec {
                dims: [1, 2, 2],
                classes: 2,
                samples: 0,
                noise: 0.0,
            },
            0,
        )
        .unwrap();
        assert!(matches!(evaluate(&net, &ds, 10), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        cfg = TrainConfig {
            optimizer: OptimizerConfig::sgd(0.0, 0.9),
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
