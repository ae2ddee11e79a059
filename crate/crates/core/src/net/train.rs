//! The training loop: refreshed quantizers each forward pass, accumulated
//! gradients, an optimizer step with endpoint projection, and per-epoch
//! learning-rate decay with JSON-lines metrics.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::data::{augment_flip_crop, Dataset};
use super::layers::Mode;
use super::optim::{OptimKind, Optimizer};
use super::Net;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub eta: f32,
    /// Per-epoch learning-rate multiplier.
    pub decay: f32,
    pub optimizer: OptimKind,
    pub weight_decay: f32,
    pub seed: u64,
    pub augment: bool,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            eta: 0.01,
            decay: 0.95,
            optimizer: OptimKind::sgd(),
            weight_decay: 0.0,
            seed: 0,
            augment: false,
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.eta
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f32, Tensor)> {
    let [n, classes, h, w] = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::ShapeMismatch(format!(
            "logits must be [N, C, 1, 1], got {:?}",
            logits.shape()
        )));
    }
    if n != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} logit rows for {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyTensor("cannot take a loss over zero samples".into()));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut loss = 0f64;
    for (s, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= classes {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits.data()[s * classes..(s + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        loss -= ((row[label] - max) as f64 - denom.ln()) / n as f64;
        for (c, &v) in row.iter().enumerate() {
            let p = ((v - max) as f64).exp() / denom;
            gd[s * classes + c] = ((p - if c == label { 1.0 } else { 0.0 }) / n as f64) as f32;
        }
    }
    Ok((loss as f32, grad))
}

/// Row-wise argmax class indices.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let [n, classes, _, _] = logits.shape();
    (0..n)
        .map(|s| {
            let row = &logits.data()[s * classes..(s + 1) * classes];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

fn count_correct(logits: &Tensor, labels: &[u8]) -> usize {
    predictions(logits)
        .iter()
        .zip(labels)
        .filter(|&(&p, &l)| p == l as usize)
        .count()
}

/// Top-1 accuracy over a whole split.
pub fn evaluate(net: &mut Net, data: &Dataset, batch: usize) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::EmptyTensor("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch.max(1)) {
        let (x, y) = data.gather(chunk);
        let tape = net.forward(&x, Mode::Eval)?;
        correct += count_correct(net.output_of(&tape), &y);
    }
    Ok(correct as f32 / data.len() as f32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub train_accuracy: f32,
    pub test_accuracy: Option<f32>,
    pub seconds: f64,
}

/// Runs the full loop; per-epoch stats go to `metrics` as JSON lines when
/// provided. The learning rate decays after each epoch.
pub fn train(
    net: &mut Net,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyTensor("cannot train on an empty dataset".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.eta, cfg.weight_decay)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = opt.lr();
        indices.shuffle(&mut rng);
        let mut loss_sum = 0f64;
        let mut correct = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let (mut x, y) = train_set.gather(chunk);
            if cfg.augment {
                augment_flip_crop(&mut x, 4, &mut rng);
            }
            net.zero_grads();
            let tape = net.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(net.output_of(&tape), &y)?;
            correct += count_correct(net.output_of(&tape), &y);
            loss_sum += loss as f64 * y.len() as f64;
            net.backward(&tape, grad)?;
            let mut params = net.params_mut();
            opt.step(&mut params);
            net.post_step()?;
        }
        let test_accuracy = match test_set {
            Some(data) => Some(evaluate(net, data, cfg.eval_batch)?),
            None => None,
        };
        let stats = EpochStats {
            epoch,
            lr,
            train_loss: (loss_sum / train_set.len() as f64) as f32,
            train_accuracy: correct as f32 / train_set.len() as f32,
            test_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(sink) = metrics.as_deref_mut() {
            serde_json::to_writer(&mut *sink, &stats)?;
            writeln!(sink)?;
        }
        history.push(stats);
        opt.decay_lr(cfg.decay);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_net, NetConfig, QuantPolicy};
    use rand::Rng;

    fn toy_dataset(samples: usize, seed: u64) -> Dataset {
        // Two square-wave classes with noise; separable by a tiny conv net.
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut images = Tensor::zeros([samples, 1, 28, 28]);
        let mut labels = Vec::with_capacity(samples);
        for s in 0..samples {
            let label = (s % 2) as u8;
            labels.push(label);
            for y in 0..28 {
                for x in 0..28 {
                    let stripe = if label == 0 { y / 7 % 2 } else { x / 7 % 2 };
                    *images.at_mut(s, 0, y, x) =
                        stripe as f32 - 0.5 + rng.gen_range(-0.05..0.05);
                }
            }
        }
        Dataset::new(images, labels).unwrap()
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        let logits = Tensor::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[2]).unwrap();
        let z: f32 = (1f32).exp() + (2f32).exp() + (3f32).exp();
        assert!((loss - (z.ln() - 3.0)).abs() < 1e-5);
        let p3 = (3f32).exp() / z;
        assert!((grad.at(0, 2, 0, 0) - (p3 - 1.0)).abs() < 1e-6);
        assert!((grad.data().iter().sum::<f32>()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::new([1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[5]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn predictions_take_argmax() {
        let logits = Tensor::new([2, 3, 1, 1], vec![0.1, 0.9, 0.0, 2.0, -1.0, 1.0]).unwrap();
        assert_eq!(predictions(&logits), vec![1, 0]);
    }

    #[test]
    fn train_rejects_bad_config() {
        let mut net = build_net("lenet", &NetConfig::default()).unwrap();
        let data = toy_dataset(4, 0);
        for bad in [
            TrainConfig {
                eta: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                decay: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(train(&mut net, &data, None, &bad, None).is_err());
        }
    }

    #[test]
    fn quantized_net_learns_a_separable_toy_problem() {
        let cfg = NetConfig {
            policy: QuantPolicy::Pa { m: 4, n: 3 },
            seed: 7,
            ..NetConfig::default()
        };
        let mut net = build_net("lenet", &cfg).unwrap();
        let data = toy_dataset(64, 3);
        let train_cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            eta: 0.02,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut sink = Vec::new();
        let history = train(
            &mut net,
            &data,
            Some(&data),
            &train_cfg,
            Some(&mut sink),
        )
        .unwrap();
        assert_eq!(history.len(), 6);
        let final_acc = history.last().unwrap().test_accuracy.unwrap();
        assert!(final_acc >= 0.9, "accuracy {final_acc}");
        // Metrics are one JSON object per line.
        let lines: Vec<&str> = std::str::from_utf8(&sink).unwrap().trim().lines().collect();
        assert_eq!(lines.len(), 6);
        let parsed: EpochStats = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(parsed.epoch, 0);
    }

    #[test]
    fn learning_rate_decays_each_epoch() {
        let mut net = build_net("lenet", &NetConfig::default()).unwrap();
        let data = toy_dataset(8, 5);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            eta: 0.1,
            decay: 0.5,
            ..TrainConfig::default()
        };
        let history = train(&mut net, &data, None, &cfg, None).unwrap();
        let lrs: Vec<f32> = history.iter().map(|h| h.lr).collect();
        assert_eq!(lrs, vec![0.1, 0.05, 0.025]);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let cfg = NetConfig {
                policy: QuantPolicy::Pa { m: 4, n: 3 },
                seed: 11,
                ..NetConfig::default()
            };
            let mut net = build_net("lenet", &cfg).unwrap();
            let data = toy_dataset(32, 9);
            let train_cfg = TrainConfig {
                epochs: 2,
                batch_size: 8,
                seed: 4,
                ..TrainConfig::default()
            };
            train(&mut net, &data, None, &train_cfg, None).unwrap();
            let probe = data.gather(&[0, 1, 2, 3]).0;
            let tape = net.forward(&probe, Mode::Eval).unwrap();
            net.output_of(&tape).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
