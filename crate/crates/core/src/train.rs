//! Plain SGD training with softmax cross-entropy. Shuffling, batching, and
//! the update loop are all seeded and sequential, so a (model seed, train
//! seed) pair always produces the same parameters bit-for-bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::engine::{self, BnStats};
use crate::error::{Error, Result};
use crate::inject::derive_seed;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// Momentum used when folding batch statistics into BatchNorm running
/// estimates.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    /// Mean training loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
}

/// Mean softmax cross-entropy of `logits` against `labels`, and its gradient
/// with respect to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let z = logits.data();
    let mut grad = Tensor::zeros(shape);
    let g = grad.data_mut();
    let mut loss = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let zr = &z[row * c..(row + 1) * c];
        let m = zr.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for &v in zr {
            sum += (v as f64 - m).exp();
        }
        loss += -((zr[label] as f64 - m) - sum.ln());
        for (j, &v) in zr.iter().enumerate() {
            let p = (v as f64 - m).exp() / sum;
            let delta = if j == label { 1.0 } else { 0.0 };
            g[row * c + j] = ((p - delta) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Trains in place. Aborts with a diagnostic the moment a batch loss turns
/// non-finite rather than silently continuing on garbage.
pub fn sgd_train(model: &mut ModelGraph, ds: &Dataset, config: &TrainConfig) -> Result<TrainStats> {
    if model.has_edac() {
        return Err(Error::Unsupported(
            "training a hardened model (EDAC stages have no gradients)".into(),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if !(config.lr.is_finite() && config.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {} must be finite and non-negative",
            config.lr
        )));
    }
    let mut stats = TrainStats {
        epoch_losses: Vec::with_capacity(config.epochs),
    };
    let n = ds.len();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = ds.gather(chunk)?;
            let x = batch.batch(0, batch.len())?;
            let (logits, cache) = engine::forward_cached(model, &x, BnStats::Batch)?;
            let (loss, dlogits) = softmax_xent(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads = engine::backward(model, &cache, &dlogits)?;
            engine::sgd_step(model, &grads, config.lr)?;
            engine::update_running_stats(model, &cache, BN_MOMENTUM)?;
            epoch_loss += loss * chunk.len() as f64;
        }
        stats.epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(stats)
}

/// Mean cross-entropy over a dataset with the model as-is (running
/// statistics, no parameter updates).
pub fn mean_loss(model: &ModelGraph, ds: &Dataset) -> Result<f64> {
    let mut total = 0.0f64;
    let mut start = 0;
    while start < ds.len() {
        let count = crate::eval::EVAL_BATCH.min(ds.len() - start);
        let x = ds.batch(start, count)?;
        let logits = engine::forward(model, &x)?;
        let (loss, _) = softmax_xent(&logits, &ds.labels[start..start + count])?;
        total += loss * count as f64;
        start += count;
    }
    Ok(total / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic, SynthSpec};
    use crate::eval::evaluate;
    use crate::model::ArchPreset;

    #[test]
    fn xent_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, grad) = softmax_xent(&logits, &[0, 3]).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        // gradient rows: (0.25 - delta)/2
        assert!((grad.data()[0] - (-0.375)).abs() < 1e-7);
        assert!((grad.data()[1] - 0.125).abs() < 1e-7);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (train, test) = synthetic(&SynthSpec {
            train: 300,
            test: 100,
            ..SynthSpec::default()
        })
        .unwrap();
        let config = TrainConfig {
            epochs: 2,
            lr: 0.05,
            batch_size: 32,
            seed: 7,
        };
        let mut a = ArchPreset::CnnBn.build([1, 12, 12], 5, 1).unwrap();
        let before = mean_loss(&a, &train).unwrap();
        let stats = sgd_train(&mut a, &train, &config).unwrap();
        let after = mean_loss(&a, &train).unwrap();
        assert!(after < before, "loss {before} -> {after}");
        assert_eq!(stats.epoch_losses.len(), 2);
        assert!(evaluate(&a, &test).unwrap() > 100.0 / 5.0);

        let mut b = ArchPreset::CnnBn.build([1, 12, 12], 5, 1).unwrap();
        sgd_train(&mut b, &train, &config).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn zero_lr_changes_only_running_stats() {
        let (train, _) = synthetic(&SynthSpec {
            train: 60,
            test: 10,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut model = ArchPreset::CnnSmall.build([1, 12, 12], 5, 2).unwrap();
        let before = model.fingerprint();
        sgd_train(
            &mut model,
            &train,
            &TrainConfig {
                epochs: 1,
                lr: 0.0,
                batch_size: 16,
                seed: 3,
            },
        )
        .unwrap();
        // CnnSmall has no BatchNorm, so nothing at all may change.
        assert_eq!(model.fingerprint(), before);
    }

    #[test]
    fn divergence_aborts_with_location() {
        let (train, _) = synthetic(&SynthSpec {
            train: 40,
            test: 10,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut model = ArchPreset::CnnSmall.build([1, 12, 12], 5, 2).unwrap();
        // Poison a weight so the first forward pass yields NaN logits.
        model.layers[0]
            .injectable_tensors_mut()[0]
            .data_mut()[0] = f32::NAN;
        let err = sgd_train(
            &mut model,
            &train,
            &TrainConfig {
                epochs: 1,
                lr: 0.01,
                batch_size: 8,
                seed: 3,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, batch: 0 }));
    }
}
