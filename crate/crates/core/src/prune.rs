//! Structured channel pruning with fine-tuning.
//!
//! The `floor(ratio · channels)` lowest-scoring output channels of each
//! convolution/FC layer are removed — weight rows, bias entries, the
//! associated BatchNorm entries, and the consuming layer's input slices. The
//! logit layer is exempt. Scores may come from the vulnerability analysis
//! (prune what hurts least when faulty) or from the classical L1 baseline.

use std::collections::BTreeMap;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::layer::{Layer, LayerParams, LayerSpec};
use crate::model::ModelGraph;
use crate::tensor::Tensor;
use crate::train::{sgd_train, TrainConfig, TrainStats};
use crate::vuln::VulnerabilityReport;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    /// Fraction of each convolution layer's channels to remove, in `[0, 1)`.
    pub conv_ratio: f64,
    /// Fraction of each FC layer's output features to remove, in `[0, 1)`.
    pub fc_ratio: f64,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("conv_ratio", self.conv_ratio), ("fc_ratio", self.fc_ratio)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!(
                    "{name} {r} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Classical magnitude baseline: per output channel, the sum of absolute
/// weight values (bias excluded).
pub fn l1_scores(model: &ModelGraph) -> Result<VulnerabilityReport> {
    if model.has_edac() {
        return Err(Error::InvalidArgument(
            "L1 scoring expects an unhardened model".into(),
        ));
    }
    let mut layers = BTreeMap::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let (weight, channels) = match (&layer.spec, &layer.params) {
            (_, LayerParams::Conv2D { weight, .. })
            | (_, LayerParams::FullyConnected { weight, .. }) => {
                (weight, layer.spec.out_channels().unwrap())
            }
            _ => continue,
        };
        let per_channel = weight.len() / channels;
        let scores: Vec<f64> = (0..channels)
            .map(|c| {
                weight.data()[c * per_channel..(c + 1) * per_channel]
                    .iter()
                    .map(|&w| w.abs() as f64)
                    .sum()
            })
            .collect();
        layers.insert(l, scores);
    }
    Ok(VulnerabilityReport { layers, samples: 0 })
}

/// `floor(ratio · n)` with the same one-part-per-billion guard as channel
/// selection, clamped so at least one channel survives.
fn floor_ratio(ratio: f64, n: usize) -> usize {
    if ratio <= 0.0 {
        0
    } else {
        (((ratio * n as f64) + 1e-9).floor() as usize).min(n - 1)
    }
}

/// Removes the lowest-scoring channels per layer. Score ties break toward
/// keeping the lower channel index. Returns the smaller model; `scores` must
/// cover the model being pruned.
pub fn prune(model: &ModelGraph, scores: &VulnerabilityReport, config: &PruneConfig) -> Result<ModelGraph> {
    if model.has_edac() {
        return Err(Error::InvalidModel("cannot prune a hardened model".into()));
    }
    config.validate()?;
    scores.matches(model)?;
    let logit = model
        .logit_layer_index()
        .ok_or_else(|| Error::InvalidModel("model has no parametric layer".into()))?;

    // keep[l] = surviving output channels of parametric layer l, ascending.
    let mut keep: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let Some(c) = layer.spec.out_channels() else {
            continue;
        };
        if l == logit {
            continue;
        }
        let ratio = match layer.spec {
            LayerSpec::Conv2D { .. } => config.conv_ratio,
            _ => config.fc_ratio,
        };
        let k = floor_ratio(ratio, c);
        if k == 0 {
            continue;
        }
        let s = &scores.layers[&l];
        let mut order: Vec<usize> = (0..c).collect();
        // Ascending score; ties put the higher index first so it is removed
        // and the lower index survives.
        order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a)));
        let removed: std::collections::BTreeSet<usize> = order[..k].iter().copied().collect();
        keep.insert(l, (0..c).filter(|ch| !removed.contains(ch)).collect());
    }

    let mut layers: Vec<Layer> = model.layers.clone();
    for (&l, kept) in &keep {
        shrink_outputs(&mut layers[l], kept)?;
        // The BatchNorm tied to this layer (before the next parametric or
        // shape-changing consumer) tracks its channels.
        let mut j = l + 1;
        while j < layers.len() {
            match layers[j].spec {
                LayerSpec::BatchNorm { .. } => {
                    shrink_batchnorm(&mut layers[j], kept)?;
                    j += 1;
                }
                LayerSpec::ReLU | LayerSpec::MaxPool { .. } => j += 1,
                _ => break,
            }
        }
        // First consuming parametric layer loses the matching input slices.
        let next = (l + 1..layers.len())
            .find(|&j| layers[j].spec.is_parametric())
            .ok_or_else(|| {
                Error::InvalidModel(format!("pruned layer {l} has no consuming layer"))
            })?;
        let old_channels = model.layers[l].spec.out_channels().unwrap();
        shrink_inputs(&mut layers[next], kept, old_channels)?;
    }
    ModelGraph::new(layers, model.input_shape, model.num_classes)
}

fn shrink_outputs(layer: &mut Layer, kept: &[usize]) -> Result<()> {
    match (&mut layer.spec, &mut layer.params) {
        (LayerSpec::Conv2D { out_channels, .. }, LayerParams::Conv2D { weight, bias })
        | (
            LayerSpec::FullyConnected {
                out_features: out_channels,
                ..
            },
            LayerParams::FullyConnected { weight, bias },
        ) => {
            let row = weight.len() / *out_channels;
            let mut data = Vec::with_capacity(kept.len() * row);
            for &c in kept {
                data.extend_from_slice(&weight.data()[c * row..(c + 1) * row]);
            }
            let mut shape = weight.shape().to_vec();
            shape[0] = kept.len();
            *weight = Tensor::new(shape, data)?;
            if let Some(b) = bias {
                *b = Tensor::new(vec![kept.len()], kept.iter().map(|&c| b.data()[c]).collect())?;
            }
            *out_channels = kept.len();
            Ok(())
        }
        _ => Err(Error::InvalidModel(
            "shrink_outputs called on a non-parametric layer".into(),
        )),
    }
}

fn shrink_batchnorm(layer: &mut Layer, kept: &[usize]) -> Result<()> {
    let LayerSpec::BatchNorm { channels } = &mut layer.spec else {
        return Err(Error::InvalidModel("expected a BatchNorm layer".into()));
    };
    let LayerParams::BatchNorm {
        scale,
        shift,
        running_mean,
        running_var,
    } = &mut layer.params
    else {
        return Err(Error::InvalidModel("BatchNorm parameters missing".into()));
    };
    for t in [scale, shift, running_mean, running_var] {
        *t = Tensor::new(vec![kept.len()], kept.iter().map(|&c| t.data()[c]).collect())?;
    }
    *channels = kept.len();
    Ok(())
}

/// Drops the input slices of a consuming layer. For a convolution the input
/// channel axis shrinks; for an FC layer each removed upstream channel owns a
/// contiguous block of `in_features / old_channels` columns (spatial
/// positions flattened channel-major), which covers both FC-after-flatten
/// and FC-after-FC.
fn shrink_inputs(layer: &mut Layer, kept: &[usize], old_channels: usize) -> Result<()> {
    match (&mut layer.spec, &mut layer.params) {
        (LayerSpec::Conv2D { in_channels, .. }, LayerParams::Conv2D { weight, .. }) => {
            let [oc, ic, kh, kw] = [
                weight.shape()[0],
                weight.shape()[1],
                weight.shape()[2],
                weight.shape()[3],
            ];
            if ic != old_channels {
                return Err(Error::InvalidModel(format!(
                    "consumer expects {ic} input channels, pruned layer had {old_channels}"
                )));
            }
            let plane = kh * kw;
            let mut data = Vec::with_capacity(oc * kept.len() * plane);
            for o in 0..oc {
                for &c in kept {
                    let start = (o * ic + c) * plane;
                    data.extend_from_slice(&weight.data()[start..start + plane]);
                }
            }
            *weight = Tensor::new(vec![oc, kept.len(), kh, kw], data)?;
            *in_channels = kept.len();
            Ok(())
        }
        (LayerSpec::FullyConnected { in_features, .. }, LayerParams::FullyConnected { weight, .. }) => {
            let [oc, inf] = [weight.shape()[0], weight.shape()[1]];
            if inf % old_channels != 0 {
                return Err(Error::InvalidModel(format!(
                    "consumer input width {inf} is not a multiple of the pruned layer's {old_channels} channels"
                )));
            }
            let block = inf / old_channels;
            let mut data = Vec::with_capacity(oc * kept.len() * block);
            for o in 0..oc {
                for &c in kept {
                    let start = o * inf + c * block;
                    data.extend_from_slice(&weight.data()[start..start + block]);
                }
            }
            *weight = Tensor::new(vec![oc, kept.len() * block], data)?;
            *in_features = kept.len() * block;
            Ok(())
        }
        _ => Err(Error::InvalidModel(
            "shrink_inputs called on a non-parametric layer".into(),
        )),
    }
}

/// Fine-tunes a pruned model: plain SGD, aborting on NaN loss. Returns the
/// tuned model and per-epoch losses.
pub fn fine_tune(
    model: &ModelGraph,
    ds: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelGraph, TrainStats)> {
    let mut tuned = model.clone();
    let stats = sgd_train(&mut tuned, ds, config)?;
    Ok((tuned, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic, SynthSpec};
    use crate::engine;
    use crate::model::ArchPreset;
    use rand::SeedableRng;

    fn uniform_scores(model: &ModelGraph) -> VulnerabilityReport {
        VulnerabilityReport {
            layers: model
                .layers
                .iter()
                .enumerate()
                .filter_map(|(l, layer)| {
                    layer
                        .spec
                        .out_channels()
                        .map(|c| (l, (0..c).map(|i| i as f64).collect()))
                })
                .collect(),
            samples: 0,
        }
    }

    #[test]
    fn l1_scores_sum_absolute_weights() {
        let model = ModelGraph::new(
            vec![
                Layer::new(LayerSpec::Flatten, LayerParams::None),
                Layer::new(
                    LayerSpec::FullyConnected {
                        in_features: 2,
                        out_features: 2,
                        has_bias: true,
                    },
                    LayerParams::FullyConnected {
                        weight: Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 0.25]).unwrap(),
                        bias: Some(Tensor::new(vec![2], vec![100.0, 100.0]).unwrap()),
                    },
                ),
            ],
            [1, 1, 2],
            2,
        )
        .unwrap();
        let scores = l1_scores(&model).unwrap();
        // bias is excluded
        assert_eq!(scores.layers[&1], vec![3.0, 0.75]);
    }

    #[test]
    fn zero_ratios_are_identity() {
        let model = ArchPreset::CnnBn.build([1, 12, 12], 5, 9).unwrap();
        let scores = uniform_scores(&model);
        let pruned = prune(
            &model,
            &scores,
            &PruneConfig {
                conv_ratio: 0.0,
                fc_ratio: 0.0,
            },
        )
        .unwrap();
        assert_eq!(model.fingerprint(), pruned.fingerprint());
    }

    #[test]
    fn prune_removes_lowest_scoring_channels() {
        let model = ArchPreset::CnnBn.build([1, 12, 12], 5, 9).unwrap();
        let scores = uniform_scores(&model); // score == channel index
        let pruned = prune(
            &model,
            &scores,
            &PruneConfig {
                conv_ratio: 0.25,
                fc_ratio: 0.5,
            },
        )
        .unwrap();
        // conv1 8 -> 6, conv2 16 -> 12, fc1 32 -> 16, logit untouched.
        let counts: Vec<usize> = pruned
            .layers
            .iter()
            .filter_map(|l| l.spec.out_channels())
            .collect();
        assert_eq!(counts, vec![6, 12, 16, 5]);
        // Parameters shrink accordingly and the model still runs.
        assert!(pruned.param_count() < model.param_count());
        let x = Tensor::filled(&[2, 1, 12, 12], 0.5);
        engine::forward(&pruned, &x).unwrap();
    }

    /// 100 -> 10 FC layer at fc ratio 0.5: the layer keeps 5 rows
    /// (5·100 + 5 = 505 parameters), and the consumer loses the matching
    /// input columns.
    #[test]
    fn fc_prune_worked_example() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model = ModelGraph::new(
            vec![
                crate::model::build::flatten(),
                crate::model::build::fully_connected(&mut rng, 100, 10),
                crate::model::build::fully_connected(&mut rng, 10, 3),
            ],
            [1, 10, 10],
            3,
        )
        .unwrap();
        let scores = uniform_scores(&model);
        let pruned = prune(
            &model,
            &scores,
            &PruneConfig {
                conv_ratio: 0.0,
                fc_ratio: 0.5,
            },
        )
        .unwrap();
        assert_eq!(pruned.layers[1].param_count(), 505);
        let LayerSpec::FullyConnected { in_features, .. } = pruned.layers[2].spec else {
            panic!()
        };
        assert_eq!(in_features, 5);
        // Lowest five scores are channels 0..5; channels 5..10 survive.
        let LayerParams::FullyConnected { weight, .. } = &pruned.layers[1].params else {
            panic!()
        };
        let LayerParams::FullyConnected { weight: orig, .. } = &model.layers[1].params else {
            panic!()
        };
        assert_eq!(&weight.data()[..100], &orig.data()[500..600]);
    }

    #[test]
    fn tie_break_keeps_lower_index() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let model = ModelGraph::new(
            vec![
                crate::model::build::flatten(),
                crate::model::build::fully_connected(&mut rng, 4, 4),
                crate::model::build::fully_connected(&mut rng, 4, 2),
            ],
            [1, 2, 2],
            2,
        )
        .unwrap();
        let scores = VulnerabilityReport {
            layers: BTreeMap::from([
                (1, vec![0.5, 0.5, 0.5, 0.9]),
                (2, vec![0.0, 0.0]),
            ]),
            samples: 0,
        };
        let pruned = prune(
            &model,
            &scores,
            &PruneConfig {
                conv_ratio: 0.0,
                fc_ratio: 0.25,
            },
        )
        .unwrap();
        // One of the three tied channels {0,1,2} is removed: the highest
        // index, 2. Verify by comparing surviving rows to the original.
        let LayerParams::FullyConnected { weight, .. } = &pruned.layers[1].params else {
            panic!()
        };
        let LayerParams::FullyConnected { weight: orig, .. } = &model.layers[1].params else {
            panic!()
        };
        assert_eq!(&weight.data()[0..4], &orig.data()[0..4]);
        assert_eq!(&weight.data()[4..8], &orig.data()[4..8]);
        assert_eq!(&weight.data()[8..12], &orig.data()[12..16]);
    }

    #[test]
    fn logit_layer_is_never_pruned() {
        let model = ArchPreset::MlpSmall.build([1, 4, 4], 3, 2).unwrap();
        let scores = uniform_scores(&model);
        let pruned = prune(
            &model,
            &scores,
            &PruneConfig {
                conv_ratio: 0.9,
                fc_ratio: 0.9,
            },
        )
        .unwrap();
        assert_eq!(pruned.num_classes, 3);
        assert_eq!(pruned.output_sample_shape().unwrap(), vec![3]);
    }

    #[test]
    fn fine_tune_recovers_accuracy() {
        let (train, test) = synthetic(&SynthSpec {
            train: 300,
            test: 100,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut model = ArchPreset::CnnBn.build([1, 12, 12], 5, 4).unwrap();
        sgd_train(
            &mut model,
            &train,
            &TrainConfig {
                epochs: 3,
                lr: 0.05,
                batch_size: 32,
                seed: 11,
            },
        )
        .unwrap();
        let scores = l1_scores(&model).unwrap();
        let pruned = prune(
            &model,
            &scores,
            &PruneConfig {
                conv_ratio: 0.25,
                fc_ratio: 0.25,
            },
        )
        .unwrap();
        let before = crate::eval::evaluate(&pruned, &test).unwrap();
        let (tuned, stats) = fine_tune(
            &pruned,
            &train,
            &TrainConfig {
                epochs: 2,
                lr: 0.01,
                batch_size: 32,
                seed: 12,
            },
        )
        .unwrap();
        let after = crate::eval::evaluate(&tuned, &test).unwrap();
        assert!(stats.epoch_losses[stats.epoch_losses.len() - 1] <= stats.epoch_losses[0] * 1.5);
        assert!(after >= before - 5.0, "fine-tune hurt badly: {before} -> {after}");
    }
}
