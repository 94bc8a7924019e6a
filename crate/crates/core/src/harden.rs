//! Selective channel hardening.
//!
//! Chosen output channels of convolution/FC layers are physically replicated
//! (their weight rows and bias entries copied bit-for-bit), and an EDAC stage
//! is inserted immediately after the raw layer output — before any
//! normalization or activation — to collapse the replicas back to one value
//! per logical channel:
//!
//! 1. every incoming value has NaN replaced by 0;
//! 2. a duplicated pair keeps the smaller value when both lie inside the
//!    channel's profiled `[lower, upper]` interval, keeps the in-interval one
//!    when exactly one does, and outputs 0 when neither does;
//! 3. a triplicated group majority-votes on exact equality and falls back to
//!    the minimum when all three disagree (no interval involved);
//! 4. a non-replicated channel is zeroed when outside its interval under
//!    `all-channels` scope, and passed through under `duplicated-only`.
//!
//! Interval comparisons use plain IEEE `<=`, so a corrupted (NaN) bound makes
//! the test fail and the value is treated as out-of-interval — fail-safe.
//! BatchNorm parameters are never replicated; the EDAC stage restores the
//! logical channel count before normalization sees it.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::layer::{EdacSpec, IntervalScope, Layer, LayerParams, LayerSpec};
use crate::model::{CostReport, ModelGraph};
use crate::profile::IntervalTable;
use crate::tensor::Tensor;
use crate::vuln::{select_channels, ChannelId, VulnerabilityReport};

/// Replication factor for hardened channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardeningMode {
    /// Two copies, interval-checked pair selection.
    Duplicate,
    /// Three copies, majority voter.
    Triplicate,
}

impl HardeningMode {
    pub fn replicas(self) -> usize {
        match self {
            HardeningMode::Duplicate => 2,
            HardeningMode::Triplicate => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HardeningMode::Duplicate => "duplicate",
            HardeningMode::Triplicate => "triplicate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "duplicate" => Ok(HardeningMode::Duplicate),
            "triplicate" => Ok(HardeningMode::Triplicate),
            other => Err(Error::InvalidArgument(format!(
                "unknown hardening mode `{other}` (expected `duplicate` or `triplicate`)"
            ))),
        }
    }
}

/// Which channels to replicate, how, and where interval checks apply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardeningPlan {
    pub mode: HardeningMode,
    pub scope: IntervalScope,
    pub channels: BTreeSet<ChannelId>,
}

impl HardeningPlan {
    /// Top channels by vulnerability score at the given per-layer ratio,
    /// plus — unconditionally — every channel of the logit layer: a flipped
    /// logit directly decides the prediction, so the last layer is always
    /// fully protected.
    pub fn from_report(
        model: &ModelGraph,
        report: &VulnerabilityReport,
        mode: HardeningMode,
        ratio: f64,
        scope: IntervalScope,
    ) -> Result<Self> {
        report.matches(model)?;
        let mut channels = select_channels(report, ratio)?;
        let logit = model
            .logit_layer_index()
            .ok_or_else(|| Error::InvalidModel("model has no parametric layer".into()))?;
        let c = model.layers[logit].spec.out_channels().unwrap();
        for channel in 0..c {
            channels.insert(ChannelId { layer: logit, channel });
        }
        Ok(HardeningPlan { mode, scope, channels })
    }

    /// Every channel of every parametric layer.
    pub fn full(model: &ModelGraph, mode: HardeningMode, scope: IntervalScope) -> Result<Self> {
        let mut channels = BTreeSet::new();
        for (l, layer) in model.layers.iter().enumerate() {
            if let Some(c) = layer.spec.out_channels() {
                for channel in 0..c {
                    channels.insert(ChannelId { layer: l, channel });
                }
            }
        }
        if channels.is_empty() {
            return Err(Error::InvalidModel("model has no parametric layer".into()));
        }
        Ok(HardeningPlan { mode, scope, channels })
    }

    /// Checks every referenced channel exists and the logit layer is fully
    /// covered.
    pub fn validate_for(&self, model: &ModelGraph) -> Result<()> {
        for id in &self.channels {
            let ok = model
                .layers
                .get(id.layer)
                .and_then(|l| l.spec.out_channels())
                .is_some_and(|c| id.channel < c);
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "plan references channel {} of layer {}, which does not exist",
                    id.channel, id.layer
                )));
            }
        }
        let logit = model
            .logit_layer_index()
            .ok_or_else(|| Error::InvalidModel("model has no parametric layer".into()))?;
        let c = model.layers[logit].spec.out_channels().unwrap();
        for channel in 0..c {
            let id = ChannelId { layer: logit, channel };
            if !self.channels.contains(&id) {
                return Err(Error::InvalidArgument(format!(
                    "plan leaves logit channel {channel} unprotected; \
                     the last layer must be fully replicated"
                )));
            }
        }
        Ok(())
    }
}

fn nan_to_zero(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v
    }
}

fn in_interval(v: f32, lo: f32, hi: f32) -> bool {
    // NaN bounds make both comparisons false: corrupted intervals reject.
    lo <= v && v <= hi
}

fn min2(a: f32, b: f32) -> f32 {
    if a <= b {
        a
    } else {
        b
    }
}

/// Pair correction for a duplicated channel. NaN scrub first, then interval
/// agreement: both inside → minimum, one inside → that one, neither → 0.
pub fn edac_correct_pair(a: f32, b: f32, lo: f32, hi: f32) -> f32 {
    let a = nan_to_zero(a);
    let b = nan_to_zero(b);
    match (in_interval(a, lo, hi), in_interval(b, lo, hi)) {
        (true, true) => min2(a, b),
        (true, false) => a,
        (false, true) => b,
        (false, false) => 0.0,
    }
}

/// Correction for a non-replicated channel: NaN scrub always; interval
/// zeroing only under `all-channels` scope.
pub fn edac_correct_single(v: f32, lo: f32, hi: f32, scope: IntervalScope) -> f32 {
    let v = nan_to_zero(v);
    match scope {
        IntervalScope::AllChannels => {
            if in_interval(v, lo, hi) {
                v
            } else {
                0.0
            }
        }
        IntervalScope::DuplicatedOnly => v,
    }
}

/// Majority voter for a triplicated channel: NaN scrub, then exact-equality
/// majority, then minimum when all three disagree.
pub fn voter_correct(a: f32, b: f32, c: f32) -> f32 {
    let a = nan_to_zero(a);
    let b = nan_to_zero(b);
    let c = nan_to_zero(c);
    if a == b || a == c {
        a
    } else if b == c {
        b
    } else {
        min2(min2(a, b), c)
    }
}

/// Applies an EDAC stage to a raw layer output: input is
/// `[N, physical, ...]`, output `[N, logical, ...]`. `lower`/`upper` are the
/// per-logical-channel interval bounds.
pub fn edac_apply(input: &Tensor, spec: &EdacSpec, lower: &[f32], upper: &[f32]) -> Result<Tensor> {
    let shape = input.shape();
    let phys = spec.physical_channels();
    let logical = spec.logical_channels();
    if shape.len() < 2 || shape[1] != phys {
        return Err(Error::InvalidArgument(format!(
            "EDAC input shape {shape:?} does not carry {phys} physical channels"
        )));
    }
    if lower.len() != logical || upper.len() != logical {
        return Err(Error::InvalidArgument(format!(
            "interval bounds cover {}/{} channels, expected {logical}",
            lower.len(),
            upper.len()
        )));
    }
    let n = shape[0];
    let spatial: usize = shape[2..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[1] = logical;
    let mut out = Tensor::zeros(&out_shape);
    let x = input.data();
    let o = out.data_mut();
    for ni in 0..n {
        for (k, group) in spec.replicas.iter().enumerate() {
            let (lo, hi) = (lower[k], upper[k]);
            for s in 0..spatial {
                let at = |p: usize| x[(ni * phys + p) * spatial + s];
                let v = match group.as_slice() {
                    [p] => edac_correct_single(at(*p), lo, hi, spec.scope),
                    [p, q] => edac_correct_pair(at(*p), at(*q), lo, hi),
                    [p, q, r] => voter_correct(at(*p), at(*q), at(*r)),
                    _ => unreachable!("group sizes validated to 1..=3"),
                };
                o[(ni * logical + k) * spatial + s] = v;
            }
        }
    }
    Ok(out)
}

/// Applies a standalone majority vote across three equal-shaped tensors,
/// element-wise (NaN scrubbed first). This is the raw voter; inside a model
/// it is expressed as an EDAC stage whose groups have three replicas.
pub fn voter_apply(a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape() != c.shape() {
        return Err(Error::InvalidArgument(format!(
            "voter inputs disagree in shape: {:?} / {:?} / {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    let mut out = Tensor::zeros(a.shape());
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = voter_correct(a.data()[i], b.data()[i], c.data()[i]);
    }
    Ok(out)
}

/// Builds the hardened model: replicates the planned channels of each
/// convolution/FC layer and inserts an EDAC stage right after it.
///
/// Replica layout: original channels keep their indices; first copies of the
/// replicated channels follow (in ascending original order), then second
/// copies for triplication. Copies are bitwise identical to the originals.
/// Under `all-channels` scope every parametric layer gets an EDAC stage;
/// under `duplicated-only` scope, only layers with at least one replicated
/// channel do.
pub fn harden_model(
    model: &ModelGraph,
    plan: &HardeningPlan,
    intervals: &IntervalTable,
) -> Result<ModelGraph> {
    if model.has_edac() {
        return Err(Error::InvalidModel("model is already hardened".into()));
    }
    plan.validate_for(model)?;
    intervals.matches(model)?;

    let mut layers = Vec::with_capacity(model.layers.len() * 2);
    for (l, layer) in model.layers.iter().enumerate() {
        if !layer.spec.is_parametric() {
            layers.push(layer.clone());
            continue;
        }
        let c = layer.spec.out_channels().unwrap();
        let dup: Vec<usize> = (0..c)
            .filter(|&channel| plan.channels.contains(&ChannelId { layer: l, channel }))
            .collect();
        if dup.is_empty() && plan.scope == IntervalScope::DuplicatedOnly {
            layers.push(layer.clone());
            continue;
        }
        let copies = plan.mode.replicas() - 1;
        let phys = c + dup.len() * copies;

        let mut replicas: Vec<Vec<usize>> = (0..c).map(|ch| vec![ch]).collect();
        for (rank, &ch) in dup.iter().enumerate() {
            for copy in 0..copies {
                replicas[ch].push(c + copy * dup.len() + rank);
            }
        }

        layers.push(replicate_layer(layer, &dup, copies, phys)?);
        let table = &intervals.layers[&l];
        layers.push(Layer::new(
            LayerSpec::Edac(EdacSpec {
                replicas,
                scope: plan.scope,
            }),
            LayerParams::Edac {
                lower: Tensor::new(vec![c], table.lower.clone())?,
                upper: Tensor::new(vec![c], table.upper.clone())?,
            },
        ));
    }
    ModelGraph::new(layers, model.input_shape, model.num_classes)
}

fn replicate_layer(layer: &Layer, dup: &[usize], copies: usize, phys: usize) -> Result<Layer> {
    let (spec, weight, bias) = match (&layer.spec, &layer.params) {
        (
            LayerSpec::Conv2D {
                in_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                has_bias,
                ..
            },
            LayerParams::Conv2D { weight, bias },
        ) => (
            LayerSpec::Conv2D {
                in_channels: *in_channels,
                out_channels: phys,
                kernel_h: *kernel_h,
                kernel_w: *kernel_w,
                stride: *stride,
                padding: *padding,
                has_bias: *has_bias,
            },
            weight,
            bias,
        ),
        (
            LayerSpec::FullyConnected {
                in_features,
                has_bias,
                ..
            },
            LayerParams::FullyConnected { weight, bias },
        ) => (
            LayerSpec::FullyConnected {
                in_features: *in_features,
                out_features: phys,
                has_bias: *has_bias,
            },
            weight,
            bias,
        ),
        _ => unreachable!("caller checked is_parametric"),
    };

    let row = weight.len() / layer.spec.out_channels().unwrap();
    let mut wdata = Vec::with_capacity(phys * row);
    wdata.extend_from_slice(weight.data());
    for _ in 0..copies {
        for &ch in dup {
            wdata.extend_from_slice(&weight.data()[ch * row..(ch + 1) * row]);
        }
    }
    let mut wshape = weight.shape().to_vec();
    wshape[0] = phys;
    let new_weight = Tensor::new(wshape, wdata)?;

    let new_bias = match bias {
        Some(b) => {
            let mut bdata = Vec::with_capacity(phys);
            bdata.extend_from_slice(b.data());
            for _ in 0..copies {
                for &ch in dup {
                    bdata.push(b.data()[ch]);
                }
            }
            Some(Tensor::new(vec![phys], bdata)?)
        }
        None => None,
    };

    let params = match &layer.spec {
        LayerSpec::Conv2D { .. } => LayerParams::Conv2D {
            weight: new_weight,
            bias: new_bias,
        },
        _ => LayerParams::FullyConnected {
            weight: new_weight,
            bias: new_bias,
        },
    };
    Ok(Layer::new(spec, params))
}

/// Cost comparison between a baseline and a derived (hardened or pruned)
/// model. Percentages are relative to the baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadReport {
    pub baseline: CostReport,
    pub derived: CostReport,
    pub param_pct: f64,
    pub mac_pct: f64,
}

pub fn overhead_report(baseline: &ModelGraph, derived: &ModelGraph) -> Result<OverheadReport> {
    let b = baseline.count_params_macs()?;
    let d = derived.count_params_macs()?;
    Ok(OverheadReport {
        baseline: b,
        derived: d,
        param_pct: 100.0 * (d.params as f64 - b.params as f64) / b.params as f64,
        mac_pct: 100.0 * (d.macs as f64 - b.macs as f64) / b.macs as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic, SynthSpec};
    use crate::engine;
    use crate::model::ArchPreset;
    use crate::profile::profile_intervals;

    #[test]
    fn pair_correction_cases() {
        // both inside: minimum
        assert_eq!(edac_correct_pair(2.0, 3.0, 0.0, 10.0), 2.0);
        assert_eq!(edac_correct_pair(3.0, 2.0, 0.0, 10.0), 2.0);
        // one inside
        assert_eq!(edac_correct_pair(50.0, 3.0, 0.0, 10.0), 3.0);
        assert_eq!(edac_correct_pair(3.0, -1.0, 0.0, 10.0), 3.0);
        // neither
        assert_eq!(edac_correct_pair(50.0, -7.0, 0.0, 10.0), 0.0);
        // NaN scrubbed to 0, which is inside [0, 10]
        assert_eq!(edac_correct_pair(f32::NAN, 3.0, 0.0, 10.0), 0.0);
        // NaN scrubbed to 0, which is outside [1, 10] -> partner wins
        assert_eq!(edac_correct_pair(f32::NAN, 3.0, 1.0, 10.0), 3.0);
        // corrupted bound: everything out-of-interval
        assert_eq!(edac_correct_pair(3.0, 3.0, f32::NAN, 10.0), 0.0);
        // infinities are handled by the interval test, not the NaN scrub
        assert_eq!(edac_correct_pair(f32::INFINITY, 3.0, 0.0, 10.0), 3.0);
        assert_eq!(edac_correct_pair(f32::NEG_INFINITY, f32::INFINITY, 0.0, 10.0), 0.0);
    }

    #[test]
    fn single_correction_respects_scope() {
        assert_eq!(
            edac_correct_single(5.0, 0.0, 10.0, IntervalScope::AllChannels),
            5.0
        );
        assert_eq!(
            edac_correct_single(50.0, 0.0, 10.0, IntervalScope::AllChannels),
            0.0
        );
        assert_eq!(
            edac_correct_single(50.0, 0.0, 10.0, IntervalScope::DuplicatedOnly),
            50.0
        );
        assert_eq!(
            edac_correct_single(f32::NAN, 0.0, 10.0, IntervalScope::DuplicatedOnly),
            0.0
        );
    }

    #[test]
    fn voter_cases() {
        assert_eq!(voter_correct(1.0, 1.0, 9.0), 1.0);
        assert_eq!(voter_correct(9.0, 1.0, 1.0), 1.0);
        assert_eq!(voter_correct(1.0, 9.0, 1.0), 1.0);
        // all different: minimum
        assert_eq!(voter_correct(3.0, 1.0, 2.0), 1.0);
        // NaN scrub first: (NaN, NaN, 5) -> (0, 0, 5) -> majority 0
        assert_eq!(voter_correct(f32::NAN, f32::NAN, 5.0), 0.0);
        assert_eq!(voter_correct(f32::NAN, 5.0, 5.0), 5.0);
    }

    #[test]
    fn edac_apply_maps_groups() {
        let spec = EdacSpec {
            // logical 0 duplicated at physical {0, 2}; logical 1 single at 1
            replicas: vec![vec![0, 2], vec![1]],
            scope: IntervalScope::AllChannels,
        };
        let x = Tensor::new(vec![1, 3, 2], vec![2.0, 5.0, 99.0, -8.0, 3.0, 4.0]).unwrap();
        // channel layout: phys0 = [2, 5], phys1 = [99, -8], phys2 = [3, 4]
        let out = edac_apply(&x, &spec, &[0.0, 0.0], &[10.0, 10.0]).unwrap();
        assert_eq!(out.shape(), [1, 2, 2]);
        // logical 0: pair (2,3) -> 2; pair (5,4) -> 4
        // logical 1: 99 out -> 0; -8 out -> 0
        assert_eq!(out.data(), &[2.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn edac_apply_never_emits_nan_smoke() {
        let spec = EdacSpec {
            replicas: vec![vec![0, 1], vec![2]],
            scope: IntervalScope::AllChannels,
        };
        let patterns = [
            f32::NAN,
            f32::INFINITY,
            f32::NEG_INFINITY,
            f32::MIN_POSITIVE / 2.0, // denormal
            -0.0,
            1.0,
        ];
        for &a in &patterns {
            for &b in &patterns {
                for &c in &patterns {
                    let x = Tensor::new(vec![1, 3, 1], vec![a, b, c]).unwrap();
                    let out = edac_apply(&x, &spec, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
                    assert!(out.data().iter().all(|v| !v.is_nan()));
                }
            }
        }
    }

    #[test]
    fn full_duplication_doubles_parametric_layer_params() {
        let model = ArchPreset::CnnSmall.build([1, 12, 12], 5, 5).unwrap();
        let intervals = IntervalTable::unbounded(&model).unwrap();
        let plan =
            HardeningPlan::full(&model, HardeningMode::Duplicate, IntervalScope::AllChannels)
                .unwrap();
        let hardened = harden_model(&model, &plan, &intervals).unwrap();
        let base = model.param_count();
        let intervals_params = hardened.interval_param_count();
        assert_eq!(hardened.param_count() - intervals_params, 2 * base);
    }

    #[test]
    fn replication_layout_and_counts() {
        let model = ArchPreset::CnnSmall.build([1, 12, 12], 5, 5).unwrap();
        let mut report = VulnerabilityReport {
            layers: std::collections::BTreeMap::new(),
            samples: 1,
        };
        // Give layer 0 (8 channels) scores favoring channels 6 and 2.
        report.layers.insert(0, {
            let mut v = vec![0.0; 8];
            v[6] = 9.0;
            v[2] = 5.0;
            v
        });
        report.layers.insert(3, vec![0.0; 16]);
        report.layers.insert(7, vec![0.0; 32]);
        report.layers.insert(9, vec![0.0; 5]);
        let plan = HardeningPlan::from_report(
            &model,
            &report,
            HardeningMode::Duplicate,
            0.25,
            IntervalScope::AllChannels,
        )
        .unwrap();
        let intervals = IntervalTable::unbounded(&model).unwrap();
        let hardened = harden_model(&model, &plan, &intervals).unwrap();
        // Layer 0 in the hardened model: 8 + 2 physical channels.
        let LayerSpec::Conv2D { out_channels, .. } = hardened.layers[0].spec else {
            panic!("layer 0 should stay a conv");
        };
        assert_eq!(out_channels, 10);
        // Its EDAC stage maps channel 2 -> {2, 8} and 6 -> {6, 9}.
        let LayerSpec::Edac(edac) = &hardened.layers[1].spec else {
            panic!("expected an EDAC stage after layer 0");
        };
        assert_eq!(edac.replicas[2], vec![2, 8]);
        assert_eq!(edac.replicas[6], vec![6, 9]);
        assert_eq!(edac.replicas[0], vec![0]);
        // Logit layer fully duplicated: 5 -> 10 physical.
        let logit = hardened
            .layers
            .iter()
            .rev()
            .find_map(|layer| match &layer.spec {
                LayerSpec::FullyConnected { out_features, .. } => Some(*out_features),
                _ => None,
            })
            .unwrap();
        assert_eq!(logit, 10);
    }

    #[test]
    fn plan_must_cover_logit_layer() {
        let model = ArchPreset::MlpSmall.build([1, 4, 4], 3, 5).unwrap();
        let plan = HardeningPlan {
            mode: HardeningMode::Duplicate,
            scope: IntervalScope::AllChannels,
            channels: BTreeSet::from([ChannelId { layer: 3, channel: 0 }]),
        };
        let intervals = IntervalTable::unbounded(&model).unwrap();
        assert!(harden_model(&model, &plan, &intervals).is_err());
    }

    #[test]
    fn hardened_model_is_transparent_when_fault_free() {
        let (train, _) = synthetic(&SynthSpec {
            train: 64,
            test: 8,
            ..SynthSpec::default()
        })
        .unwrap();
        let model = ArchPreset::CnnBn.build([1, 12, 12], 5, 33).unwrap();
        let intervals = profile_intervals(&model, &train).unwrap();
        for mode in [HardeningMode::Duplicate, HardeningMode::Triplicate] {
            for scope in [IntervalScope::AllChannels, IntervalScope::DuplicatedOnly] {
                let plan = HardeningPlan::full(&model, mode, scope).unwrap();
                let hardened = harden_model(&model, &plan, &intervals).unwrap();
                let x = train.batch(0, 32).unwrap();
                let a = engine::forward(&model, &x).unwrap();
                let b = engine::forward(&hardened, &x).unwrap();
                assert!(a.bit_eq(&b), "{:?}/{:?} altered fault-free outputs", mode, scope);
            }
        }
    }

    #[test]
    fn triplication_adds_twice_the_duplication_params() {
        let model = ArchPreset::CnnBn.build([1, 12, 12], 5, 5).unwrap();
        let intervals = IntervalTable::unbounded(&model).unwrap();
        let report = VulnerabilityReport {
            layers: model
                .layers
                .iter()
                .enumerate()
                .filter_map(|(l, layer)| {
                    layer.spec.out_channels().map(|c| (l, (0..c).map(|i| i as f64).collect()))
                })
                .collect(),
            samples: 1,
        };
        let base = model.param_count();
        let mut added = Vec::new();
        for mode in [HardeningMode::Duplicate, HardeningMode::Triplicate] {
            let plan = HardeningPlan::from_report(
                &model,
                &report,
                mode,
                0.25,
                IntervalScope::AllChannels,
            )
            .unwrap();
            let hardened = harden_model(&model, &plan, &intervals).unwrap();
            added.push(hardened.param_count() - hardened.interval_param_count() - base);
        }
        assert_eq!(added[1], 2 * added[0]);
    }
}
