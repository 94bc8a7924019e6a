//! Per-channel parameter vulnerability.
//!
//! For one input with predicted class `t` and logits `Z`, a channel's score
//! accumulates, over every rival class `i != t`, the squared gradient
//! magnitudes of `Z_i - Z_t` with respect to the channel's parameters
//! (weights and bias), divided by `(Z_i - Z_t)^2`. Scores are averaged
//! arithmetically over the calibration inputs. A large score means small
//! parameter perturbations in that channel can flip the prediction, so the
//! channel is worth replicating first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::engine::{self, BnStats, LayerGrads};
use crate::error::{Error, Result};
use crate::eval::argmax_row;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// Rival logit differences with squared magnitude below this are skipped:
/// the ratio is numerically meaningless once the denominator underflows.
pub const DEGENERATE_DENOM: f64 = 1e-12;

/// One output channel of a convolution or fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId {
    pub layer: usize,
    pub channel: usize,
}

/// Per-channel scores for every parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VulnerabilityReport {
    /// Layer index → score per output channel.
    pub layers: BTreeMap<usize, Vec<f64>>,
    /// Calibration inputs the scores were averaged over (0 when loaded from
    /// a CSV, which does not carry it).
    pub samples: usize,
}

impl VulnerabilityReport {
    pub fn score(&self, id: ChannelId) -> Option<f64> {
        self.layers.get(&id.layer)?.get(id.channel).copied()
    }

    /// Checks the report covers exactly the model's parametric layers with
    /// matching channel counts.
    pub fn matches(&self, model: &ModelGraph) -> Result<()> {
        for (l, layer) in model.layers.iter().enumerate() {
            let Some(c) = layer.spec.out_channels() else {
                continue;
            };
            let scores = self.layers.get(&l).ok_or_else(|| {
                Error::InvalidArgument(format!("report has no scores for layer {l}"))
            })?;
            if scores.len() != c {
                return Err(Error::InvalidArgument(format!(
                    "report covers {} channels of layer {l}, model has {c}",
                    scores.len()
                )));
            }
        }
        for l in self.layers.keys() {
            if model
                .layers
                .get(*l)
                .is_none_or(|layer| !layer.spec.is_parametric())
            {
                return Err(Error::InvalidArgument(format!(
                    "report entry {l} does not name a Conv2D/FullyConnected layer"
                )));
            }
        }
        Ok(())
    }
}

/// Scores every channel of every convolution/FC layer over a calibration
/// set. Work is parallelized over samples; the reduction is a fixed-order
/// sequential sum, so results do not depend on the worker count.
pub fn channel_vulnerability(model: &ModelGraph, calib: &Dataset) -> Result<VulnerabilityReport> {
    if model.has_edac() {
        return Err(Error::InvalidArgument(
            "vulnerability analysis expects an unhardened model".into(),
        ));
    }
    if calib.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    let per_sample: Vec<Result<BTreeMap<usize, Vec<f64>>>> = (0..calib.len())
        .into_par_iter()
        .map(|i| sample_scores(model, calib, i))
        .collect();
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (l, layer) in model.layers.iter().enumerate() {
        if let Some(c) = layer.spec.out_channels() {
            acc.insert(l, vec![0.0; c]);
        }
    }
    for s in per_sample {
        for (l, scores) in s? {
            let dst = acc.get_mut(&l).unwrap();
            for (d, v) in dst.iter_mut().zip(scores) {
                *d += v;
            }
        }
    }
    let n = calib.len() as f64;
    for scores in acc.values_mut() {
        for v in scores.iter_mut() {
            *v /= n;
        }
    }
    Ok(VulnerabilityReport {
        layers: acc,
        samples: calib.len(),
    })
}

fn sample_scores(
    model: &ModelGraph,
    calib: &Dataset,
    index: usize,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let x = calib.batch(index, 1)?;
    let (logits, cache) = engine::forward_cached(model, &x, BnStats::Running)?;
    let z = logits.data();
    let t = argmax_row(z);
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (l, layer) in model.layers.iter().enumerate() {
        if let Some(c) = layer.spec.out_channels() {
            acc.insert(l, vec![0.0; c]);
        }
    }
    for i in 0..z.len() {
        if i == t {
            continue;
        }
        let denom = (z[i] as f64 - z[t] as f64).powi(2);
        if denom < DEGENERATE_DENOM {
            continue;
        }
        // d(Z_i - Z_t)/dθ via one backward pass with a ±1 logit seed.
        let mut seed = Tensor::zeros(logits.shape());
        seed.data_mut()[i] = 1.0;
        seed.data_mut()[t] = -1.0;
        let grads = engine::backward(model, &cache, &seed)?;
        for (l, lg) in grads.layers.iter().enumerate() {
            let (weight, bias) = match lg {
                LayerGrads::Conv2D { weight, bias } | LayerGrads::FullyConnected { weight, bias } => {
                    (weight, bias.as_ref())
                }
                _ => continue,
            };
            let dst = acc.get_mut(&l).unwrap();
            let channels = dst.len();
            let per_channel = weight.len() / channels;
            for (c, slot) in dst.iter_mut().enumerate() {
                let mut sq = 0.0f64;
                for &g in &weight.data()[c * per_channel..(c + 1) * per_channel] {
                    sq += (g as f64) * (g as f64);
                }
                if let Some(b) = bias {
                    let g = b.data()[c] as f64;
                    sq += g * g;
                }
                *slot += sq / denom;
            }
        }
    }
    Ok(acc)
}

/// Per layer, the `ceil(ratio · channels)` highest-scoring channels; score
/// ties break toward the lower channel index. `ratio` must lie in `[0, 1]`.
pub fn select_channels(
    report: &VulnerabilityReport,
    ratio: f64,
) -> Result<std::collections::BTreeSet<ChannelId>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "hardening ratio {ratio} outside [0, 1]"
        )));
    }
    let mut out = std::collections::BTreeSet::new();
    for (&l, scores) in &report.layers {
        let k = ceil_ratio(ratio, scores.len());
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then(a.cmp(&b))
        });
        for &c in order.iter().take(k) {
            out.insert(ChannelId { layer: l, channel: c });
        }
    }
    Ok(out)
}

/// `ceil(ratio · n)` with a one-part-per-billion guard against FP noise in
/// the product (e.g. 0.1 · 30 evaluating to 3.0000000000000004).
pub(crate) fn ceil_ratio(ratio: f64, n: usize) -> usize {
    if ratio <= 0.0 {
        0
    } else if ratio >= 1.0 {
        n
    } else {
        (((ratio * n as f64) - 1e-9).ceil() as usize).min(n)
    }
}

/// CSV rows `layer_index,channel_index,score`, layers and channels ascending.
pub fn report_to_csv(report: &VulnerabilityReport) -> String {
    let mut out = String::from("layer_index,channel_index,score\n");
    for (l, scores) in &report.layers {
        for (c, s) in scores.iter().enumerate() {
            writeln!(out, "{l},{c},{s}").unwrap();
        }
    }
    out
}

pub fn report_from_csv(text: &str) -> Result<VulnerabilityReport> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "layer_index,channel_index,score" {
        return Err(Error::InvalidArgument(format!(
            "unexpected vulnerability CSV header `{header}`"
        )));
    }
    let mut layers: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "row {}: expected 3 fields, got {}",
                ln + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            Error::InvalidArgument(format!("row {}: cannot parse {what}", ln + 2))
        };
        let l: usize = fields[0].parse().map_err(|_| bad("layer_index"))?;
        let c: usize = fields[1].parse().map_err(|_| bad("channel_index"))?;
        let s: f64 = fields[2].parse().map_err(|_| bad("score"))?;
        let entry = layers.entry(l).or_default();
        if c != entry.len() {
            return Err(Error::InvalidArgument(format!(
                "row {}: channel {c} of layer {l} out of order (expected {})",
                ln + 2,
                entry.len()
            )));
        }
        entry.push(s);
    }
    Ok(VulnerabilityReport { layers, samples: 0 })
}

pub fn save_report(report: &VulnerabilityReport, path: &Path) -> Result<()> {
    std::fs::write(path, report_to_csv(report)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_report(path: &Path) -> Result<VulnerabilityReport> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    report_from_csv(&text)
}
