//! Interval profiling: per-output-channel min/max of every convolution and
//! fully connected layer's raw output (pre-normalization, pre-activation),
//! observed over a dataset with the fault-free model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::Dataset;
use crate::engine::{self, BnStats};
use crate::error::{Error, Result};
use crate::eval::EVAL_BATCH;
use crate::model::ModelGraph;

/// Observed `[lower, upper]` per output channel, keyed by layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTable {
    pub layers: BTreeMap<usize, LayerIntervals>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerIntervals {
    pub lower: Vec<f32>,
    pub upper: Vec<f32>,
}

impl IntervalTable {
    /// `(-inf, +inf)` for every parametric layer: intervals that never
    /// trigger. Useful as a neutral element in tests.
    pub fn unbounded(model: &ModelGraph) -> Result<IntervalTable> {
        let mut layers = BTreeMap::new();
        for (l, layer) in model.layers.iter().enumerate() {
            if let Some(c) = layer.spec.out_channels() {
                layers.insert(
                    l,
                    LayerIntervals {
                        lower: vec![f32::NEG_INFINITY; c],
                        upper: vec![f32::INFINITY; c],
                    },
                );
            }
        }
        Ok(IntervalTable { layers })
    }

    /// Checks the table covers exactly the model's parametric layers with
    /// matching channel counts.
    pub fn matches(&self, model: &ModelGraph) -> Result<()> {
        for (l, layer) in model.layers.iter().enumerate() {
            let Some(c) = layer.spec.out_channels() else {
                continue;
            };
            let entry = self.layers.get(&l).ok_or_else(|| {
                Error::InvalidArgument(format!("interval table has no entry for layer {l}"))
            })?;
            if entry.lower.len() != c || entry.upper.len() != c {
                return Err(Error::InvalidArgument(format!(
                    "interval table for layer {l} covers {} channels, model has {c}",
                    entry.lower.len()
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
                    "interval table entry {l} does not name a Conv2D/FullyConnected layer"
                )));
            }
        }
        Ok(())
    }
}

/// Profiles detection intervals over `ds` (typically the full training
/// split). The model must be unhardened: intervals describe the baseline
/// layer outputs that EDAC stages will later check.
pub fn profile_intervals(model: &ModelGraph, ds: &Dataset) -> Result<IntervalTable> {
    if model.has_edac() {
        return Err(Error::InvalidArgument(
            "profiling expects an unhardened model".into(),
        ));
    }
    let mut layers: BTreeMap<usize, LayerIntervals> = BTreeMap::new();
    for (l, layer) in model.layers.iter().enumerate() {
        if let Some(c) = layer.spec.out_channels() {
            layers.insert(
                l,
                LayerIntervals {
                    lower: vec![f32::INFINITY; c],
                    upper: vec![f32::NEG_INFINITY; c],
                },
            );
        }
    }
    let last = model.layers.len() - 1;
    let mut start = 0;
    while start < ds.len() {
        let count = EVAL_BATCH.min(ds.len() - start);
        let batch = ds.batch(start, count)?;
        let (logits, cache) = engine::forward_cached(model, &batch, BnStats::Running)?;
        for (l, entry) in layers.iter_mut() {
            // A layer's raw output is the next layer's input; the final
            // layer's is the logits tensor itself.
            let out = if *l == last {
                &logits
            } else {
                cache.layer_input(*l + 1)
            };
            let c = entry.lower.len();
            let spatial: usize = out.shape()[2..].iter().product();
            for (i, &v) in out.data().iter().enumerate() {
                let ci = (i / spatial) % c;
                if v < entry.lower[ci] {
                    entry.lower[ci] = v;
                }
                if v > entry.upper[ci] {
                    entry.upper[ci] = v;
                }
            }
        }
        start += count;
    }
    Ok(IntervalTable { layers })
}

/// CSV rows `layer_index,channel_index,lower,upper`, layers and channels
/// ascending. f32 values print in shortest round-trip form.
pub fn intervals_to_csv(table: &IntervalTable) -> String {
    let mut out = String::from("layer_index,channel_index,lower,upper\n");
    for (l, entry) in &table.layers {
        for (c, (lo, hi)) in entry.lower.iter().zip(&entry.upper).enumerate() {
            writeln!(out, "{l},{c},{lo},{hi}").unwrap();
        }
    }
    out
}

pub fn intervals_from_csv(text: &str) -> Result<IntervalTable> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "layer_index,channel_index,lower,upper" {
        return Err(Error::InvalidArgument(format!(
            "unexpected interval CSV header `{header}`"
        )));
    }
    let mut layers: BTreeMap<usize, LayerIntervals> = BTreeMap::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |what: &str| {
            fields
                .next()
                .ok_or_else(|| Error::InvalidArgument(format!("row {}: missing {what}", ln + 2)))
        };
        let l: usize = parse(next("layer_index")?, ln)?;
        let c: usize = parse(next("channel_index")?, ln)?;
        let lo: f32 = parse(next("lower")?, ln)?;
        let hi: f32 = parse(next("upper")?, ln)?;
        let entry = layers.entry(l).or_insert_with(|| LayerIntervals {
            lower: vec![],
            upper: vec![],
        });
        if c != entry.lower.len() {
            return Err(Error::InvalidArgument(format!(
                "row {}: channel {c} of layer {l} out of order (expected {})",
                ln + 2,
                entry.lower.len()
            )));
        }
        entry.lower.push(lo);
        entry.upper.push(hi);
    }
    Ok(IntervalTable { layers })
}

fn parse<T: std::str::FromStr>(s: &str, ln: usize) -> Result<T> {
    s.parse().map_err(|_| {
        Error::InvalidArgument(format!("row {}: cannot parse `{s}`", ln + 2))
    })
}

pub fn save_intervals(table: &IntervalTable, path: &Path) -> Result<()> {
    std::fs::write(path, intervals_to_csv(table)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_intervals(path: &Path) -> Result<IntervalTable> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    intervals_from_csv(&text)
}
