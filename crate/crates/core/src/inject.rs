//! Bit-flip fault injection over IEEE-754 binary32 parameters.
//!
//! Per trial and per layer, the number of flips is
//! `round_half_even(BER · params · 32)`; positions are drawn without
//! replacement from the layer's `params · 32` bit sites using a ChaCha8
//! stream seeded from `(master seed, trial index, layer index)`, so any
//! single trial can be replayed in isolation and campaign results are
//! independent of thread count and execution order.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::ModelGraph;

/// One bit flip: `param` indexes the layer's injectable parameters flattened
/// in canonical tensor order, `bit` is the IEEE-754 bit (0 = LSB of the
/// mantissa, 31 = sign).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flip {
    pub layer: usize,
    pub param: usize,
    pub bit: u32,
}

/// All flips for one trial, sorted by (layer, param, bit); positions are
/// distinct within the trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipPlan {
    pub ber: f64,
    pub trial: u64,
    pub flips: Vec<Flip>,
}

/// XORs one bit of an f32 (bit 31 = sign, 30..=23 exponent, 22..=0
/// mantissa). Applying it twice restores the original bit pattern.
pub fn bitflip(v: f32, bit: u32) -> Result<f32> {
    if bit > 31 {
        return Err(Error::InvalidArgument(format!(
            "bit index {bit} out of range for f32 (0..=31)"
        )));
    }
    Ok(f32::from_bits(v.to_bits() ^ (1u32 << bit)))
}

/// splitmix64 step, used to derive independent per-(trial, layer) seeds from
/// the master seed.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let s = splitmix64(master);
    let s = splitmix64(s ^ a);
    splitmix64(s ^ b)
}

/// Flip count for a layer holding `params` parameters at bit error rate
/// `ber`: `round_half_even(ber · params · 32)`.
pub fn flips_for_params(params: usize, ber: f64) -> usize {
    (ber * params as f64 * 32.0).round_ties_even() as usize
}

/// Plans the flips of one trial across all layers of the model.
pub fn plan_flips(model: &ModelGraph, ber: f64, master_seed: u64, trial: u64) -> Result<FlipPlan> {
    if !(0.0..=1.0).contains(&ber) || !ber.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bit error rate {ber} outside [0, 1]"
        )));
    }
    let mut flips = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let params = layer.param_count();
        if params == 0 {
            continue;
        }
        let n = flips_for_params(params, ber);
        if n == 0 {
            continue;
        }
        let total_bits = params * 32;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, trial, l as u64));
        let mut sites = rand::seq::index::sample(&mut rng, total_bits, n).into_vec();
        sites.sort_unstable();
        flips.extend(sites.into_iter().map(|site| Flip {
            layer: l,
            param: site / 32,
            bit: (site % 32) as u32,
        }));
    }
    Ok(FlipPlan { ber, trial, flips })
}

/// Returns a copy of the model with the planned flips applied. Applying the
/// same plan to the result restores the original model (XOR involution).
pub fn apply_flips(model: &ModelGraph, plan: &FlipPlan) -> Result<ModelGraph> {
    let mut faulty = model.clone();
    for flip in &plan.flips {
        let layer = faulty.layers.get_mut(flip.layer).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "flip targets layer {}, model has {}",
                flip.layer,
                model.layers.len()
            ))
        })?;
        layer.xor_param_bit(flip.param, flip.bit)?;
    }
    Ok(faulty)
}

/// A fault-injection campaign: every BER level × `trials` seeded trials.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub bers: Vec<f64>,
    pub trials: usize,
    pub master_seed: u64,
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bers.is_empty() {
            return Err(Error::InvalidArgument("campaign has no BER levels".into()));
        }
        for &ber in &self.bers {
            if !(0.0..=1.0).contains(&ber) || !ber.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "bit error rate {ber} outside [0, 1]"
                )));
            }
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("campaign has no trials".into()));
        }
        Ok(())
    }
}

/// One trial's outcome. `drop` is clean accuracy minus faulty accuracy, in
/// percentage points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub ber: f64,
    pub trial: usize,
    pub accuracy: f64,
    pub drop: f64,
}

/// Aggregate over one BER level.
#[derive(Debug, Clone, PartialEq)]
pub struct BerSummary {
    pub ber: f64,
    pub mean_accuracy: f64,
    pub mean_drop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignResult {
    pub clean_accuracy: f64,
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<BerSummary>,
    pub trials: usize,
    pub master_seed: u64,
}

/// Runs the campaign: trials execute in parallel (rayon), results are keyed
/// by trial index, and the aggregation is a fixed-order sequential mean, so
/// the outcome is byte-identical regardless of worker count.
pub fn run_campaign(
    model: &ModelGraph,
    test: &Dataset,
    config: &CampaignConfig,
) -> Result<CampaignResult> {
    config.validate()?;
    let clean_accuracy = evaluate(model, test)?;
    let jobs = config.bers.len() * config.trials;
    let outcomes: Vec<Result<f64>> = (0..jobs)
        .into_par_iter()
        .map(|j| {
            let ber = config.bers[j / config.trials];
            let trial = (j % config.trials) as u64;
            let plan = plan_flips(model, ber, config.master_seed, trial)?;
            let faulty = apply_flips(model, &plan)?;
            evaluate(&faulty, test)
        })
        .collect();
    let mut records = Vec::with_capacity(jobs);
    for (j, outcome) in outcomes.into_iter().enumerate() {
        let accuracy = outcome?;
        records.push(TrialRecord {
            ber: config.bers[j / config.trials],
            trial: j % config.trials,
            accuracy,
            drop: clean_accuracy - accuracy,
        });
    }
    let summaries = config
        .bers
        .iter()
        .enumerate()
        .map(|(bi, &ber)| {
            let sum: f64 = records[bi * config.trials..(bi + 1) * config.trials]
                .iter()
                .map(|r| r.accuracy)
                .sum();
            let mean_accuracy = sum / config.trials as f64;
            BerSummary {
                ber,
                mean_accuracy,
                mean_drop: clean_accuracy - mean_accuracy,
            }
        })
        .collect();
    Ok(CampaignResult {
        clean_accuracy,
        records,
        summaries,
        trials: config.trials,
        master_seed: config.master_seed,
    })
}

/// CSV of every trial: `ber,trial,accuracy,drop`.
pub fn trials_to_csv(result: &CampaignResult) -> String {
    let mut out = String::from("ber,trial,accuracy,drop\n");
    for r in &result.records {
        writeln!(out, "{},{},{},{}", r.ber, r.trial, r.accuracy, r.drop).unwrap();
    }
    out
}

/// CSV of per-BER aggregates: `ber,mean_accuracy,mean_drop,trials,seed`.
pub fn summary_to_csv(result: &CampaignResult) -> String {
    let mut out = String::from("ber,mean_accuracy,mean_drop,trials,seed\n");
    for s in &result.summaries {
        writeln!(
            out,
            "{},{},{},{},{}",
            s.ber, s.mean_accuracy, s.mean_drop, result.trials, result.master_seed
        )
        .unwrap();
    }
    out
}

/// Parses a summary CSV back into `(ber, mean_accuracy, mean_drop, trials,
/// seed)` rows.
pub fn summary_from_csv(text: &str) -> Result<Vec<(f64, f64, f64, usize, u64)>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "ber,mean_accuracy,mean_drop,trials,seed" {
        return Err(Error::InvalidArgument(format!(
            "unexpected summary CSV header `{header}`"
        )));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "row {}: expected 5 fields, got {}",
                ln + 2,
                fields.len()
            )));
        }
        let bad =
            |what: &str| Error::InvalidArgument(format!("row {}: cannot parse {what}", ln + 2));
        rows.push((
            fields[0].parse().map_err(|_| bad("ber"))?,
            fields[1].parse().map_err(|_| bad("mean_accuracy"))?,
            fields[2].parse().map_err(|_| bad("mean_drop"))?,
            fields[3].parse().map_err(|_| bad("trials"))?,
            fields[4].parse().map_err(|_| bad("seed"))?,
        ));
    }
    Ok(rows)
}

pub fn save_csv(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
