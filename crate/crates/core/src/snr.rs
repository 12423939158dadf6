//! Signal-to-noise ratio of second-moment tensors along sharing axes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Census, CensusEntry, LayerType};
use crate::tensor::{mean_along, var_along_with, Axes, Tensor, VarianceEstimator};

pub const DEFAULT_EPS_SNR: f64 = 1e-12;

/// Averaged SNR keyed by `(block, k)`.
pub type AveragedSnr = BTreeMap<(String, Axes), f64>;

/// Averaged SNR keyed by `(layer type, k)`.
pub type TypeSnr = BTreeMap<(LayerType, Axes), f64>;

/// `mean_K(V)^2 / (var_K(V) + eps)`, averaged over the axes that remain.
pub fn snr_k(v: &Tensor, k: Axes) -> Result<f64> {
    snr_k_with(v, k, DEFAULT_EPS_SNR, VarianceEstimator::Population)
}

pub fn snr_k_with(v: &Tensor, k: Axes, eps_snr: f64, est: VarianceEstimator) -> Result<f64> {
    if k == Axes::None {
        return Err(Error::Contract(
            "SNR needs at least one reduced axis".into(),
        ));
    }
    if !(eps_snr >= 0.0) {
        return Err(Error::Input(format!(
            "eps_snr must be non-negative, got {eps_snr}"
        )));
    }
    if v.data().iter().any(|&x| x < 0.0) {
        return Err(Error::Input("second moment has negative entries".into()));
    }
    let mean = mean_along(v, k)?;
    let var = var_along_with(v, k, est)?;
    let total: f64 = mean
        .data()
        .iter()
        .zip(var.data())
        .map(|(m, s)| m * m / (s + eps_snr))
        .sum();
    Ok(total / mean.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSample {
    pub step: u64,
    pub block: String,
    pub layer_type: LayerType,
    pub depth: usize,
    pub k: Axes,
    pub snr: f64,
}

/// Axes measured for a block of the given rank.
pub fn measured_axes(rank: usize) -> &'static [Axes] {
    if rank == 2 {
        &Axes::REDUCING
    } else {
        &[Axes::Both]
    }
}

/// SNR samples in recording order: by step, then block name, then axes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SnrTrajectory {
    samples: Vec<SnrSample>,
}

impl SnrTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn samples(&self) -> &[SnrSample] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct measurement steps, increasing.
    pub fn steps(&self) -> Vec<u64> {
        let mut steps: Vec<u64> = self.samples.iter().map(|s| s.step).collect();
        steps.dedup();
        steps
    }

    /// Appends samples for every untied block at step `t`.
    pub fn record<'a>(
        &mut self,
        t: u64,
        blocks: impl IntoIterator<Item = (&'a CensusEntry, &'a Tensor)>,
        eps_snr: f64,
        est: VarianceEstimator,
    ) -> Result<()> {
        let last = self.samples.last().map(|s| s.step);
        if last.is_some_and(|l| t < l) {
            return Err(Error::Contract(format!(
                "step {t} recorded after step {}",
                last.unwrap_or(0)
            )));
        }
        let mut fresh = Vec::new();
        for (e, v) in blocks {
            if e.tied_to.is_some() {
                continue;
            }
            if v.shape() != e.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "second moment of `{}` has shape {:?}, census says {:?}",
                    e.name,
                    v.shape(),
                    e.shape
                )));
            }
            for &k in measured_axes(e.shape.len()) {
                let snr = snr_k_with(v, k, eps_snr, est)?;
                fresh.push(SnrSample {
                    step: t,
                    block: e.name.clone(),
                    layer_type: e.layer_type,
                    depth: e.depth,
                    k,
                    snr,
                });
            }
        }
        let start = self.samples.partition_point(|s| s.step < t);
        let mut merged: Vec<SnrSample> = self.samples[start..].to_vec();
        merged.extend(fresh);
        merged.sort_by(|a, b| (&a.block, a.k).cmp(&(&b.block, b.k)));
        if let Some(w) = merged
            .windows(2)
            .find(|w| w[0].block == w[1].block && w[0].k == w[1].k)
        {
            return Err(Error::Contract(format!(
                "duplicate SNR sample ({t}, {}, {})",
                w[0].block, w[0].k
            )));
        }
        self.samples.truncate(start);
        self.samples.extend(merged);
        Ok(())
    }

    /// `step,block,layer_type,depth,k,snr` with a header row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.samples {
            w.serialize(s).map_err(|e| Error::Input(e.to_string()))?;
        }
        if self.samples.is_empty() {
            w.write_record(["step", "block", "layer_type", "depth", "k", "snr"])
                .map_err(|e| Error::Input(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| csv_parse_error(&e))?;
        if header != vec!["step", "block", "layer_type", "depth", "k", "snr"] {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected header {header:?}"),
            });
        }
        let mut samples: Vec<SnrSample> = Vec::new();
        for row in r.deserialize() {
            let s: SnrSample = row.map_err(|e| csv_parse_error(&e))?;
            if let Some(prev) = samples.last() {
                if (prev.step, &prev.block, prev.k) >= (s.step, &s.block, s.k) {
                    return Err(Error::Parse {
                        line: samples.len() + 2,
                        msg: "rows out of order or duplicated".into(),
                    });
                }
            }
            samples.push(s);
        }
        Ok(SnrTrajectory { samples })
    }
}

fn csv_parse_error(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Steps at which SNR is measured: every `dense_every` steps up to
/// `dense_until`, then every `sparse_every` steps up to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementGrid {
    pub total: u64,
    pub dense_every: u64,
    pub dense_until: u64,
    pub sparse_every: u64,
}

impl MeasurementGrid {
    /// Dense every `total/100` steps for the first tenth of training,
    /// every `total/10` afterwards.
    pub fn for_total(total: u64) -> Self {
        MeasurementGrid {
            total,
            dense_every: (total / 100).max(1),
            dense_until: total / 10,
            sparse_every: (total / 10).max(1),
        }
    }

    pub fn contains(&self, t: u64) -> bool {
        if t == 0 || t > self.total {
            return false;
        }
        if t <= self.dense_until {
            t.is_multiple_of(self.dense_every)
        } else {
            t.is_multiple_of(self.sparse_every)
        }
    }

    pub fn steps(&self) -> Vec<u64> {
        (1..=self.total).filter(|&t| self.contains(t)).collect()
    }
}

/// Mean SNR over measurement steps for every `(block, k)`.
pub fn averaged_snr(traj: &SnrTrajectory) -> Result<AveragedSnr> {
    if traj.is_empty() {
        return Err(Error::Input("empty SNR trajectory".into()));
    }
    let mut sums: BTreeMap<(String, Axes), (f64, usize)> = BTreeMap::new();
    for s in traj.samples() {
        let acc = sums.entry((s.block.clone(), s.k)).or_insert((0.0, 0));
        acc.0 += s.snr;
        acc.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(key, (sum, n))| (key, sum / n as f64))
        .collect())
}

/// Mean of averaged SNR over blocks of the same layer type.
pub fn depth_averaged_snr(avg: &AveragedSnr, census: &Census) -> Result<TypeSnr> {
    let mut sums: BTreeMap<(LayerType, Axes), (f64, usize)> = BTreeMap::new();
    for ((block, k), &snr) in avg {
        let e = census
            .get(block)
            .ok_or_else(|| Error::Input(format!("SNR for block `{block}` missing from census")))?;
        let acc = sums.entry((e.layer_type, *k)).or_insert((0.0, 0));
        acc.0 += snr;
        acc.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(key, (sum, n))| (key, sum / n as f64))
        .collect())
}
