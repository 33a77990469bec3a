//! Traffic-to-target comparison of several compressors over several seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fedavg::{run_federated, CompressorSpec, FLConfig, RoundMetrics};
use crate::{Error, Result};

/// Written in place of a count when the target accuracy is never reached.
pub const UNREACHED: &str = "unreached";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// Fraction of the final accuracy of an uncompressed run with the same seed.
    OracleFraction {
        fraction: f64,
    },
    Accuracy {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: FLConfig,
    pub compressors: Vec<CompressorSpec>,
    pub seeds: Vec<u64>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub compressor: String,
    pub seed: u64,
    pub target: f64,
    pub rounds_to_target: Option<usize>,
    pub bytes_to_target: Option<u64>,
    pub final_accuracy: f64,
}

/// Per-compressor means; reached-only for the traffic columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAggregate {
    pub compressor: String,
    pub runs: usize,
    pub reached: usize,
    pub mean_rounds_to_target: Option<f64>,
    pub mean_bytes_to_target: Option<f64>,
    pub mean_final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAggregate>,
}

/// First round at or above `target` and the uplink bytes spent through it.
pub fn to_target(metrics: &[RoundMetrics], target: f64) -> Option<(usize, u64)> {
    let mut bytes = 0u64;
    for m in metrics {
        bytes += m.uplink_bytes_total;
        if m.test_accuracy >= target {
            return Some((m.round, bytes));
        }
    }
    None
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.compressors.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidInput(
                "sweep needs compressors and seeds".into(),
            ));
        }
        self.base.validate()
    }

    pub fn run(&self) -> Result<SweepReport> {
        self.validate()?;
        let with = |compressor, seed| FLConfig {
            compressor,
            seed,
            ..self.base.clone()
        };
        let targets: Vec<f64> = match self.target {
            Target::Accuracy { value } => vec![value; self.seeds.len()],
            Target::OracleFraction { fraction } => self
                .seeds
                .par_iter()
                .map(|&s| {
                    let m = run_federated(&with(CompressorSpec::None, s))?;
                    Ok(fraction * m.last().map_or(0.0, |r| r.test_accuracy))
                })
                .collect::<Result<_>>()?,
        };
        let jobs: Vec<(CompressorSpec, usize)> = self
            .compressors
            .iter()
            .flat_map(|&c| (0..self.seeds.len()).map(move |i| (c, i)))
            .collect();
        let rows: Vec<SweepRow> = jobs
            .par_iter()
            .map(|&(c, i)| {
                let seed = self.seeds[i];
                let m = run_federated(&with(c, seed))?;
                let hit = to_target(&m, targets[i]);
                Ok(SweepRow {
                    compressor: c.label(),
                    seed,
                    target: targets[i],
                    rounds_to_target: hit.map(|h| h.0),
                    bytes_to_target: hit.map(|h| h.1),
                    final_accuracy: m.last().map_or(0.0, |r| r.test_accuracy),
                })
            })
            .collect::<Result<_>>()?;
        let aggregates = self
            .compressors
            .iter()
            .enumerate()
            .map(|(ci, c)| {
                let group = &rows[ci * self.seeds.len()..(ci + 1) * self.seeds.len()];
                let reached: Vec<&SweepRow> = group
                    .iter()
                    .filter(|r| r.rounds_to_target.is_some())
                    .collect();
                let avg = |f: &dyn Fn(&SweepRow) -> f64| {
                    (!reached.is_empty())
                        .then(|| reached.iter().map(|r| f(r)).sum::<f64>() / reached.len() as f64)
                };
                SweepAggregate {
                    compressor: c.label(),
                    runs: group.len(),
                    reached: reached.len(),
                    mean_rounds_to_target: avg(&|r| r.rounds_to_target.unwrap_or(0) as f64),
                    mean_bytes_to_target: avg(&|r| r.bytes_to_target.unwrap_or(0) as f64),
                    mean_final_accuracy: group.iter().map(|r| r.final_accuracy).sum::<f64>()
                        / group.len() as f64,
                }
            })
            .collect();
        Ok(SweepReport { rows, aggregates })
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| UNREACHED.to_string(), |x| x.to_string())
}

impl SweepReport {
    pub const CSV_HEADER: &'static str =
        "compressor,seed,target,rounds_to_target,bytes_to_target,final_accuracy";

    /// Data rows in the sweep's compressor and seed order, then one `mean` row per compressor.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.compressor,
                r.seed,
                r.target,
                opt(r.rounds_to_target),
                opt(r.bytes_to_target),
                r.final_accuracy
            ));
        }
        for a in &self.aggregates {
            s.push_str(&format!(
                "{},mean,,{},{},{}\n",
                a.compressor,
                opt(a.mean_rounds_to_target),
                opt(a.mean_bytes_to_target),
                a.mean_final_accuracy
            ));
        }
        s
    }
}
