use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::policy::{mean_std, PolicyLogEntry};
use crate::simulator::SimLogEntry;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Stage-1 curves are thinned to at most this many points in reports.
const MAX_CURVE_POINTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub r_max: f64,
    pub coefficient: f64,
    pub margin: f64,
    /// Mean expert minus mean diverse reward under the expert-only reward.
    pub gap: f64,
    pub reliable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub return_mean: f64,
    pub return_std: f64,
    pub normalized: Option<f64>,
    pub bc_return: Option<f64>,
    pub margin: Option<MarginSummary>,
    pub multi_dataset: bool,
    /// True when any stage-1 log entry carries a penalty value.
    pub penalty_invoked: bool,
    pub sim_diverged: Option<usize>,
    pub truncated_rollouts: usize,
    pub reward_hash: String,
    pub sim_curve: Vec<SimLogEntry>,
    pub policy_log: Vec<PolicyLogEntry>,
    pub error: Option<String>,
}

impl SeedReport {
    pub(crate) fn failed(seed: u64, err: &Error) -> Self {
        Self {
            seed,
            return_mean: f64::NAN,
            return_std: f64::NAN,
            normalized: None,
            bc_return: None,
            margin: None,
            multi_dataset: false,
            penalty_invoked: false,
            sim_diverged: None,
            truncated_rollouts: 0,
            reward_hash: String::new(),
            sim_curve: Vec::new(),
            policy_log: Vec::new(),
            error: Some(err.to_string()),
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

pub(crate) fn thin_curve(log: &[SimLogEntry]) -> Vec<SimLogEntry> {
    let stride = log.len().div_ceil(MAX_CURVE_POINTS).max(1);
    let mut out: Vec<_> = log.iter().step_by(stride).cloned().collect();
    if let Some(last) = log.last() {
        if out.last() != Some(last) {
            out.push(last.clone());
        }
    }
    out
}

/// Mean and population std over per-seed return means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std,
            n: values.len(),
        }
    }
}

/// Reference returns of the behavior expert and of uniform random actions
/// under the same evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub expert_return: f64,
    pub random_return: f64,
}

impl References {
    /// `(R − R_random) / (R_expert − R_random)`.
    pub fn normalize(&self, ret: f64) -> f64 {
        crate::data::normalized_score(ret, self.random_return, self.expert_return)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub run_id: String,
    pub env: String,
    pub dataset_combo: String,
    pub algo: String,
    pub alpha: f64,
    pub lambda: f64,
    pub margin_c: Option<f64>,
    pub config: RunConfig,
    pub dataset_hashes: Vec<String>,
    pub references: Option<References>,
    pub seeds: Vec<SeedReport>,
    /// Over the seeds that completed.
    pub aggregate: Aggregate,
    pub bc_aggregate: Option<Aggregate>,
}

impl MetricsReport {
    pub fn recompute_aggregate(&self) -> Aggregate {
        Aggregate::of(
            &self
                .seeds
                .iter()
                .filter(|s| s.ok())
                .map(|s| s.return_mean)
                .collect::<Vec<_>>(),
        )
    }

    pub fn normalized_mean(&self) -> Option<f64> {
        self.references
            .as_ref()
            .map(|r| r.normalize(self.aggregate.mean))
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.seeds
            .iter()
            .filter(|s| s.ok())
            .map(|s| CsvRow {
                run_id: self.run_id.clone(),
                env: self.env.clone(),
                dataset_combo: self.dataset_combo.clone(),
                algo: self.algo.clone(),
                seed: s.seed,
                return_mean: s.return_mean,
                return_std: s.return_std,
                margin_c: self.margin_c,
                alpha: self.alpha,
                lambda: self.lambda,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if r.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Version {
                expected: REPORT_FORMAT_VERSION,
                found: r.format_version,
            });
        }
        Ok(r)
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        write_csv(dir.join(format!("{stem}.csv")), &self.csv_rows())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub env: String,
    pub dataset_combo: String,
    pub algo: String,
    pub seed: u64,
    pub return_mean: f64,
    pub return_std: f64,
    pub margin_c: Option<f64>,
    pub alpha: f64,
    pub lambda: f64,
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[CsvRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

/// Aggregates per `run_id` recomputed from CSV rows, in first-seen order.
pub fn aggregates_from_rows(rows: &[CsvRow]) -> Vec<(String, Aggregate)> {
    let mut ids: Vec<String> = Vec::new();
    for r in rows {
        if !ids.contains(&r.run_id) {
            ids.push(r.run_id.clone());
        }
    }
    ids.into_iter()
        .map(|id| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.run_id == id)
                .map(|r| r.return_mean)
                .collect();
            (id, Aggregate::of(&vals))
        })
        .collect()
}

/// Wall-clock seconds per labelled phase, kept beside a report so that the
/// report itself stays reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phases: Vec<(String, f64)>,
}

impl Timing {
    pub fn record(&mut self, label: impl Into<String>, start: std::time::Instant) {
        self.phases
            .push((label.into(), start.elapsed().as_secs_f64()));
    }

    pub fn total(&self) -> f64 {
        self.phases.iter().map(|(_, s)| s).sum()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("timing serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(id: &str, seed: u64, ret: f64) -> CsvRow {
        CsvRow {
            run_id: id.into(),
            env: "pointmass".into(),
            dataset_combo: "expert".into(),
            algo: "sac".into(),
            seed,
            return_mean: ret,
            return_std: 0.5,
            margin_c: if seed.is_multiple_of(2) {
                None
            } else {
                Some(1.6)
            },
            alpha: 0.1,
            lambda: 1.0,
        }
    }

    #[test]
    fn thinning_keeps_last_entry() {
        let log: Vec<SimLogEntry> = (0..1001)
            .map(|i| SimLogEntry {
                iteration: i,
                reward_loss: 0.0,
                transition_loss: 0.0,
                mean_expert_reward: 0.0,
                mean_rollout_reward: 0.0,
                entropy: 0.0,
                penalty: None,
            })
            .collect();
        let thin = thin_curve(&log);
        assert!(thin.len() <= MAX_CURVE_POINTS + 1);
        assert_eq!(thin.last().unwrap().iteration, 1000);
        assert_eq!(thin[0].iteration, 0);
    }

    proptest! {
        #[test]
        fn csv_round_trip_preserves_aggregates(rets in proptest::collection::vec(-1e4f64..1e4, 1..12)) {
            let rows: Vec<CsvRow> = rets.iter().enumerate().map(|(i, r)| row(if i % 3 == 0 { "a" } else { "b" }, i as u64, *r)).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.csv");
            write_csv(&path, &rows).unwrap();
            let back = read_csv(&path).unwrap();
            prop_assert_eq!(&back, &rows);
            prop_assert_eq!(aggregates_from_rows(&back), aggregates_from_rows(&rows));
        }
    }
}
