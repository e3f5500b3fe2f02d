use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::{
    assemble, seed_report, sim_config, train_expert_only, train_stage1, train_stage2, PreparedData,
    Stage1,
};
use super::report::{Aggregate, MetricsReport, SeedReport, Timing};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::simulator::{
    fit_low_variance_transition, select_margin, train_simulator, NllFitConfig, RewardModel,
    SimOutcome, SimTrainConfig,
};

/// Margin coefficients `c` (margin = `c·R`) swept by default.
pub fn default_margin_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 * 0.2).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: f64,
    pub returns: Vec<f64>,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// One report per grid point, in grid order.
    pub reports: Vec<MetricsReport>,
    /// `R` per seed from the expert-only reward.
    pub r_max: Vec<(u64, f64)>,
}

impl SweepReport {
    /// Mean over the `c > 0` rows and the `c = 0` row, when both exist.
    pub fn positive_vs_zero(&self) -> Option<(f64, f64)> {
        let zero = self.rows.iter().find(|r| r.c == 0.0)?.aggregate.mean;
        let pos: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.c > 0.0)
            .map(|r| r.aggregate.mean)
            .collect();
        (!pos.is_empty()).then(|| (pos.iter().sum::<f64>() / pos.len() as f64, zero))
    }
}

fn require_diverse<'a>(data: &'a PreparedData, what: &str) -> Result<&'a Dataset> {
    data.diverse
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{what} needs a diverse dataset")))
}

/// Reruns both stages for each margin coefficient on shared datasets and
/// seeds. `R` is measured once per seed from the expert-only reward.
pub fn margin_sweep(
    cfg: &RunConfig,
    data: &PreparedData,
    grid: &[f64],
) -> Result<(SweepReport, Timing)> {
    cfg.validate()?;
    let diverse = require_diverse(data, "margin sweep")?;
    if grid.is_empty() || grid.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::Config(
            "margin grid must be non-empty with c >= 0".into(),
        ));
    }
    let mut timing = Timing::default();
    let mut per_c: Vec<Vec<SeedReport>> = vec![Vec::new(); grid.len()];
    let mut r_max = Vec::new();
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let selection = train_expert_only(cfg, data, seed)
            .and_then(|s| select_margin(&s.reward, &data.expert, diverse, Some(0.0)));
        timing.record(format!("seed {seed} reference"), t);
        let selection = match selection {
            Ok(s) => s,
            Err(e) => {
                per_c
                    .iter_mut()
                    .for_each(|v| v.push(SeedReport::failed(seed, &e)));
                continue;
            }
        };
        r_max.push((seed, selection.r_max));
        for (i, &c) in grid.iter().enumerate() {
            let t = Instant::now();
            let run = || -> Result<SeedReport> {
                let mut sel = selection.clone();
                sel.coefficient = c;
                sel.margin = c * sel.r_max;
                let sim_cfg = SimTrainConfig {
                    margin: Some(sel.margin),
                    ..sim_config(cfg, seed)
                };
                let stage1 = Stage1 {
                    sim: train_simulator(&sim_cfg, &data.expert, Some(diverse))?,
                    margin: Some(sel),
                };
                let policy = train_stage2(cfg, data, &stage1.sim, seed)?;
                seed_report(cfg, data, seed, &stage1, &policy)
            };
            per_c[i].push(run().unwrap_or_else(|e| SeedReport::failed(seed, &e)));
            timing.record(format!("seed {seed} c={c:.1}"), t);
        }
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (&c, seeds) in grid.iter().zip(per_c) {
        let report = assemble(cfg, data, seeds, Some(c), &format!("-c{c:.1}"));
        rows.push(SweepRow {
            c,
            returns: report
                .seeds
                .iter()
                .filter(|s| s.ok())
                .map(|s| s.return_mean)
                .collect(),
            aggregate: report.aggregate.clone(),
        });
        reports.push(report);
    }
    Ok((
        SweepReport {
            rows,
            reports,
            r_max,
        },
        timing,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSeed {
    pub seed: u64,
    pub high_return: f64,
    pub low_return: f64,
    /// Mean predicted dynamics std over the training transitions.
    pub high_predicted_std: f64,
    pub low_predicted_std: f64,
    /// Hash of the reward used by the two arms, which share it.
    pub reward_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub high: MetricsReport,
    pub low: MetricsReport,
    pub seeds: Vec<AblationSeed>,
}

/// Stage 2 twice against one frozen reward: once with the jointly trained
/// high-entropy dynamics and once with dynamics refit by plain Gaussian
/// likelihood on the same data.
pub fn variance_ablation(cfg: &RunConfig, data: &PreparedData) -> Result<(AblationReport, Timing)> {
    cfg.validate()?;
    let mut timing = Timing::default();
    let (mut high, mut low, mut diag) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let run = || -> Result<(SeedReport, SeedReport, AblationSeed)> {
            let stage1 = train_stage1(cfg, data, seed)?;
            let nll = NllFitConfig {
                seed,
                ..cfg.nll.clone()
            };
            let low_t = fit_low_variance_transition(
                &stage1.sim.transition,
                &nll,
                &data.expert,
                data.diverse.as_ref(),
            )?;
            let low_stage1 = Stage1 {
                sim: SimOutcome {
                    transition: low_t,
                    ..stage1.sim.clone()
                },
                margin: stage1.margin.clone(),
            };
            let hp = train_stage2(cfg, data, &stage1.sim, seed)?;
            let lp = train_stage2(cfg, data, &low_stage1.sim, seed)?;
            let h = seed_report(cfg, data, seed, &stage1, &hp)?;
            let l = seed_report(cfg, data, seed, &low_stage1, &lp)?;
            let all = data.union()?;
            let (s, a, _) = all.arrays();
            let d = AblationSeed {
                seed,
                high_return: h.return_mean,
                low_return: l.return_mean,
                high_predicted_std: stage1
                    .sim
                    .transition
                    .mean_predicted_std(s.view(), a.view())?,
                low_predicted_std: low_stage1
                    .sim
                    .transition
                    .mean_predicted_std(s.view(), a.view())?,
                reward_hash: h.reward_hash.clone(),
            };
            Ok((h, l, d))
        };
        match run() {
            Ok((h, l, d)) => {
                high.push(h);
                low.push(l);
                diag.push(d);
            }
            Err(e) => {
                high.push(SeedReport::failed(seed, &e));
                low.push(SeedReport::failed(seed, &e));
            }
        }
        timing.record(format!("seed {seed}"), t);
    }
    Ok((
        AblationReport {
            high: assemble(cfg, data, high, None, "-high"),
            low: assemble(cfg, data, low, None, "-low"),
            seeds: diag,
        },
        timing,
    ))
}

/// Mean reward per (seen/unseen, expert/diverse) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationTable {
    pub seen_expert: f64,
    pub seen_diverse: f64,
    pub unseen_expert: f64,
    pub unseen_diverse: f64,
    pub margin: Option<f64>,
}

/// Slack allowed below the margin when checking a reward gap.
pub const MARGIN_SLACK: f64 = 0.05;

impl GeneralizationTable {
    pub fn seen_gap(&self) -> f64 {
        self.seen_expert - self.seen_diverse
    }

    pub fn unseen_gap(&self) -> f64 {
        self.unseen_expert - self.unseen_diverse
    }

    /// `|seen − unseen|` for the expert and the diverse column.
    pub fn column_gaps(&self) -> (f64, f64) {
        (
            (self.seen_expert - self.unseen_expert).abs(),
            (self.seen_diverse - self.unseen_diverse).abs(),
        )
    }

    /// Both gaps at least `m − MARGIN_SLACK`; vacuous without a margin.
    pub fn margin_holds(&self) -> bool {
        self.margin.is_none_or(|m| {
            self.seen_gap() >= m - MARGIN_SLACK && self.unseen_gap() >= m - MARGIN_SLACK
        })
    }

    pub fn cells(&self) -> [f64; 4] {
        [
            self.seen_expert,
            self.seen_diverse,
            self.unseen_expert,
            self.unseen_diverse,
        ]
    }
}

pub fn mean_reward(reward: &RewardModel, d: &Dataset) -> Result<f64> {
    let (s, _, s_next) = d.arrays();
    Ok(reward
        .rewards(s.view(), s_next.view())?
        .mean()
        .unwrap_or(f64::NAN))
}

pub fn reward_generalization_test(
    reward: &RewardModel,
    seen: (&Dataset, &Dataset),
    unseen: (&Dataset, &Dataset),
    margin: Option<f64>,
) -> Result<GeneralizationTable> {
    Ok(GeneralizationTable {
        seen_expert: mean_reward(reward, seen.0)?,
        seen_diverse: mean_reward(reward, seen.1)?,
        unseen_expert: mean_reward(reward, unseen.0)?,
        unseen_diverse: mean_reward(reward, unseen.1)?,
        margin,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationSeed {
    pub seed: u64,
    pub table: GeneralizationTable,
    pub reward_hash: String,
}

/// Trains stage 1 on the seen splits for each seed and tabulates mean
/// rewards on seen and held-out transitions.
pub fn reward_generalization_run(
    cfg: &RunConfig,
    data: &PreparedData,
) -> Result<Vec<GeneralizationSeed>> {
    cfg.validate()?;
    let diverse = require_diverse(data, "reward generalization test")?;
    let (Some(ue), Some(ud)) = (&data.expert_unseen, &data.diverse_unseen) else {
        return Err(Error::Config(
            "reward generalization test needs data.held_out > 0".into(),
        ));
    };
    cfg.seeds
        .iter()
        .map(|&seed| {
            let stage1 = train_stage1(cfg, data, seed)?;
            let margin = match stage1.sim.mode {
                crate::simulator::RewardMode::Multi { margin, .. } => Some(margin),
                crate::simulator::RewardMode::Single => None,
            };
            let table = reward_generalization_test(
                &stage1.sim.reward,
                (&data.expert, diverse),
                (ue, ud),
                margin,
            )?;
            Ok(GeneralizationSeed {
                seed,
                table,
                reward_hash: stage1.sim.reward.param_hash(),
            })
        })
        .collect()
}
