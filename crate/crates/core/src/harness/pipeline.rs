use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::report::{
    thin_curve, Aggregate, MarginSummary, MetricsReport, References, SeedReport, Timing,
    REPORT_FORMAT_VERSION,
};
use crate::data::{
    collect_dataset, collect_random, mix, read_dataset, train_behavior_suite, BehaviorConfig,
    DataSource, Dataset, MixedDataset, Quality,
};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::{
    bc_train, evaluate_actor, mean_std, train_policy, Actor, EvalResult, GaussianPolicy,
    PolicyOutcome, RandomActor,
};
use crate::simulator::{
    select_margin, train_simulator, MarginSelection, RewardMode, SimOutcome, SimTrainConfig,
};

const EXPERT_COLLECT_SALT: u64 = 0xE4;
const DIVERSE_COLLECT_SALT: u64 = 0xD1;

/// Returns of several independent evaluations pooled together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub per_seed: Vec<EvalResult>,
    /// Over every episode of every seed.
    pub mean: f64,
    pub std: f64,
}

/// Deterministic-action true-environment evaluation, `episodes` per seed.
pub fn evaluate(
    spec: &EnvSpec,
    actor: &dyn Actor,
    episodes: usize,
    seeds: &[u64],
) -> Result<SeedEval> {
    if seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    let per_seed = seeds
        .iter()
        .map(|&s| evaluate_actor(spec, actor, episodes, s))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = per_seed
        .iter()
        .flat_map(|r| r.returns.iter().copied())
        .collect();
    let (mean, std) = mean_std(&all);
    Ok(SeedEval {
        per_seed,
        mean,
        std,
    })
}

/// Training splits, their held-out remainders and reference returns.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub expert: Dataset,
    pub diverse: Option<Dataset>,
    pub mixed: Option<MixedDataset>,
    pub expert_unseen: Option<Dataset>,
    pub diverse_unseen: Option<Dataset>,
    pub behavior_expert: Option<GaussianPolicy>,
    pub references: References,
}

impl PreparedData {
    pub fn source(&self) -> DataSource<'_> {
        match &self.mixed {
            Some(m) => DataSource::Mixed(m),
            None => DataSource::Single(&self.expert),
        }
    }

    pub fn hashes(&self) -> Vec<String> {
        self.source().hashes()
    }

    pub fn combo(&self) -> String {
        match &self.diverse {
            Some(d) => format!("expert-{}", d.quality),
            None => "expert".into(),
        }
    }

    /// Expert and diverse training transitions as one expert-tagged set.
    pub fn union(&self) -> Result<Dataset> {
        match &self.diverse {
            None => Ok(self.expert.clone()),
            Some(d) => {
                let e = &self.expert;
                let ts = e
                    .transitions()
                    .iter()
                    .chain(d.transitions())
                    .cloned()
                    .collect();
                Dataset::new(
                    e.env,
                    Quality::Expert,
                    e.state_dim,
                    e.action_dim,
                    ts,
                    e.seed,
                    e.generator_return,
                )
            }
        }
    }
}

fn hold_out(d: Dataset, n: usize) -> Result<(Dataset, Option<Dataset>)> {
    if n == 0 {
        return Ok((d, None));
    }
    let (seen, unseen) = d.split(d.len().saturating_sub(n))?;
    Ok((seen, Some(unseen)))
}

/// Loads or generates the datasets named by `cfg.data` and measures the
/// reference returns with the same protocol the pipeline uses.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let spec = EnvSpec::new(cfg.env);
    let dc = &cfg.data;
    let needs_behavior =
        dc.expert.is_none() || (dc.diverse.is_none() && dc.diverse_tier == Some(Quality::Medium));
    let suite = if needs_behavior {
        Some(train_behavior_suite(
            &spec,
            &BehaviorConfig {
                seed: dc.seed,
                ..dc.behavior.clone()
            },
        )?)
    } else {
        None
    };
    let expert = match &dc.expert {
        Some(p) => read_dataset(p)?,
        None => {
            let s = suite.as_ref().expect("behavior suite trained");
            collect_dataset(
                &spec,
                &s.expert.policy,
                Quality::Expert,
                dc.expert_n,
                dc.seed ^ EXPERT_COLLECT_SALT,
            )?
        }
    };
    let diverse = match (&dc.diverse, dc.diverse_tier) {
        (Some(p), _) => Some(read_dataset(p)?),
        (None, Some(Quality::Medium)) => {
            let s = suite.as_ref().expect("behavior suite trained");
            Some(collect_dataset(
                &spec,
                &s.medium.policy,
                Quality::Medium,
                dc.diverse_n,
                dc.seed ^ DIVERSE_COLLECT_SALT,
            )?)
        }
        (None, Some(_)) => Some(collect_random(
            &spec,
            dc.diverse_n,
            dc.seed ^ DIVERSE_COLLECT_SALT,
        )?),
        (None, None) => None,
    };
    for d in std::iter::once(&expert).chain(diverse.as_ref()) {
        if d.env != cfg.env {
            return Err(Error::Config(format!(
                "dataset is for {} but the run targets {}",
                d.env, cfg.env
            )));
        }
    }
    let (expert, expert_unseen) = hold_out(expert, dc.held_out)?;
    let (diverse, diverse_unseen) = match diverse {
        Some(d) => {
            let (a, b) = hold_out(d, dc.held_out)?;
            (Some(a), b)
        }
        None => (None, None),
    };
    let mixed = diverse
        .as_ref()
        .map(|d| mix(expert.clone(), d.clone()))
        .transpose()?;

    let behavior_expert = suite.map(|s| s.expert.policy);
    let expert_return = match &behavior_expert {
        Some(p) => evaluate(&spec, p, cfg.eval_episodes, &cfg.seeds)?.mean,
        None => expert.generator_return,
    };
    let random_return = evaluate(
        &spec,
        &RandomActor { spec: spec.clone() },
        cfg.eval_episodes,
        &cfg.seeds,
    )?
    .mean;
    Ok(PreparedData {
        expert,
        diverse,
        mixed,
        expert_unseen,
        diverse_unseen,
        behavior_expert,
        references: References {
            expert_return,
            random_return,
        },
    })
}

/// Stage-1 result for one seed plus the margin used, if any.
#[derive(Clone, Debug)]
pub struct Stage1 {
    pub sim: SimOutcome,
    pub margin: Option<MarginSelection>,
}

pub(crate) fn sim_config(cfg: &RunConfig, seed: u64) -> SimTrainConfig {
    SimTrainConfig {
        seed,
        ..cfg.sim.clone()
    }
}

/// Expert-only stage 1, the reference reward for margin selection.
pub fn train_expert_only(cfg: &RunConfig, data: &PreparedData, seed: u64) -> Result<SimOutcome> {
    train_simulator(
        &SimTrainConfig {
            margin: None,
            ..sim_config(cfg, seed)
        },
        &data.expert,
        None,
    )
}

/// Stage 1 for one seed. With a diverse set and no explicit margin, an
/// expert-only reward is trained first and `m = c·R` is read off it.
pub fn train_stage1(cfg: &RunConfig, data: &PreparedData, seed: u64) -> Result<Stage1> {
    let Some(diverse) = &data.diverse else {
        return Ok(Stage1 {
            sim: train_expert_only(cfg, data, seed)?,
            margin: None,
        });
    };
    let (margin, selection) = match cfg.sim.margin {
        Some(m) => (m, None),
        None => {
            let reference = train_expert_only(cfg, data, seed)?;
            let sel = select_margin(&reference.reward, &data.expert, diverse, cfg.margin_c)?;
            (sel.margin, Some(sel))
        }
    };
    let sim = train_simulator(
        &SimTrainConfig {
            margin: Some(margin),
            ..sim_config(cfg, seed)
        },
        &data.expert,
        Some(diverse),
    )?;
    Ok(Stage1 {
        sim,
        margin: selection,
    })
}

pub fn train_stage2(
    cfg: &RunConfig,
    data: &PreparedData,
    sim: &SimOutcome,
    seed: u64,
) -> Result<PolicyOutcome> {
    let spec = EnvSpec::new(cfg.env);
    let pcfg = crate::policy::PolicyTrainConfig {
        seed,
        ..cfg.policy.clone()
    };
    train_policy(&pcfg, &sim.transition, &sim.reward, &data.source(), &spec)
}

pub(crate) fn seed_report(
    cfg: &RunConfig,
    data: &PreparedData,
    seed: u64,
    stage1: &Stage1,
    policy: &PolicyOutcome,
) -> Result<SeedReport> {
    let spec = EnvSpec::new(cfg.env);
    let ev = evaluate_actor(&spec, &policy.policy, cfg.eval_episodes, seed)?;
    let sim = &stage1.sim;
    Ok(SeedReport {
        seed,
        return_mean: ev.mean,
        return_std: ev.std,
        normalized: Some(data.references.normalize(ev.mean)),
        bc_return: None,
        margin: stage1.margin.as_ref().map(|m| MarginSummary {
            r_max: m.r_max,
            coefficient: m.coefficient,
            margin: m.margin,
            gap: m.gap,
            reliable: m.reliable,
        }),
        multi_dataset: matches!(sim.mode, RewardMode::Multi { .. }),
        penalty_invoked: sim.log.iter().any(|l| l.penalty.is_some()),
        sim_diverged: sim.diverged,
        truncated_rollouts: policy.truncated_rollouts,
        reward_hash: sim.reward.param_hash(),
        sim_curve: thin_curve(&sim.log),
        policy_log: policy.log.clone(),
        error: None,
    })
}

fn bc_return(cfg: &RunConfig, data: &PreparedData, seed: u64) -> Result<f64> {
    let spec = EnvSpec::new(cfg.env);
    let bc = bc_train(
        &data.union()?,
        &spec,
        &crate::policy::BcConfig {
            seed,
            ..cfg.bc.clone()
        },
    )?;
    Ok(evaluate_actor(&spec, &bc.policy, cfg.eval_episodes, seed)?.mean)
}

fn run_seed(
    cfg: &RunConfig,
    data: &PreparedData,
    seed: u64,
    timing: &mut Timing,
) -> Result<SeedReport> {
    let t = Instant::now();
    let stage1 = train_stage1(cfg, data, seed)?;
    timing.record(format!("seed {seed} stage 1"), t);
    let t = Instant::now();
    let policy = train_stage2(cfg, data, &stage1.sim, seed)?;
    timing.record(format!("seed {seed} stage 2"), t);
    let mut report = seed_report(cfg, data, seed, &stage1, &policy)?;
    if cfg.bc_baseline {
        let t = Instant::now();
        report.bc_return = Some(bc_return(cfg, data, seed)?);
        timing.record(format!("seed {seed} bc"), t);
    }
    Ok(report)
}

pub(crate) fn run_id(cfg: &RunConfig, combo: &str, tag: &str) -> String {
    let digest = Sha256::digest(serde_json::to_vec(cfg).expect("config serializes"));
    format!(
        "{}-{combo}-{}{tag}-{}",
        cfg.env,
        cfg.policy.algo,
        &hex::encode(digest)[..8]
    )
}

pub(crate) fn assemble(
    cfg: &RunConfig,
    data: &PreparedData,
    seeds: Vec<SeedReport>,
    margin_c: Option<f64>,
    tag: &str,
) -> MetricsReport {
    let combo = data.combo();
    let ok: Vec<&SeedReport> = seeds.iter().filter(|s| s.ok()).collect();
    let aggregate = Aggregate::of(&ok.iter().map(|s| s.return_mean).collect::<Vec<_>>());
    let bc: Vec<f64> = ok.iter().filter_map(|s| s.bc_return).collect();
    let margin_c = margin_c.or(cfg.margin_c).or_else(|| {
        data.diverse
            .as_ref()
            .filter(|_| cfg.sim.margin.is_none())
            .map(|d| crate::simulator::default_margin_coefficient(d.quality))
    });
    MetricsReport {
        format_version: REPORT_FORMAT_VERSION,
        run_id: run_id(cfg, &combo, tag),
        env: cfg.env.to_string(),
        dataset_combo: combo,
        algo: cfg.policy.algo.to_string(),
        alpha: cfg.sim.alpha,
        lambda: cfg.policy.lambda,
        margin_c,
        config: cfg.clone(),
        dataset_hashes: data.hashes(),
        references: Some(data.references.clone()),
        seeds,
        aggregate,
        bc_aggregate: (!bc.is_empty()).then(|| Aggregate::of(&bc)),
    }
}

/// Both stages and evaluation for every configured seed on prepared data.
/// A failing seed is recorded and the remaining seeds still run.
pub fn run_pipeline_on(cfg: &RunConfig, data: &PreparedData) -> Result<(MetricsReport, Timing)> {
    cfg.validate()?;
    let mut timing = Timing::default();
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, data, s, &mut timing).unwrap_or_else(|e| SeedReport::failed(s, &e)))
        .collect();
    Ok((assemble(cfg, data, seeds, None, ""), timing))
}

/// Prepares data, runs every seed and writes `report.json`, `report.csv`
/// and `report.timing.json` into the configured output directory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let t = Instant::now();
    let data = prepare_data(cfg)?;
    let mut timing = Timing::default();
    timing.record("data", t);
    let (report, run_timing) = run_pipeline_on(cfg, &data)?;
    timing.phases.extend(run_timing.phases);
    report.write(&cfg.output_dir, "report")?;
    timing.write(cfg.output_dir.join("report.timing.json"))?;
    Ok(report)
}
