use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use offsim::checkpoint::Checkpoint;
use offsim::data::{
    collect_dataset, collect_random, mix, read_dataset, train_behavior_suite, write_dataset,
    DataSource, Quality,
};
use offsim::envs::{EnvId, EnvSpec};
use offsim::harness::{self, RunConfig};
use offsim::policy::{bc_train, train_policy, Algo, TrainedPolicy};
use offsim::simulator::{
    select_margin, train_simulator, RewardModel, SimTrainConfig, TransitionModel,
};

#[derive(Parser)]
#[command(
    name = "offsim",
    version,
    about = "Offline simulator learning and policy training on toy control tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a dataset of one quality tier from the true environment.
    GenData {
        #[arg(long)]
        env: EnvId,
        #[arg(long)]
        tier: Quality,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Behavior-training episodes for the expert and medium tiers.
        #[arg(long)]
        behavior_episodes: Option<usize>,
    },
    /// Stage 1: fit reward and dynamics; writes transition.ckpt, reward.ckpt and sim_log.json.
    TrainSim {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        diverse: Option<PathBuf>,
        /// Explicit margin for the multi-dataset objective.
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Margin `c·R` from a reward trained on expert data only.
    SelectMargin {
        #[arg(long)]
        reward: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        diverse: PathBuf,
        /// Coefficient override; the tier default otherwise.
        #[arg(long)]
        c: Option<f64>,
    },
    /// Stage 2 inside a learned simulator; writes policy.ckpt and policy_log.json.
    TrainPolicy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        transition: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        diverse: Option<PathBuf>,
        #[arg(long)]
        algo: Option<Algo>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavior cloning baseline.
    TrainBc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// True-environment return of a policy checkpoint.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        env: EnvId,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Full pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Both stages per margin coefficient on shared data; writes sweep.json and sweep.csv.
    SweepMargin {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Stage 2 with jointly trained vs likelihood-refit dynamics under one reward.
    AblateVariance {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mean learned reward on seen and held-out expert/diverse transitions.
    RewardGenTest {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            RunConfig::from_path(p).with_context(|| format!("reading config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn echo(cfg: &impl serde::Serialize) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            env,
            tier,
            n,
            seed,
            out,
            behavior_episodes,
        } => {
            let spec = EnvSpec::new(env);
            let data = match tier {
                Quality::Random => collect_random(&spec, n, seed)?,
                _ => {
                    let mut bcfg = offsim::data::BehaviorConfig {
                        seed,
                        ..Default::default()
                    };
                    if let Some(e) = behavior_episodes {
                        bcfg.episodes = e;
                    }
                    let suite = train_behavior_suite(&spec, &bcfg)?;
                    let policy = if tier == Quality::Expert {
                        &suite.expert
                    } else {
                        &suite.medium
                    };
                    collect_dataset(&spec, &policy.policy, tier, n, seed)?
                }
            };
            write_dataset(&data, &out)?;
            println!(
                "wrote {} {} transitions to {}",
                data.len(),
                tier,
                out.display()
            );
        }
        Command::TrainSim {
            config,
            expert,
            diverse,
            margin,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let e = read_dataset(&expert)?;
            let d = diverse.map(read_dataset).transpose()?;
            let sim_cfg = SimTrainConfig {
                seed,
                margin: margin.or(cfg.sim.margin),
                ..cfg.sim.clone()
            };
            let sim = train_simulator(&sim_cfg, &e, d.as_ref())?;
            std::fs::create_dir_all(&out)?;
            sim.transition
                .to_checkpoint(e.env, echo(&sim_cfg))
                .write(out.join("transition.ckpt"))?;
            sim.reward
                .to_checkpoint(e.env, e.action_dim, echo(&sim_cfg))
                .write(out.join("reward.ckpt"))?;
            write_json(&out.join("sim_log.json"), &sim.log)?;
            if let Some(it) = sim.diverged {
                eprintln!("warning: stage 1 stopped at iteration {it} on a non-finite loss");
            }
            println!("wrote simulator checkpoints to {}", out.display());
        }
        Command::SelectMargin {
            reward,
            expert,
            diverse,
            c,
        } => {
            let r = RewardModel::from_checkpoint(&Checkpoint::read(&reward)?)?;
            let sel = select_margin(&r, &read_dataset(&expert)?, &read_dataset(&diverse)?, c)?;
            println!("{}", serde_json::to_string_pretty(&sel)?);
            if !sel.reliable {
                eprintln!("warning: expert and diverse rewards barely differ (gap {:.4}); margin is unreliable", sel.gap);
            }
        }
        Command::TrainPolicy {
            config,
            transition,
            reward,
            expert,
            diverse,
            algo,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let t = TransitionModel::from_checkpoint(&Checkpoint::read(&transition)?)?;
            let r = RewardModel::from_checkpoint(&Checkpoint::read(&reward)?)?;
            let e = read_dataset(&expert)?;
            let mixed = diverse
                .map(|p| read_dataset(p).and_then(|d| mix(e.clone(), d)))
                .transpose()?;
            let source = match &mixed {
                Some(m) => DataSource::Mixed(m),
                None => DataSource::Single(&e),
            };
            let spec = EnvSpec::new(e.env);
            let mut pcfg = offsim::policy::PolicyTrainConfig {
                seed,
                ..cfg.policy.clone()
            };
            if let Some(a) = algo {
                pcfg.algo = a;
            }
            let outcome = train_policy(&pcfg, &t, &r, &source, &spec)?;
            std::fs::create_dir_all(&out)?;
            outcome
                .policy
                .to_checkpoint(e.env, echo(&pcfg))
                .write(out.join("policy.ckpt"))?;
            write_json(&out.join("policy_log.json"), &outcome.log)?;
            match outcome.best_eval {
                Some(v) => println!(
                    "best evaluation return {v:.4}; wrote {}",
                    out.join("policy.ckpt").display()
                ),
                None => println!("wrote {}", out.join("policy.ckpt").display()),
            }
        }
        Command::TrainBc {
            data,
            out,
            epochs,
            seed,
        } => {
            let d = read_dataset(&data)?;
            let spec = EnvSpec::new(d.env);
            let mut cfg = offsim::policy::BcConfig {
                seed,
                ..Default::default()
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let bc = bc_train(&d, &spec, &cfg)?;
            bc.policy.to_checkpoint(d.env, echo(&cfg)).write(&out)?;
            println!(
                "final NLL {:.6}; wrote {}",
                bc.epoch_nll.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Evaluate {
            policy,
            env,
            episodes,
            seeds,
        } => {
            let p = TrainedPolicy::from_checkpoint(&Checkpoint::read(&policy)?)?;
            let ev = harness::evaluate(&EnvSpec::new(env), &p, episodes, &seeds)?;
            println!("{}", serde_json::to_string_pretty(&ev)?);
        }
        Command::Run { config } => {
            let cfg = load_config(Some(&config))?;
            let report = harness::run_pipeline(&cfg)?;
            for s in &report.seeds {
                if let Some(e) = &s.error {
                    eprintln!("seed {} failed: {e}", s.seed);
                }
            }
            println!(
                "{}: return {:.4} ± {:.4} over {} seeds; report in {}",
                report.run_id,
                report.aggregate.mean,
                report.aggregate.std,
                report.aggregate.n,
                cfg.output_dir.display()
            );
        }
        Command::SweepMargin { config, grid } => {
            let cfg = load_config(Some(&config))?;
            let data = harness::prepare_data(&cfg)?;
            let grid = grid.unwrap_or_else(harness::default_margin_grid);
            let (sweep, timing) = harness::margin_sweep(&cfg, &data, &grid)?;
            write_json(&cfg.output_dir.join("sweep.json"), &sweep)?;
            let rows: Vec<_> = sweep.reports.iter().flat_map(|r| r.csv_rows()).collect();
            harness::write_csv(cfg.output_dir.join("sweep.csv"), &rows)?;
            timing.write(cfg.output_dir.join("sweep.timing.json"))?;
            println!("{:>5}  {:>12}  {:>10}", "c", "return", "std");
            for r in &sweep.rows {
                println!(
                    "{:>5.1}  {:>12.4}  {:>10.4}",
                    r.c, r.aggregate.mean, r.aggregate.std
                );
            }
        }
        Command::AblateVariance { config } => {
            let cfg = load_config(Some(&config))?;
            let data = harness::prepare_data(&cfg)?;
            let (ab, timing) = harness::variance_ablation(&cfg, &data)?;
            write_json(&cfg.output_dir.join("ablation.json"), &ab)?;
            let rows: Vec<_> = ab
                .high
                .csv_rows()
                .into_iter()
                .chain(ab.low.csv_rows())
                .collect();
            harness::write_csv(cfg.output_dir.join("ablation.csv"), &rows)?;
            timing.write(cfg.output_dir.join("ablation.timing.json"))?;
            println!(
                "high variance: {:.4} ± {:.4}",
                ab.high.aggregate.mean, ab.high.aggregate.std
            );
            println!(
                "low variance:  {:.4} ± {:.4}",
                ab.low.aggregate.mean, ab.low.aggregate.std
            );
        }
        Command::RewardGenTest { config } => {
            let cfg = load_config(Some(&config))?;
            let data = harness::prepare_data(&cfg)?;
            let seeds = harness::reward_generalization_run(&cfg, &data)?;
            write_json(&cfg.output_dir.join("reward_generalization.json"), &seeds)?;
            println!(
                "{:>6}  {:>9}  {:>9}  {:>9}  {:>9}",
                "seed", "seen E", "seen D", "unseen E", "unseen D"
            );
            for s in &seeds {
                let [a, b, c, d] = s.table.cells();
                println!("{:>6}  {a:>9.4}  {b:>9.4}  {c:>9.4}  {d:>9.4}", s.seed);
            }
            if seeds.iter().any(|s| !s.table.margin_holds()) {
                bail!("margin condition violated on at least one seed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
