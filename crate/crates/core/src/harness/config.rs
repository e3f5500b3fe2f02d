use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BehaviorConfig, Quality};
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::numerics::Activation;
use crate::policy::{BcConfig, PolicyTrainConfig};
use crate::simulator::{NllFitConfig, SimTrainConfig};

/// Where the datasets come from. Explicit paths win; otherwise behavior
/// policies are trained on the true environment and data is collected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub expert: Option<PathBuf>,
    pub diverse: Option<PathBuf>,
    /// Tier of the generated diverse set; absent means expert-only.
    pub diverse_tier: Option<Quality>,
    pub expert_n: usize,
    pub diverse_n: usize,
    /// Transitions at the end of each dataset kept out of training.
    pub held_out: usize,
    pub seed: u64,
    pub behavior: BehaviorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            expert: None,
            diverse: None,
            diverse_tier: None,
            expert_n: 20_000,
            diverse_n: 10_000,
            held_out: 0,
            seed: 0,
            behavior: BehaviorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvId,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// True-environment episodes per evaluation.
    pub eval_episodes: usize,
    /// Margin coefficient `c` (margin = `c·R`); the tier default when absent.
    pub margin_c: Option<f64>,
    /// Also train and evaluate a behavior-cloning baseline per seed.
    pub bc_baseline: bool,
    pub data: DataConfig,
    pub sim: SimTrainConfig,
    pub policy: PolicyTrainConfig,
    pub nll: NllFitConfig,
    pub bc: BcConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvId::PointMass,
            seeds: (0..7).collect(),
            output_dir: PathBuf::from("runs"),
            eval_episodes: 20,
            margin_c: None,
            bc_baseline: false,
            data: DataConfig::default(),
            sim: SimTrainConfig::default(),
            policy: PolicyTrainConfig::default(),
            nll: NllFitConfig::default(),
            bc: BcConfig::default(),
        }
    }
}

impl RunConfig {
    /// Miniature schedule for test runs: 3 seeds, a narrow ReLU simulator,
    /// short stage-1 and stage-2 budgets and generated datasets.
    pub fn ci(env: EnvId) -> Self {
        let mut cfg = Self {
            env,
            seeds: vec![0, 1, 2],
            eval_episodes: 10,
            ..Self::default()
        };
        cfg.sim.iterations = 1500;
        cfg.sim.arch.transition_hidden = 32;
        cfg.sim.arch.reward_hidden = 32;
        cfg.sim.arch.activation = Activation::Relu;
        cfg.policy.episodes = 500;
        cfg.policy.eval_every = 50;
        cfg.policy.eval_episodes = 10;
        cfg.nll.iterations = 1500;
        cfg.bc.epochs = 20;
        cfg
    }

    /// Parses a TOML document. Errors carry the 1-based line they refer to.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| line_of_offset(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config(message) => Error::Parse {
                line: cfg.anchor(text, &message),
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Reads a config file. Relative dataset and output paths are resolved
    /// against the file's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.expert, &mut cfg.data.diverse]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        for p in [&cfg.data.expert, &cfg.data.diverse].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Parse {
                    line: line_of_key(
                        &text,
                        if Some(p) == cfg.data.expert.as_ref() {
                            "expert"
                        } else {
                            "diverse"
                        },
                    ),
                    message: format!("dataset file {} does not exist", p.display()),
                });
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be >= 1".into()));
        }
        if let Some(c) = self.margin_c {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::Config(format!("margin_c must be >= 0, got {c}")));
            }
        }
        if self.data.expert.is_none() && self.data.expert_n <= self.data.held_out {
            return Err(Error::Config("expert_n must exceed held_out".into()));
        }
        if self.data.diverse_tier == Some(Quality::Expert) {
            return Err(Error::Config(
                "diverse_tier must be medium or random".into(),
            ));
        }
        self.sim.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    pub fn has_diverse(&self) -> bool {
        self.data.diverse.is_some() || self.data.diverse_tier.is_some()
    }

    fn anchor(&self, text: &str, message: &str) -> usize {
        let key = [
            "seeds",
            "eval_episodes",
            "margin_c",
            "expert_n",
            "diverse_tier",
            "gamma",
            "horizon",
            "lambda",
            "alpha",
            "beta",
        ]
        .into_iter()
        .find(|k| message.contains(k))
        .unwrap_or("");
        line_of_key(text, key)
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment, or 0 when absent.
fn line_of_key(text: &str, key: &str) -> usize {
    if key.is_empty() {
        return 0;
    }
    text.lines()
        .position(|l| {
            l.trim_start()
                .strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map_or(0, |i| i + 1)
}
