use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::InfractionFactors;
use super::HarnessError;
use crate::env::{EnvConfig, RouteGenerator, RouteSpec};
use crate::guidance::GuidanceConfig;
use crate::infer::prompt::MentorTask;
use crate::infer::BatcherConfig;
use crate::learner::LearnerConfig;
use crate::mentor::MentorConfig;
use crate::shaping::ShapingConfig;

/// Where episode routes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteConfig {
    /// Fixed route file; when set every episode drives this route.
    pub file: Option<PathBuf>,
    pub generator: RouteGenerator,
    /// Base seed of the evaluation route set.
    pub eval_seed: u64,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self { file: None, generator: RouteGenerator::default(), eval_seed: 1_000_000 }
    }
}

impl RouteConfig {
    pub fn fixed_route(&self) -> Result<Option<RouteSpec>, HarnessError> {
        match &self.file {
            None => Ok(None),
            Some(p) => RouteSpec::load(p).map(Some).map_err(|e| HarnessError::Config(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Parallel environment slots.
    pub num_envs: usize,
    /// Single-threaded with a simulated inference clock; bitwise reproducible.
    pub deterministic: bool,
    /// Virtual seconds per environment step in deterministic mode.
    pub step_time: f64,
    /// Write every n-th step to the metrics CSV.
    pub log_every: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    /// Greedy evaluation every n steps during training; 0 disables.
    pub eval_interval: u64,
    pub eval_during_training: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            num_envs: 8,
            deterministic: false,
            step_time: 0.01,
            log_every: 1,
            checkpoint_every: 0,
            eval_interval: 0,
            eval_during_training: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub eval_episodes: usize,
    pub output_dir: PathBuf,
    pub runtime: RuntimeConfig,
    pub env: EnvConfig,
    pub routes: RouteConfig,
    pub learner: LearnerConfig,
    pub guidance: GuidanceConfig,
    pub batcher: BatcherConfig,
    pub mentor: MentorConfig,
    pub shaping: ShapingConfig,
    pub infractions: InfractionFactors,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            total_steps: 100_000,
            eval_episodes: 20,
            output_dir: PathBuf::from("runs/default"),
            runtime: RuntimeConfig::default(),
            env: EnvConfig::default(),
            routes: RouteConfig::default(),
            learner: LearnerConfig::default(),
            guidance: GuidanceConfig::default(),
            batcher: BatcherConfig::default(),
            mentor: MentorConfig::default(),
            shaping: ShapingConfig::default(),
            infractions: InfractionFactors::default(),
        }
    }
}

fn cfg_err(block: &str, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("[{block}] {e}"))
}

impl RunConfig {
    /// Small state-only configuration used by the examples and tests: curvy
    /// routes without traffic or signals, compact networks, short episodes.
    pub fn compact() -> Self {
        let mut c = Self::default();
        c.total_steps = 15_000;
        c.eval_episodes = 10;
        c.runtime.deterministic = true;
        c.runtime.eval_interval = 500;
        c.runtime.eval_during_training = 3;
        c.env.grid_size = 0;
        c.env.vehicles = 0;
        c.env.pedestrians = 0;
        c.env.max_episode_steps = 200;
        c.routes.generator = RouteGenerator::curvy(80.0);
        c.learner.hidden = vec![64, 64];
        c.learner.convs.clear();
        c.learner.batch_size = 64;
        c.learner.learning_starts = 1_000;
        c.learner.actor_lr = 1e-3;
        c.learner.critic_lr = 1e-3;
        c.learner.polyak = 0.01;
        c.guidance.delta = 0.3;
        c.guidance.horizon = 5_000;
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(cfg_err("run", "at least one seed required"));
        }
        if self.runtime.num_envs == 0 {
            return Err(cfg_err("runtime", "num_envs must be positive"));
        }
        if !(self.runtime.step_time > 0.0) {
            return Err(cfg_err("runtime", "step_time must be positive"));
        }
        if self.runtime.log_every == 0 {
            return Err(cfg_err("runtime", "log_every must be positive"));
        }
        self.env.validate().map_err(|e| cfg_err("env", e))?;
        self.learner.validate().map_err(|e| cfg_err("learner", e))?;
        self.guidance.validate().map_err(|e| cfg_err("guidance", e))?;
        if self.guidance.awag_enabled && self.learner.mode == crate::learner::PolicyMode::Deterministic {
            return Err(cfg_err("guidance", "action guidance on the actor needs a stochastic policy"));
        }
        self.batcher.validate().map_err(|e| cfg_err("batcher", e))?;
        self.mentor.validate().map_err(|e| cfg_err("mentor", e))?;
        self.shaping.validate().map_err(|e| cfg_err("shaping", e))?;
        self.infractions.validate().map_err(|e| cfg_err("infractions", e))?;
        if self.routes.generator.length <= 0.0 || self.routes.generator.spacing <= 0.0 {
            return Err(cfg_err("routes", "generator length and spacing must be positive"));
        }
        Ok(())
    }

    /// What the mentor is asked for, if anything.
    pub fn mentor_task(&self) -> Option<MentorTask> {
        let action = self.guidance.vmr_enabled || self.guidance.awag_enabled;
        match (action, self.shaping.enabled) {
            (true, true) => Some(MentorTask::Both),
            (true, false) => Some(MentorTask::Action),
            (false, true) => Some(MentorTask::Score),
            (false, false) => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `block.field=value` overrides, parsing values as TOML.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), HarnessError> {
        let mut doc: toml::Value = toml::Value::try_from(&*self).map_err(|e| HarnessError::Config(e.to_string()))?;
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override `{ov}` is not key=value")))?;
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut cur = &mut doc;
            let parts: Vec<&str> = path.trim().split('.').collect();
            for (i, p) in parts.iter().enumerate() {
                let table = cur
                    .as_table_mut()
                    .ok_or_else(|| HarnessError::Config(format!("override `{path}`: `{p}` is not a block")))?;
                if i + 1 == parts.len() {
                    table.insert(p.to_string(), value.clone());
                    break;
                }
                cur = table
                    .get_mut(*p)
                    .ok_or_else(|| HarnessError::Config(format!("override `{path}`: no block `{p}`")))?;
            }
        }
        *self = doc.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        self.validate()
    }
}
