//! Run configuration, experiment pipelines, reporting, and the invariant
//! self-test behind the command-line interface.
//!
//! Config files are line-based `key = value` text. Keys use dotted sections
//! (`ptn.epochs = 400`); a `[section]` header line prefixes the keys that
//! follow it, so the same file can be written either way. `#` starts a
//! comment. Every key has a default; the effective config (defaults plus
//! overrides) is embedded in every output directory together with a hash
//! that is stable under key reordering.

mod pipeline;
mod report;
mod selftest;

pub use pipeline::{
    attack_stage, baseline_stage, gen_scenes, oracle_stage, train_agent_stage,
    train_classifier_stage, train_ptn_stage, write_run_config,
};
pub use report::report_stage;
pub use selftest::run_selftest;

use crate::agent::{AgentTrainConfig, RewardConfig};
use crate::attack::AttackConfig;
use crate::classify::{SuccessRule, TrainClassifierConfig};
use crate::error::{ElaError, Result};
use crate::percept::{PtnConfig, PtnTrainMode};
use crate::scene::SignClass;
use std::collections::BTreeMap;
use std::path::Path;

/// Everything an end-to-end run needs, with defaults for every field.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    /// Classes the per-class stages (PTN, agent, attack) run on.
    pub classes: Vec<SignClass>,
    pub scene_routes: usize,
    pub scene_frames: usize,
    pub scene_held_out: usize,
    pub ptn: PtnConfig,
    pub classifier: TrainClassifierConfig,
    pub agent: AgentTrainConfig,
    pub attack: AttackConfig,
    /// Test-frame budget for the reachability oracle stage.
    pub oracle_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            classes: vec![
                SignClass::Speed30,
                SignClass::Speed60,
                SignClass::Speed90,
                SignClass::Stop,
            ],
            scene_routes: 10,
            scene_frames: 14,
            scene_held_out: 2,
            // Parameter-space regression converges well past 0.90 held-out
            // mIOU on every class in ~10 s; mask-mode training stays
            // available via `ptn.mode = mask`.
            ptn: PtnConfig {
                mode: PtnTrainMode::ParamMse,
                epochs: 8000,
                ..PtnConfig::default()
            },
            classifier: TrainClassifierConfig::default(),
            agent: AgentTrainConfig::default(),
            attack: AttackConfig::default(),
            oracle_frames: 24,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ElaError::Config(format!("bad value '{value}' for {key}")))
}

impl RunConfig {
    /// Apply one dotted-key override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "classes" => {
                self.classes = v
                    .split(',')
                    .map(|s| SignClass::from_name(s.trim()))
                    .collect::<Result<_>>()
                    .map_err(|e| ElaError::Config(e.to_string()))?;
                if self.classes.is_empty() {
                    return Err(ElaError::Config("classes must not be empty".into()));
                }
            }
            "scene.routes" => self.scene_routes = parse_num(key, v)?,
            "scene.frames" => self.scene_frames = parse_num(key, v)?,
            "scene.held_out" => self.scene_held_out = parse_num(key, v)?,
            "ptn.epochs" => self.ptn.epochs = parse_num(key, v)?,
            "ptn.lr" => self.ptn.lr = parse_num(key, v)?,
            "ptn.tau" => self.ptn.tau = parse_num(key, v)?,
            "ptn.tau_start" => self.ptn.tau_start = parse_num(key, v)?,
            "ptn.batch" => self.ptn.batch = parse_num(key, v)?,
            "ptn.grid" => self.ptn.grid = parse_num(key, v)?,
            "ptn.warm_frac" => self.ptn.warm_frac = parse_num(key, v)?,
            "ptn.mask_anchor" => self.ptn.mask_anchor = parse_num(key, v)?,
            "ptn.mask_lr_scale" => self.ptn.mask_lr_scale = parse_num(key, v)?,
            "ptn.mode" => {
                self.ptn.mode = match v {
                    "mask" => PtnTrainMode::MaskMse,
                    "param" => PtnTrainMode::ParamMse,
                    other => {
                        return Err(ElaError::Config(format!(
                            "ptn.mode must be mask or param, got '{other}'"
                        )))
                    }
                }
            }
            "classifier.epochs" => self.classifier.epochs = parse_num(key, v)?,
            "classifier.lr" => self.classifier.lr = parse_num(key, v)?,
            "classifier.batch" => self.classifier.batch = parse_num(key, v)?,
            "classifier.floor" => self.classifier.accuracy_floor = parse_num(key, v)?,
            "agent.epochs" => self.agent.epochs = parse_num(key, v)?,
            "agent.segments" => self.agent.segments_per_epoch = parse_num(key, v)?,
            "agent.n_max" => {
                self.agent.n_max = parse_num(key, v)?;
                self.attack.n_max = self.agent.n_max;
            }
            "agent.beta" => {
                self.agent.beta = parse_num(key, v)?;
                self.attack.beta = self.agent.beta;
            }
            "agent.rule" => {
                let rule = SuccessRule::from_name(v).map_err(|e| ElaError::Config(e.to_string()))?;
                self.agent.rule = rule;
                self.attack.rule = rule;
            }
            "ppo.clip" => self.agent.ppo.clip = parse_num(key, v)?,
            "ppo.epochs" => self.agent.ppo.epochs = parse_num(key, v)?,
            "ppo.minibatch" => self.agent.ppo.minibatch = parse_num(key, v)?,
            "ppo.lr_policy" => self.agent.ppo.lr_policy = parse_num(key, v)?,
            "ppo.lr_value" => self.agent.ppo.lr_value = parse_num(key, v)?,
            "ppo.value_coef" => self.agent.ppo.value_coef = parse_num(key, v)?,
            "ppo.entropy_coef" => self.agent.ppo.entropy_coef = parse_num(key, v)?,
            "reward.r_success" => self.agent.reward.r_success = parse_num(key, v)?,
            "reward.alpha" => self.agent.reward.alpha = parse_num(key, v)?,
            "reward.omega0" => self.agent.reward.omega0 = parse_num(key, v)?,
            "reward.r_omega" => self.agent.reward.r_omega = parse_num(key, v)?,
            "reward.r_lambda" => self.agent.reward.r_lambda = parse_num(key, v)?,
            "reward.gamma1" => self.agent.reward.gamma1 = parse_num(key, v)?,
            "reward.gamma2" => self.agent.reward.gamma2 = parse_num(key, v)?,
            "attack.budget" => self.attack.search_budget = parse_num(key, v)?,
            "attack.eot_subsample" => self.attack.eot_subsample = parse_num(key, v)?,
            "oracle.frames" => self.oracle_frames = parse_num(key, v)?,
            other => {
                return Err(ElaError::Config(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    /// Parse a config file's text into overrides on `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ElaError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let mut full = key.trim().to_string();
            if !section.is_empty() {
                full = format!("{section}.{full}");
            }
            self.set(&full, value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let text = std::fs::read_to_string(path).map_err(|e| {
            ElaError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        cfg.apply_text(&text)?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_overrides(overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_routes < 2
            || self.scene_held_out == 0
            || self.scene_held_out >= self.scene_routes
        {
            return Err(ElaError::Config(
                "need scene.routes >= 2 and 1 <= scene.held_out < scene.routes".into(),
            ));
        }
        if self.scene_frames < 5 {
            return Err(ElaError::Config("need scene.frames >= 5".into()));
        }
        self.agent.reward.validate()?;
        Ok(())
    }

    /// The complete effective configuration as sorted dotted keys.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put(
            "classes",
            self.classes
                .iter()
                .map(|c| c.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("scene.routes", self.scene_routes.to_string());
        put("scene.frames", self.scene_frames.to_string());
        put("scene.held_out", self.scene_held_out.to_string());
        put("ptn.epochs", self.ptn.epochs.to_string());
        put("ptn.lr", format!("{}", self.ptn.lr));
        put("ptn.tau", format!("{}", self.ptn.tau));
        put("ptn.tau_start", format!("{}", self.ptn.tau_start));
        put("ptn.batch", self.ptn.batch.to_string());
        put("ptn.grid", self.ptn.grid.to_string());
        put("ptn.warm_frac", format!("{}", self.ptn.warm_frac));
        put("ptn.mask_anchor", format!("{}", self.ptn.mask_anchor));
        put("ptn.mask_lr_scale", format!("{}", self.ptn.mask_lr_scale));
        put(
            "ptn.mode",
            match self.ptn.mode {
                PtnTrainMode::MaskMse => "mask".to_string(),
                PtnTrainMode::ParamMse => "param".to_string(),
            },
        );
        put("classifier.epochs", self.classifier.epochs.to_string());
        put("classifier.lr", format!("{}", self.classifier.lr));
        put("classifier.batch", self.classifier.batch.to_string());
        put(
            "classifier.floor",
            format!("{}", self.classifier.accuracy_floor),
        );
        put("agent.epochs", self.agent.epochs.to_string());
        put("agent.segments", self.agent.segments_per_epoch.to_string());
        put("agent.n_max", self.agent.n_max.to_string());
        put("agent.beta", format!("{}", self.agent.beta));
        put("agent.rule", self.agent.rule.name().to_string());
        put("ppo.clip", format!("{}", self.agent.ppo.clip));
        put("ppo.epochs", self.agent.ppo.epochs.to_string());
        put("ppo.minibatch", self.agent.ppo.minibatch.to_string());
        put("ppo.lr_policy", format!("{}", self.agent.ppo.lr_policy));
        put("ppo.lr_value", format!("{}", self.agent.ppo.lr_value));
        put("ppo.value_coef", format!("{}", self.agent.ppo.value_coef));
        put(
            "ppo.entropy_coef",
            format!("{}", self.agent.ppo.entropy_coef),
        );
        let r = &self.agent.reward;
        put("reward.r_success", format!("{}", r.r_success));
        put("reward.alpha", format!("{}", r.alpha));
        put("reward.omega0", format!("{}", r.omega0));
        put("reward.r_omega", format!("{}", r.r_omega));
        put("reward.r_lambda", format!("{}", r.r_lambda));
        put("reward.gamma1", format!("{}", r.gamma1));
        put("reward.gamma2", format!("{}", r.gamma2));
        put("attack.budget", self.attack.search_budget.to_string());
        put(
            "attack.eot_subsample",
            format!("{}", self.attack.eot_subsample),
        );
        put("oracle.frames", self.oracle_frames.to_string());
        m
    }

    /// Canonical serialization: sorted `key = value` lines.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// FNV-1a over the canonical serialization; stable under the order keys
    /// were supplied in.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_text().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Reward config extended with the agent's PPO constants, recorded in
    /// checkpoints and reports.
    pub fn reward(&self) -> &RewardConfig {
        &self.agent.reward
    }
}

/// Convenience for stage code: the scoped seed of a named stage.
pub fn stage_seed(cfg: &RunConfig, stage: &str) -> crate::rng::SeedNode {
    crate::rng::SeedNode::new(cfg.seed).child(stage)
}
