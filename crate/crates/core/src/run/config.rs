//! Line-oriented `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::agents::{AgentConfig, AgentKind, RlOptimizer};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::optim::MomentumSource;
use crate::spr::SprConfig;

/// Environment variable naming the root directory for run outputs.
pub const OUT_ENV: &str = "STREAM_RL_OUT";
const DEFAULT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub total_frames: u64,
    pub log_every: u64,
    /// Empty: derived from the run name under the output root.
    pub out_dir: String,
    pub agent: AgentConfig,
    pub explore_fraction: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub obs_norm: bool,
    pub reward_norm: bool,
    pub spr_enabled: bool,
    pub spr: SprConfig,
    /// Number of rollout steps of encoder latents to export; 0 disables.
    pub export_latents: usize,
}

fn explore_default(kind: AgentKind) -> f64 {
    match kind {
        AgentKind::StreamQ => 0.2,
        AgentKind::Dqn | AgentKind::Qrc => 0.1,
    }
}

impl RunConfig {
    pub fn defaults(kind: AgentKind) -> Self {
        Self {
            env: EnvKind::BreakoutMini,
            seed: 0,
            total_frames: 500_000,
            log_every: 1000,
            out_dir: String::new(),
            agent: AgentConfig::defaults(kind),
            explore_fraction: explore_default(kind),
            eps_start: 1.0,
            eps_end: 0.01,
            obs_norm: true,
            reward_norm: true,
            spr_enabled: false,
            spr: SprConfig::default(),
            export_latents: 0,
        }
    }

    /// Parses `file` text, then applies `overrides` in order. Defaults follow
    /// the agent named last among both.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_lines(text)?;
        pairs.extend(overrides.iter().cloned());
        let kind = match pairs.iter().rev().find(|(k, _)| k == "agent") {
            Some((_, v)) => v.parse()?,
            None => AgentKind::Qrc,
        };
        let mut cfg = Self::defaults(kind);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "env" => self.env = v.parse()?,
            "agent" => self.agent.kind = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "total_frames" => self.total_frames = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            "gamma" => self.agent.gamma = num(key, v)?,
            "lambda" => self.agent.lambda = num(key, v)?,
            "lr" => self.agent.lr = num(key, v)?,
            "kappa" => self.agent.kappa = num(key, v)?,
            "optimizer" => self.agent.optimizer = v.parse::<RlOptimizer>()?,
            "sparsity" => self.agent.sparsity = num(key, v)?,
            "explore_fraction" => self.explore_fraction = num(key, v)?,
            "eps_start" => self.eps_start = num(key, v)?,
            "eps_end" => self.eps_end = num(key, v)?,
            "obs_norm" => self.obs_norm = flag(key, v)?,
            "reward_norm" => self.reward_norm = flag(key, v)?,
            "qrc.aux_lr_scale" => self.agent.aux_lr_scale = num(key, v)?,
            "qrc.beta" => self.agent.beta_qrc = num(key, v)?,
            "qrc.freeze_aux" => self.agent.freeze_aux = flag(key, v)?,
            "dqn.target_period" => self.agent.target_period = num(key, v)?,
            "dqn.buffer" => self.agent.buffer = num(key, v)?,
            "spr.enabled" => self.spr_enabled = flag(key, v)?,
            "spr.k" => self.spr.k = num(key, v)?,
            "spr.lambda" => self.spr.lambda = num(key, v)?,
            "spr.tau" => self.spr.tau = num(key, v)?,
            "spr.augment" => self.spr.augment = flag(key, v)?,
            "spr.shift" => self.spr.shift = num(key, v)?,
            "spr.orth" => self.spr.orth = flag(key, v)?,
            "spr.orth2" => self.spr.orth2 = flag(key, v)?,
            "spr.beta_orth" => self.spr.beta_orth = num(key, v)?,
            "spr.ortho_momentum" => {
                self.spr.momentum = match v {
                    "projected" => MomentumSource::Projected,
                    "raw" => MomentumSource::Raw,
                    _ => return Err(Error::config(key, format!("expected projected|raw, got `{v}`"))),
                }
            }
            "spr.shared_projection" => self.spr.shared_projection = flag(key, v)?,
            "spr.lr" => self.spr.lr = num(key, v)?,
            "spr.mu_shared" => self.spr.mu_shared = num(key, v)?,
            "export_latents" => self.export_latents = num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.explore_fraction) {
            return Err(Error::config("explore_fraction", "must be in [0, 1]"));
        }
        for (k, v) in [("eps_start", self.eps_start), ("eps_end", self.eps_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(k, "must be in [0, 1]"));
            }
        }
        if self.agent.kappa.is_nan() || self.agent.kappa <= 1.0 {
            return Err(Error::config("kappa", "must exceed 1"));
        }
        if self.agent.kind == AgentKind::Dqn && self.agent.buffer == 0 {
            return Err(Error::config("dqn.buffer", "must be at least 1"));
        }
        if self.agent.kind == AgentKind::Dqn && self.agent.target_period == 0 {
            return Err(Error::config("dqn.target_period", "must be at least 1"));
        }
        if self.agent.optimizer == RlOptimizer::Obgd && self.agent.kind != AgentKind::StreamQ {
            return Err(Error::config("optimizer", "obgd is only available for streamq"));
        }
        if !(0.0..1.0).contains(&self.agent.gamma) {
            return Err(Error::config("gamma", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.agent.lambda) {
            return Err(Error::config("lambda", "must be in [0, 1]"));
        }
        if !(self.agent.lr > 0.0 && self.agent.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.agent.sparsity) {
            return Err(Error::config("sparsity", "must be in [0, 1)"));
        }
        self.spr.validate()
    }

    /// Short identifier such as `breakout_mini-qrc+spr+orth-s3`.
    pub fn run_name(&self) -> String {
        let mut name = format!("{}-{}", self.env, self.agent.kind);
        if self.spr_enabled {
            name.push_str("+spr");
            if self.spr.orth {
                name.push_str("+orth");
            }
            if self.spr.orth2 {
                name.push_str("+orth2");
            }
        }
        write!(name, "-s{}", self.seed).expect("string write");
        name
    }

    /// Output directory: `out_dir` if absolute, otherwise below
    /// `$STREAM_RL_OUT` (or `runs`).
    pub fn output_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
        if self.out_dir.is_empty() {
            return root.join(self.run_name());
        }
        let p = PathBuf::from(&self.out_dir);
        if p.is_absolute() {
            p
        } else {
            root.join(p)
        }
    }

    /// Fully resolved configuration in the input format.
    pub fn echo(&self) -> String {
        let a = &self.agent;
        let s = &self.spr;
        let momentum = match s.momentum {
            MomentumSource::Projected => "projected",
            MomentumSource::Raw => "raw",
        };
        let lines: Vec<(&str, String)> = vec![
            ("env", self.env.to_string()),
            ("agent", a.kind.to_string()),
            ("seed", self.seed.to_string()),
            ("total_frames", self.total_frames.to_string()),
            ("log_every", self.log_every.to_string()),
            ("out_dir", self.out_dir.clone()),
            ("gamma", a.gamma.to_string()),
            ("lambda", a.lambda.to_string()),
            ("lr", a.lr.to_string()),
            ("kappa", a.kappa.to_string()),
            ("optimizer", a.optimizer.name().to_string()),
            ("sparsity", a.sparsity.to_string()),
            ("explore_fraction", self.explore_fraction.to_string()),
            ("eps_start", self.eps_start.to_string()),
            ("eps_end", self.eps_end.to_string()),
            ("obs_norm", self.obs_norm.to_string()),
            ("reward_norm", self.reward_norm.to_string()),
            ("qrc.aux_lr_scale", a.aux_lr_scale.to_string()),
            ("qrc.beta", a.beta_qrc.to_string()),
            ("qrc.freeze_aux", a.freeze_aux.to_string()),
            ("dqn.target_period", a.target_period.to_string()),
            ("dqn.buffer", a.buffer.to_string()),
            ("spr.enabled", self.spr_enabled.to_string()),
            ("spr.k", s.k.to_string()),
            ("spr.lambda", s.lambda.to_string()),
            ("spr.tau", s.tau.to_string()),
            ("spr.augment", s.augment.to_string()),
            ("spr.shift", s.shift.to_string()),
            ("spr.orth", s.orth.to_string()),
            ("spr.orth2", s.orth2.to_string()),
            ("spr.beta_orth", s.beta_orth.to_string()),
            ("spr.ortho_momentum", momentum.to_string()),
            ("spr.shared_projection", s.shared_projection.to_string()),
            ("spr.lr", s.lr.to_string()),
            ("spr.mu_shared", s.mu_shared.to_string()),
            ("export_latents", self.export_latents.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }
}

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(
                format!("line {}", no + 1),
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}
