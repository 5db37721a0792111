//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Unknown and repeated
//! keys are rejected. [`RunConfig::to_text`] writes every key in a fixed order,
//! so parsing its output yields an equal config.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, TaskKind};
use crate::model::{ModelConfig, MODEL_KEYS};
use crate::train::{DEFAULT_LR, TOY_STEPS};

pub const RUN_KEYS: [&str; 8] = ["task", "seed", "steps", "lr", "alpha1", "alpha2", "checkpoint", "output"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskKind,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    /// Overrides the task's gradient weight.
    pub alpha1: Option<f64>,
    /// Overrides the task's temporal weight.
    pub alpha2: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            task: TaskKind::Mff,
            seed: 0,
            steps: TOY_STEPS,
            lr: DEFAULT_LR,
            alpha1: None,
            alpha2: None,
            checkpoint: None,
            output: None,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
        _ => Err(Error::Config(format!("{key}: expected a finite non-negative number, got '{v}'"))),
    }
}

fn parse_int<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got '{v}'")))
}

impl RunConfig {
    pub fn weights(&self) -> LossWeights {
        let base = LossWeights::for_task(self.task);
        LossWeights { alpha1: self.alpha1.unwrap_or(base.alpha1), alpha2: self.alpha2.unwrap_or(base.alpha2) }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            k if MODEL_KEYS.contains(&k) => self.model.set(k, v)?,
            "task" => self.task = v.parse()?,
            "seed" => self.seed = parse_int(key, v)?,
            "steps" => self.steps = parse_int(key, v)?,
            "lr" => self.lr = parse_f64(key, v)?,
            "alpha1" => self.alpha1 = Some(parse_f64(key, v)?),
            "alpha2" => self.alpha2 = Some(parse_f64(key, v)?),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "output" => self.output = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{}'", i + 1, line)))?;
            let k = k.trim();
            if seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("line {}: duplicate key '{}'", i + 1, k)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {}", i + 1, m)),
                other => other,
            })?;
            seen.push(k.to_string());
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Canonical form: model keys, then run keys; unset optional keys are omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model.to_pairs() {
            s += &format!("{k}={v}\n");
        }
        s += &format!("task={}\nseed={}\nsteps={}\nlr={}\n", self.task, self.seed, self.steps, self.lr);
        if let Some(a) = self.alpha1 {
            s += &format!("alpha1={a}\n");
        }
        if let Some(a) = self.alpha2 {
            s += &format!("alpha2={a}\n");
        }
        if let Some(p) = &self.checkpoint {
            s += &format!("checkpoint={}\n", p.display());
        }
        if let Some(p) = &self.output {
            s += &format!("output={}\n", p.display());
        }
        s
    }
}
