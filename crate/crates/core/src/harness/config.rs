//! Flat `key=value` settings and the typed experiment configurations built from them.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::rl::RlKind;

/// Untyped settings. Keys are normalized so `cv-lr-scale` and `cv_lr_scale` agree.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config_err(format!("line {}: expected key=value, got '{line}'", i + 1));
            };
            if k.trim().is_empty() {
                return config_err(format!("line {}: empty key", i + 1));
            }
            s.set(k, v.trim());
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(normalize(key), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize(key)).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Entries of `over` replace those of `self`.
    pub fn merged(mut self, over: &Settings) -> Self {
        for (k, v) in &over.values {
            self.values.insert(k.clone(), v.clone());
        }
        self
    }

    /// Config file (if any) overridden by command-line values.
    pub fn layered(file: Option<&Path>, cli: &Settings) -> Result<Self> {
        let base = match file {
            Some(p) => Self::load(p)?,
            None => Self::new(),
        };
        Ok(base.merged(cli))
    }

    fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !known.contains(&k) {
                return config_err(format!("unknown key '{k}' (valid: {})", known.join(", ")));
            }
        }
        Ok(())
    }

    fn value<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("bad value '{v}' for {key}: {e}"))),
        }
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            None => Ok(false),
            Some("1" | "true" | "yes" | "") => Ok(true),
            Some("0" | "false" | "no") => Ok(false),
            Some(v) => config_err(format!("bad value '{v}' for {key}: expected true or false")),
        }
    }

    fn seeds(&self) -> Result<Vec<u64>> {
        parse_seeds(self.get("seeds").unwrap_or("0"))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }
}

/// `3`, `0,1,4` or the half-open range `0..5`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = |e: std::num::ParseIntError| Error::Config(format!("bad seed list '{text}': {e}"));
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        (a..b).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse().map_err(bad))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return config_err("seed list is empty");
    }
    Ok(seeds)
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        config_err(format!("{name} must be positive, got {x}"))
    }
}

fn estimator_among(name: &str, allowed: &[EstimatorKind]) -> Result<EstimatorKind> {
    if let Some(&k) = allowed.iter().find(|k| k.name() == name) {
        return Ok(k);
    }
    let names: Vec<_> = allowed.iter().map(|k| k.name()).collect();
    config_err(format!("unknown estimator '{name}' (valid: {})", names.join(", ")))
}

const EXPERIMENT_ESTIMATORS: [EstimatorKind; 3] =
    [EstimatorKind::Reinforce, EstimatorKind::Rebar, EstimatorKind::Relax];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub estimator: EstimatorKind,
    pub target: f64,
    pub lr: f64,
    pub cv_lr_scale: f64,
    pub iters: usize,
    pub window: usize,
    /// Loss level whose first crossing is reported in the summary.
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

impl ToyConfig {
    pub const KEYS: &'static [&'static str] =
        &["estimator", "target", "lr", "cv_lr_scale", "iters", "window", "threshold", "seeds", "out"];

    pub fn from_settings(s: &Settings) -> Result<Self> {
        s.check_known(Self::KEYS)?;
        let c = Self {
            estimator: estimator_among(s.get("estimator").unwrap_or("relax"), &EXPERIMENT_ESTIMATORS)?,
            target: s.value("target", 0.499)?,
            lr: s.value("lr", 0.01)?,
            cv_lr_scale: s.value("cv_lr_scale", 1.0)?,
            iters: s.value("iters", 10_000)?,
            window: s.value("window", 500)?,
            threshold: s.value("threshold", 0.2496)?,
            seeds: s.seeds()?,
            out: s.path("out"),
        };
        if !(c.target > 0.0 && c.target < 1.0) {
            return config_err(format!("target {} not in (0, 1)", c.target));
        }
        positive("lr", c.lr)?;
        positive("cv_lr_scale", c.cv_lr_scale)?;
        if c.window < 2 {
            return config_err("window must be at least 2");
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeRunConfig {
    pub estimator: EstimatorKind,
    pub layers: usize,
    /// Whitespace-separated 0/1 rows; synthetic noisy-OR data when absent.
    pub data: Option<PathBuf>,
    pub valid_frac: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub cv_lr_scale: f64,
    pub latent: usize,
    pub eval_samples: usize,
    pub window: usize,
    /// Batch estimates in the end-of-training variance probe.
    pub probe_samples: usize,
    pub data_seed: u64,
    pub dim: usize,
    pub causes: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

impl VaeRunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "estimator",
        "layers",
        "data",
        "valid_frac",
        "batch",
        "epochs",
        "lr",
        "cv_lr_scale",
        "latent",
        "eval_samples",
        "window",
        "probe_samples",
        "data_seed",
        "dim",
        "causes",
        "n_train",
        "n_valid",
        "seeds",
        "out",
    ];

    pub fn from_settings(s: &Settings) -> Result<Self> {
        s.check_known(Self::KEYS)?;
        let c = Self {
            estimator: estimator_among(s.get("estimator").unwrap_or("relax"), &EXPERIMENT_ESTIMATORS)?,
            layers: s.value("layers", 1)?,
            data: s.path("data"),
            valid_frac: s.value("valid_frac", 1.0 / 3.0)?,
            batch: s.value("batch", 24)?,
            epochs: s.value("epochs", 400)?,
            lr: s.value("lr", 1e-3)?,
            cv_lr_scale: s.value("cv_lr_scale", 10.0)?,
            latent: s.value("latent", 20)?,
            eval_samples: s.value("eval_samples", 10)?,
            window: s.value("window", 500)?,
            probe_samples: s.value("probe_samples", 100)?,
            data_seed: s.value("data_seed", 999)?,
            dim: s.value("dim", 64)?,
            causes: s.value("causes", 8)?,
            n_train: s.value("n_train", 100)?,
            n_valid: s.value("n_valid", 50)?,
            seeds: s.seeds()?,
            out: s.path("out"),
        };
        if !(1..=2).contains(&c.layers) {
            return config_err(format!("layers must be 1 or 2, got {}", c.layers));
        }
        positive("lr", c.lr)?;
        positive("cv_lr_scale", c.cv_lr_scale)?;
        if c.batch == 0 || c.latent == 0 || c.dim == 0 || c.causes == 0 || c.n_train == 0 || c.n_valid == 0 {
            return config_err("batch, latent, dim, causes and split sizes must be at least 1");
        }
        if c.probe_samples == 1 {
            return config_err("variance probe needs at least 2 samples (or 0 to skip)");
        }
        if !(c.valid_frac > 0.0 && c.valid_frac < 1.0) {
            return config_err(format!("valid_frac {} not in (0, 1)", c.valid_frac));
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvName {
    CartPole,
    Bandit,
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(Self::CartPole),
            "bandit" => Ok(Self::Bandit),
            _ => config_err(format!("unknown environment '{s}' (valid: cartpole, bandit)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlRunConfig {
    pub estimator: RlKind,
    pub env: EnvName,
    pub bandit_target: f64,
    pub gamma: f64,
    pub entropy: f64,
    pub lr: f64,
    pub cv_lr_scale: f64,
    pub episodes: usize,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub value_baseline: bool,
    pub probe_every: usize,
    pub probe_episodes: usize,
    pub stop_when_solved: bool,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

impl RlRunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "estimator",
        "env",
        "bandit_target",
        "gamma",
        "entropy",
        "lr",
        "cv_lr_scale",
        "episodes",
        "batch",
        "hidden",
        "value_baseline",
        "probe_every",
        "probe_episodes",
        "stop_when_solved",
        "seeds",
        "out",
    ];

    pub fn from_settings(s: &Settings) -> Result<Self> {
        s.check_known(Self::KEYS)?;
        let estimator: RlKind = s.get("estimator").unwrap_or("relax").parse()?;
        let default_cv = match estimator {
            RlKind::A2c => 0.01,
            _ => 0.003,
        };
        let hidden = match s.get("hidden") {
            None => vec![10, 10],
            Some(h) => h
                .split(',')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("bad value '{h}' for hidden: {e}")))?,
        };
        let c = Self {
            estimator,
            env: s.get("env").unwrap_or("cartpole").parse()?,
            bandit_target: s.value("bandit_target", 3.0)?,
            gamma: s.value("gamma", 0.99)?,
            entropy: s.value("entropy", 0.01)?,
            lr: s.value("lr", 0.01)?,
            cv_lr_scale: s.value("cv_lr_scale", default_cv)?,
            episodes: s.value("episodes", 1000)?,
            batch: s.value("batch", 1)?,
            hidden,
            value_baseline: s.flag("value_baseline")?,
            probe_every: s.value("probe_every", 10)?,
            probe_episodes: s.value("probe_episodes", 100)?,
            stop_when_solved: s.flag("stop_when_solved")?,
            seeds: s.seeds()?,
            out: s.path("out"),
        };
        positive("lr", c.lr)?;
        if c.hidden.contains(&0) {
            return config_err("hidden widths must be positive");
        }
        Ok(c)
    }
}
