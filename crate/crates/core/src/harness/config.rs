//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ppo::PpoConfig;
use crate::signopt::{AttackConfig, Selection};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SPARSEVID_OUT";
pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Saliency mask pruned by the frame-selection policy.
    SparseRl,
    /// All-ones mask.
    DenseSignopt,
    /// Saliency mask without frame deletion.
    SpatialOnly,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SparseRl, Method::DenseSignopt, Method::SpatialOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::SparseRl => "sparse-rl",
            Method::DenseSignopt => "dense-signopt",
            Method::SpatialOnly => "spatial-only",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}; expected sparse-rl, dense-signopt or spatial-only")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Untargeted,
    Targeted,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Untargeted => "untargeted",
            Mode::Targeted => "targeted",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "untargeted" => Ok(Mode::Untargeted),
            "targeted" => Ok(Mode::Targeted),
            _ => Err(invalid(format!("unknown mode {s:?}"))),
        }
    }
}

impl FromStr for Selection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min-map" => Ok(Selection::MinMap),
            "min-g" => Ok(Selection::MinG),
            _ => Err(invalid(format!("unknown selection {s:?}; expected min-map or min-g"))),
        }
    }
}

fn selection_name(s: Selection) -> &'static str {
    match s {
        Selection::MinMap => "min-map",
        Selection::MinG => "min-g",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub oracle: PathBuf,
    pub policy: Option<PathBuf>,
    pub value: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    pub mode: Mode,
    /// Number of correctly classified test videos to attack; 0 means all.
    pub videos: usize,
    pub seed: u64,
    pub workers: usize,
    pub attack: AttackConfig,
    pub finetune: PpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let out = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
        Self {
            data_dir: out.join("data"),
            oracle: out.join("oracle.bin"),
            policy: None,
            value: None,
            out_dir: out.join("experiment"),
            methods: vec![Method::SparseRl, Method::DenseSignopt],
            mode: Mode::Untargeted,
            videos: 20,
            seed: 1,
            workers: 1,
            attack: AttackConfig::default(),
            finetune: PpoConfig { iterations: 5, actors: 2, timesteps: 8, minibatch: 8, epochs: 2, ..PpoConfig::default() },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(format!("bad boolean {value:?} for {key}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, v) = (key.trim(), value.trim());
        let a = &mut self.attack;
        let f = &mut self.finetune;
        match k {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "oracle" => self.oracle = PathBuf::from(v),
            "policy" => self.policy = opt_path(v),
            "value" => self.value = opt_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "methods" => self.methods = v.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?,
            "mode" => self.mode = v.parse()?,
            "videos" => self.videos = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "workers" => self.workers = parse(k, v)?,
            "candidates" => a.candidates = parse(k, v)?,
            "iterations" => a.iterations = parse(k, v)?,
            "grad_samples" => a.grad_samples = parse(k, v)?,
            "smoothing" => a.smoothing = parse(k, v)?,
            "step_size" => a.step_size = parse(k, v)?,
            "tolerance" => a.tolerance = parse(k, v)?,
            "map_bound" => a.map_bound = parse(k, v)?,
            "budget" => a.budget = parse(k, v)?,
            "selection" => a.selection = v.parse()?,
            "max_halvings" => a.max_halvings = parse(k, v)?,
            "phi" => a.spatial.phi = parse(k, v)?,
            "scales" => a.spatial.scales = v.split(',').map(|s| parse(k, s.trim())).collect::<Result<_>>()?,
            "ft_iterations" => f.iterations = parse(k, v)?,
            "ft_actors" => f.actors = parse(k, v)?,
            "ft_timesteps" => f.timesteps = parse(k, v)?,
            "ft_epochs" => f.epochs = parse(k, v)?,
            "ft_minibatch" => f.minibatch = parse(k, v)?,
            "ft_learning_rate" => f.learning_rate = parse(k, v)?,
            "ft_clip_eps" => f.clip_eps = parse(k, v)?,
            "ft_gamma" => f.gamma = parse(k, v)?,
            "ft_lambda" => f.lambda = parse(k, v)?,
            "ft_normalize_advantages" => f.normalize_advantages = parse_bool(k, v)?,
            _ => return Err(invalid(format!("unknown config key {k:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| invalid(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses a config file body. Blank lines and `#` comments are ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected key = value", n + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Format(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    /// Every key with its resolved value, in a stable order.
    pub fn to_kv(&self) -> String {
        let a = &self.attack;
        let f = &self.finetune;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let methods: Vec<&str> = self.methods.iter().map(|m| m.name()).collect();
        let scales: Vec<String> = a.spatial.scales.iter().map(|s| s.to_string()).collect();
        let mut s = String::new();
        let rows: Vec<(&str, String)> = vec![
            ("data_dir", self.data_dir.display().to_string()),
            ("oracle", self.oracle.display().to_string()),
            ("policy", path(&self.policy)),
            ("value", path(&self.value)),
            ("out_dir", self.out_dir.display().to_string()),
            ("methods", methods.join(",")),
            ("mode", self.mode.name().to_string()),
            ("videos", self.videos.to_string()),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("candidates", a.candidates.to_string()),
            ("iterations", a.iterations.to_string()),
            ("grad_samples", a.grad_samples.to_string()),
            ("smoothing", a.smoothing.to_string()),
            ("step_size", a.step_size.to_string()),
            ("tolerance", a.tolerance.to_string()),
            ("map_bound", a.map_bound.to_string()),
            ("budget", a.budget.to_string()),
            ("selection", selection_name(a.selection).to_string()),
            ("max_halvings", a.max_halvings.to_string()),
            ("phi", a.spatial.phi.to_string()),
            ("scales", scales.join(",")),
            ("ft_iterations", f.iterations.to_string()),
            ("ft_actors", f.actors.to_string()),
            ("ft_timesteps", f.timesteps.to_string()),
            ("ft_epochs", f.epochs.to_string()),
            ("ft_minibatch", f.minibatch.to_string()),
            ("ft_learning_rate", f.learning_rate.to_string()),
            ("ft_clip_eps", f.clip_eps.to_string()),
            ("ft_gamma", f.gamma.to_string()),
            ("ft_lambda", f.lambda.to_string()),
            ("ft_normalize_advantages", f.normalize_advantages.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(invalid("no methods configured"));
        }
        if self.workers == 0 {
            return Err(invalid("workers must be positive"));
        }
        self.attack.validate()?;
        if self.mode == Mode::Targeted && self.methods.contains(&Method::SparseRl) {
            self.finetune.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&["methods=spatial-only,sparse-rl", "phi=0.4", "policy=p.bin", "selection=min-g"]).unwrap();
        let back = ExperimentConfig::parse_str(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.methods, vec![Method::SpatialOnly, Method::SparseRl]);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        assert!(ExperimentConfig::parse_str("colour = blue").is_err());
        assert!(ExperimentConfig::parse_str("mode = sideways").is_err());
        assert!(ExperimentConfig::parse_str("videos 3").is_err());
        let cfg = ExperimentConfig::parse_str("# comment\n\nvideos = 3 # trailing\n").unwrap();
        assert_eq!(cfg.videos, 3);
    }
}
