//! Plain-text `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use quanv_core::quanv::ReadoutMode;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Cnn,
    Qnn,
    Both,
}

impl ModelKind {
    pub fn includes_cnn(self) -> bool {
        matches!(self, ModelKind::Cnn | ModelKind::Both)
    }

    pub fn includes_qnn(self) -> bool {
        matches!(self, ModelKind::Qnn | ModelKind::Both)
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cnn" => Ok(ModelKind::Cnn),
            "qnn" => Ok(ModelKind::Qnn),
            "both" => Ok(ModelKind::Both),
            other => Err(format!("unknown model {other:?} (cnn|qnn|both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic { per_class: usize },
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub filters: usize,
    pub layers: usize,
    pub shots: u64,
    pub mode: ReadoutMode,
    /// `None` simulates every distinct block.
    pub budget: Option<usize>,
    pub topology: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub train_count: usize,
    pub test_count: usize,
    pub replicas: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Feature CSV read by `train` for qnn models; defaults to
    /// `<out>/features.csv`.
    pub features: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::Both,
            filters: 5,
            layers: 1,
            shots: 1000,
            mode: ReadoutMode::Exact,
            budget: None,
            topology: None,
            dataset: DatasetSource::Synthetic { per_class: 125 },
            train_count: 400,
            test_count: 100,
            replicas: 10,
            seed: 0,
            learning_rate: 0.05,
            epochs: 50,
            batch_size: 32,
            eval_every: 50,
            features: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key} = {value:?}: {e}")))
}

impl ExperimentConfig {
    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            cfg.set(key, value, base)
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one setting; used by the file parser and by flag overrides.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> CliResult<()> {
        let path = |v: &str| base.join(v);
        match key {
            "model" => self.model = parse_value(key, value)?,
            "filters" => self.filters = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "shots" => self.shots = parse_value(key, value)?,
            "mode" => self.mode = parse_value(key, value)?,
            "budget" => {
                self.budget = match value {
                    "all" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "topology" => {
                self.topology = match value {
                    "default" => None,
                    v => Some(path(v)),
                }
            }
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetSource::Synthetic {
                        per_class: match self.dataset {
                            DatasetSource::Synthetic { per_class } => per_class,
                            DatasetSource::Csv(_) => 125,
                        },
                    },
                    v => DatasetSource::Csv(path(v)),
                }
            }
            "synthetic_per_class" => match &mut self.dataset {
                DatasetSource::Synthetic { per_class } => *per_class = parse_value(key, value)?,
                DatasetSource::Csv(_) => {
                    return Err(CliError::Config("synthetic_per_class needs dataset = synthetic".into()))
                }
            },
            "train_count" => self.train_count = parse_value(key, value)?,
            "test_count" => self.test_count = parse_value(key, value)?,
            "replicas" => self.replicas = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "features" => self.features = Some(path(value)),
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let positive = [
            ("filters", self.filters),
            ("layers", self.layers),
            ("replicas", self.replicas),
            ("train_count", self.train_count),
            ("test_count", self.test_count),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Config(format!("{key} must be at least 1")));
        }
        if self.shots == 0 || self.budget == Some(0) {
            return Err(CliError::Config("shots and budget must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(CliError::Config(format!("learning_rate {}", self.learning_rate)));
        }
        if let DatasetSource::Synthetic { per_class: 0 } = self.dataset {
            return Err(CliError::Config("synthetic_per_class must be at least 1".into()));
        }
        for p in self.topology.iter().chain(match &self.dataset {
            DatasetSource::Csv(p) => Some(p),
            DatasetSource::Synthetic { .. } => None,
        }) {
            if !p.is_file() {
                return Err(CliError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
