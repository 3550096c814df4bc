//! Flat `key = value` experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, GrwError, Result};
use crate::losses::LossKind;
use crate::models::ModelSpec;
use crate::reweighting::Scheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentId {
    Fig1,
    Fig2,
    Fig3,
    NtkConvergence,
    ApproxScaling,
    Compare,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        ExperimentId::Fig1,
        ExperimentId::Fig2,
        ExperimentId::Fig3,
        ExperimentId::NtkConvergence,
        ExperimentId::ApproxScaling,
        ExperimentId::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Fig1 => "fig1",
            ExperimentId::Fig2 => "fig2",
            ExperimentId::Fig3 => "fig3",
            ExperimentId::NtkConvergence => "ntk-convergence",
            ExperimentId::ApproxScaling => "approx-scaling",
            ExperimentId::Compare => "compare",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = GrwError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.name() == s.trim())
            .ok_or_else(|| invalid(format!("unknown experiment {s:?}")))
    }
}

/// Which data an experiment trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    /// The six-image digit subset; falls back to synthetic data without IDX files.
    Mnist,
    /// Synthetic stand-in for the digit subset (784-d, groups (5, 1)).
    Six,
    /// Separable synthetic classification set (20-d, groups (5, 1)).
    Separable,
    /// Gaussian blobs: `blobs:<dim>:<n1>,<n2>,…:<noise>`, means of norm 0.5.
    Blobs {
        dim: usize,
        sizes: Vec<usize>,
        noise: f64,
    },
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Mnist => f.write_str("mnist"),
            DatasetSpec::Six => f.write_str("six"),
            DatasetSpec::Separable => f.write_str("separable"),
            DatasetSpec::Blobs { dim, sizes, noise } => {
                let sizes: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
                write!(f, "blobs:{dim}:{}:{noise}", sizes.join(","))
            }
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = GrwError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "mnist" => return Ok(DatasetSpec::Mnist),
            "six" => return Ok(DatasetSpec::Six),
            "separable" => return Ok(DatasetSpec::Separable),
            _ => {}
        }
        let bad = || invalid(format!("bad dataset spec {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["blobs", dim, sizes, noise] => {
                let sizes = sizes
                    .split(',')
                    .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                let spec = DatasetSpec::Blobs {
                    dim: dim.parse().map_err(|_| bad())?,
                    sizes,
                    noise: noise.parse().map_err(|_| bad())?,
                };
                match &spec {
                    DatasetSpec::Blobs { dim, sizes, noise }
                        if *dim > 0
                            && !sizes.is_empty()
                            && !sizes.contains(&0)
                            && *noise >= 0.0 =>
                    {
                        Ok(spec)
                    }
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}

/// Everything an experiment run depends on. `out` does not enter the hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub schemes: Vec<Scheme>,
    pub losses: Vec<LossKind>,
    /// `None` picks a stable step size from the data (`eta = auto`).
    pub eta: Option<f64>,
    pub mu: f64,
    pub mus: Vec<f64>,
    pub epochs: u64,
    pub stop_risk: f64,
    pub record_every: u64,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub widths: Vec<usize>,
    pub test_points: usize,
    pub out: PathBuf,
}

pub const CONFIG_KEYS: [&str; 16] = [
    "experiment",
    "dataset",
    "model",
    "schemes",
    "losses",
    "eta",
    "mu",
    "mus",
    "epochs",
    "stop_risk",
    "record_every",
    "seed",
    "seeds",
    "widths",
    "test_points",
    "out",
];

fn list<T: FromStr>(value: &str, key: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| invalid(format!("bad entry {v:?} for {key}")))
        })
        .collect()
}

fn scalar<T: FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| invalid(format!("bad value {value:?} for {key}")))
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Defaults for each experiment; config files override individual keys.
    pub fn defaults(experiment: ExperimentId) -> Self {
        let scheme = |s: &str| s.parse::<Scheme>().expect("built-in scheme");
        let model = |s: &str| s.parse::<ModelSpec>().expect("built-in model");
        let three = vec![scheme("erm"), scheme("iw"), scheme("gdro:0.001")];
        let base = ExperimentConfig {
            experiment,
            dataset: DatasetSpec::Mnist,
            model: ModelSpec::Linear,
            schemes: three.clone(),
            losses: vec![LossKind::Squared],
            eta: None,
            mu: 0.0,
            mus: Vec::new(),
            epochs: 1_000_000,
            stop_risk: 1e-12,
            record_every: 100,
            seed: 0,
            seeds: vec![0],
            widths: Vec::new(),
            test_points: 0,
            out: PathBuf::from("out").join(experiment.name()),
        };
        match experiment {
            ExperimentId::Fig1 => base,
            ExperimentId::Fig2 => ExperimentConfig {
                mus: vec![0.1, 10.0],
                epochs: 20_000,
                stop_risk: 0.0,
                record_every: 10,
                ..base
            },
            ExperimentId::Fig3 => ExperimentConfig {
                losses: vec![
                    LossKind::Logistic,
                    LossKind::PolyTailed {
                        alpha: 1.0,
                        beta: 0.0,
                    },
                ],
                stop_risk: 0.0,
                record_every: 1000,
                ..base
            },
            ExperimentId::NtkConvergence => ExperimentConfig {
                dataset: DatasetSpec::Blobs {
                    dim: 4,
                    sizes: vec![8],
                    noise: 0.5,
                },
                model: model("mlp:4:64x1:0.5:erf"),
                schemes: vec![scheme("erm")],
                epochs: 1,
                seeds: (0..10).collect(),
                widths: vec![64, 256, 1024],
                test_points: 8,
                ..base
            },
            ExperimentId::ApproxScaling => ExperimentConfig {
                dataset: DatasetSpec::Blobs {
                    dim: 4,
                    sizes: vec![3, 1],
                    noise: 0.5,
                },
                model: model("mlp:4:64x1:0.5:erf"),
                schemes: vec![scheme("gdro:0.01")],
                // only the regularized-vs-ERM comparison uses μ
                mu: 1e-4,
                epochs: 20_000,
                stop_risk: 0.0,
                record_every: 5,
                seeds: (0..5).collect(),
                widths: vec![64, 256, 1024],
                test_points: 4,
                ..base
            },
            ExperimentId::Compare => ExperimentConfig {
                dataset: DatasetSpec::Six,
                schemes: vec![
                    scheme("erm"),
                    scheme("iw"),
                    scheme("gdro:0.001"),
                    scheme("cvar:0.5"),
                ],
                epochs: 200_000,
                record_every: 1000,
                seeds: vec![0, 1],
                ..base
            },
        }
    }

    /// Parses a config file body. `experiment` must be present; other keys
    /// fall back to that experiment's defaults. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                GrwError::Format(format!(
                    "line {}: expected key = value, got {line:?}",
                    lineno + 1
                ))
            })?;
            let k = k.trim().to_string();
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(GrwError::Format(format!(
                    "line {}: unknown key {k:?}",
                    lineno + 1
                )));
            }
            if pairs.iter().any(|(p, _)| *p == k) {
                return Err(GrwError::Format(format!(
                    "line {}: repeated key {k:?}",
                    lineno + 1
                )));
            }
            pairs.push((k, v.trim().to_string()));
        }
        let experiment = pairs
            .iter()
            .find(|(k, _)| k == "experiment")
            .ok_or_else(|| GrwError::Format("config must set `experiment`".into()))?
            .1
            .parse::<ExperimentId>()?;
        let mut cfg = ExperimentConfig::defaults(experiment);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overrides one key with a textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "experiment" => self.experiment = value.parse()?,
            "dataset" => self.dataset = value.parse()?,
            "model" => self.model = value.parse()?,
            "schemes" => self.schemes = list(value, key)?,
            "losses" => self.losses = list(value, key)?,
            "eta" => {
                self.eta = if value.trim() == "auto" {
                    None
                } else {
                    Some(scalar(value, key)?)
                }
            }
            "mu" => self.mu = scalar(value, key)?,
            "mus" => self.mus = list(value, key)?,
            "epochs" => self.epochs = scalar(value, key)?,
            "stop_risk" => self.stop_risk = scalar(value, key)?,
            "record_every" => self.record_every = scalar(value, key)?,
            "seed" => self.seed = scalar(value, key)?,
            "seeds" => self.seeds = list(value, key)?,
            "widths" => self.widths = list(value, key)?,
            "test_points" => self.test_points = scalar(value, key)?,
            "out" => self.out = PathBuf::from(value.trim()),
            _ => return Err(invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(invalid("at least one scheme is required"));
        }
        if self.losses.is_empty() {
            return Err(invalid("at least one loss is required"));
        }
        if self.epochs == 0 || self.record_every == 0 {
            return Err(invalid("epochs and record_every must be at least 1"));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(invalid("eta must be positive"));
            }
        }
        if !(self.mu >= 0.0) || self.mus.iter().any(|m| !(*m >= 0.0)) {
            return Err(invalid("regularization strengths must be non-negative"));
        }
        if !(self.stop_risk >= 0.0) {
            return Err(invalid("stop_risk must be non-negative"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.widths.contains(&0) {
            return Err(invalid("widths must be positive"));
        }
        Ok(())
    }

    /// Canonical `key=value` rendering (sorted, `out` omitted) that feeds the hash.
    pub fn canonical(&self) -> String {
        let eta = self.eta.map_or("auto".to_string(), |e| e.to_string());
        let mut lines = vec![
            format!("dataset={}", self.dataset),
            format!("epochs={}", self.epochs),
            format!("eta={eta}"),
            format!("experiment={}", self.experiment),
            format!("losses={}", join(&self.losses)),
            format!("model={}", self.model),
            format!("mu={}", self.mu),
            format!("mus={}", join(&self.mus)),
            format!("record_every={}", self.record_every),
            format!("schemes={}", join(&self.schemes)),
            format!("seed={}", self.seed),
            format!("seeds={}", join(&self.seeds)),
            format!("stop_risk={}", self.stop_risk),
            format!("test_points={}", self.test_points),
            format!("widths={}", join(&self.widths)),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// Full config as a loadable file, `out` included.
    pub fn to_config_text(&self) -> String {
        format!("{}out={}\n", self.canonical(), self.out.display())
    }

    /// Hex SHA-256 of [`ExperimentConfig::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
