//! Pipeline configuration: a flat `key = value` text format with dotted keys,
//! `#` comments, and per-key overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use crate::attacks::{AttackConfig, AttackKind};
use crate::data::{BinarySpec, BlobSpec, DatasetSpec};
use crate::error::{Error, Result};
use crate::evaluation::SearchMode;
use crate::nn::SgdConfig;
use crate::repair::ReferenceAggregator;
use crate::structural::{GnnConfig, GnnOptimizer};

/// Ordered key/value pairs as written in a config file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("invalid key '{key}'"),
                });
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(RawConfig { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn parsed<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("invalid value '{v}' for {key}"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.get(key) {
            None => Ok(default),
            Some("") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::config(format!("invalid list item '{}' for {key}", p.trim())))
                })
                .collect(),
        }
    }
}

/// One input setting: the nominal (unattacked) data or an attack on it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingSpec {
    pub name: String,
    /// `None` for the nominal setting.
    pub attack: Option<(AttackKind, AttackConfig)>,
}

impl SettingSpec {
    pub fn is_nominal(&self) -> bool {
        self.attack.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Load this model instead of training one.
    pub model_path: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub train: SgdConfig,
    pub dataset: DatasetSpec,
    pub settings: Vec<SettingSpec>,
    /// Fractions for the training, characterization and evaluation splits.
    pub split: [f64; 3],
    pub tau: f64,
    pub percentile: f64,
    pub gnn: GnnConfig,
    /// IPGs per setting given edge attributions.
    pub edge_samples: usize,
    pub p: f64,
    pub alpha: f64,
    pub aggregator: ReferenceAggregator,
    /// Graph layers eligible for repair; empty means every hidden layer.
    pub repair_layers: Vec<usize>,
    pub max_iters: usize,
    pub search: SearchMode,
}

const GLOBAL_KEYS: &[&str] = &[
    "seed",
    "output_dir",
    "model.path",
    "model.hidden",
    "train.lr",
    "train.batch_size",
    "train.epochs",
    "dataset.kind",
    "dataset.images",
    "dataset.labels",
    "dataset.num_samples",
    "dataset.dim",
    "dataset.num_classes",
    "dataset.separation",
    "dataset.noise",
    "dataset.support",
    "dataset.seed",
    "settings",
    "split",
    "characterize.tau",
    "characterize.percentile",
    "structural.hidden",
    "structural.optimizer",
    "structural.epochs",
    "structural.lr",
    "structural.holdout",
    "structural.edge_samples",
    "repair.p",
    "repair.alpha",
    "repair.density_std_threshold",
    "repair.kde_grid_points",
    "repair.layers",
    "eval.max_iters",
    "eval.search",
];

const SETTING_KEYS: &[&str] = &[
    "attack",
    "eps",
    "steps",
    "step_size",
    "spsa_samples",
    "spsa_radius",
    "flip_budget",
    "benign_class",
];

/// Every global key with its default value, in the file format.
pub const DEFAULT_CONFIG: &str = "\
seed = 0
output_dir = out
model.path =
model.hidden = 350, 50
train.lr = 0.005
train.batch_size = 32
train.epochs = 5
dataset.kind = synthetic_blobs
dataset.num_samples = 500
dataset.dim = 784
dataset.num_classes = 4
dataset.separation = 0.5
dataset.noise = 0.3
dataset.support = 120
dataset.seed = 0
settings = benign, fgsm
setting.benign.attack = benign
setting.fgsm.attack = fgsm
setting.fgsm.eps = 0.3
split = 0.6, 0.2, 0.2
characterize.tau = 0
characterize.percentile = 90
structural.hidden = 16
structural.optimizer = adam
structural.epochs = 200
structural.lr = 0.01
structural.holdout = 0.2
structural.edge_samples = 4
repair.p = 1
repair.alpha = 1
repair.density_std_threshold = 0.15
repair.kde_grid_points = 256
repair.layers =
eval.max_iters = 10
eval.search = exhaustive
";

impl RawConfig {
    pub fn defaults() -> Self {
        RawConfig::parse(DEFAULT_CONFIG).expect("default config parses")
    }

    /// Defaults overlaid with `text`.
    pub fn with_defaults(text: &str) -> Result<Self> {
        Ok(RawConfig::parse(text)?.over_defaults())
    }

    /// Defaults overlaid with these entries. Declaring `settings` drops the
    /// default per-setting keys.
    pub fn over_defaults(self) -> Self {
        let mut base = RawConfig::defaults();
        if self.get("settings").is_some() {
            base.entries.retain(|k, _| !k.starts_with("setting."));
        }
        base.entries.extend(self.entries);
        base
    }
}

fn parse_attack(raw: &RawConfig, name: &str) -> Result<Option<(AttackKind, AttackConfig)>> {
    let key = |field: &str| format!("setting.{name}.{field}");
    let kind = raw
        .get(&key("attack"))
        .ok_or_else(|| Error::config(format!("setting '{name}' has no {}", key("attack"))))?;
    if kind == "benign" || kind == "nominal" {
        return Ok(None);
    }
    let kind = AttackKind::parse(kind)?;
    let eps = raw.parsed(&key("eps"), 0.3)?;
    let base = match kind {
        AttackKind::Spsa => AttackConfig::spsa(eps),
        _ => AttackConfig::pgd(eps),
    };
    let cfg = AttackConfig {
        eps,
        steps: raw.parsed(&key("steps"), base.steps)?,
        step_size: raw.parsed(&key("step_size"), base.step_size)?,
        seed: 0,
        spsa_samples: raw.parsed(&key("spsa_samples"), base.spsa_samples)?,
        spsa_radius: raw.parsed(&key("spsa_radius"), base.spsa_radius)?,
        flip_budget: raw.parsed(&key("flip_budget"), base.flip_budget)?,
        benign_class: raw.parsed(&key("benign_class"), base.benign_class)?,
    };
    cfg.validate(kind)?;
    Ok(Some((kind, cfg)))
}

fn parse_dataset(raw: &RawConfig) -> Result<DatasetSpec> {
    let spec = match raw.get("dataset.kind").unwrap_or("synthetic_blobs") {
        "mnist_idx" => DatasetSpec::MnistIdx {
            images: raw
                .get("dataset.images")
                .ok_or_else(|| Error::config("mnist_idx needs dataset.images"))?
                .into(),
            labels: raw
                .get("dataset.labels")
                .ok_or_else(|| Error::config("mnist_idx needs dataset.labels"))?
                .into(),
        },
        "synthetic_blobs" => DatasetSpec::SyntheticBlobs(BlobSpec {
            num_samples: raw.parsed("dataset.num_samples", 500)?,
            dim: raw.parsed("dataset.dim", 784)?,
            num_classes: raw.parsed("dataset.num_classes", 4)?,
            separation: raw.parsed("dataset.separation", 0.5)?,
            noise: raw.parsed("dataset.noise", 0.3)?,
            support: raw.parsed("dataset.support", 120)?,
            seed: raw.parsed("dataset.seed", 0)?,
        }),
        "synthetic_binary" => DatasetSpec::SyntheticBinary(BinarySpec {
            num_samples: raw.parsed("dataset.num_samples", 500)?,
            dim: raw.parsed("dataset.dim", 784)?,
            num_classes: raw.parsed("dataset.num_classes", 2)?,
            separation: raw.parsed("dataset.separation", 0.5)?,
            seed: raw.parsed("dataset.seed", 0)?,
        }),
        other => return Err(Error::config(format!("unknown dataset.kind '{other}'"))),
    };
    spec.validate()?;
    Ok(spec)
}

impl PipelineConfig {
    /// Validates every key and builds the typed configuration. Unknown keys,
    /// duplicate setting names, a missing or repeated nominal setting, zero
    /// target settings and split fractions not summing to 1 are configuration errors.
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let names: Vec<String> = raw.list("settings", vec!["benign".to_string(), "fgsm".to_string()])?;
        for key in raw.keys() {
            let known = GLOBAL_KEYS.contains(&key)
                || key.strip_prefix("setting.").is_some_and(|rest| {
                    rest.rsplit_once('.')
                        .is_some_and(|(name, field)| names.iter().any(|n| n == name) && SETTING_KEYS.contains(&field))
                });
            if !known {
                return Err(Error::config(format!("unknown configuration key '{key}'")));
            }
        }
        let mut settings = Vec::new();
        for name in &names {
            if name.is_empty() || name.contains(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-')) {
                return Err(Error::config(format!("setting name '{name}' must be alphanumeric")));
            }
            if settings.iter().any(|s: &SettingSpec| &s.name == name) {
                return Err(Error::config(format!("duplicate setting '{name}'")));
            }
            settings.push(SettingSpec {
                name: name.clone(),
                attack: parse_attack(raw, name)?,
            });
        }
        match settings.iter().filter(|s| s.is_nominal()).count() {
            1 => {}
            n => return Err(Error::config(format!("exactly one nominal setting is required, found {n}"))),
        }
        if settings.len() < 2 {
            return Err(Error::config("at least one target setting is required"));
        }
        let split: Vec<f64> = raw.list("split", vec![0.6, 0.2, 0.2])?;
        let split: [f64; 3] = split
            .try_into()
            .map_err(|_| Error::config("split needs three fractions: train, characterize, evaluate"))?;
        if split.iter().any(|&f| !(f > 0.0)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions {split:?} must be positive and sum to 1")));
        }
        let seed: u64 = raw.parsed("seed", 0)?;
        let optimizer = match raw.get("structural.optimizer").unwrap_or("adam") {
            "adam" => GnnOptimizer::Adam,
            "gd" => GnnOptimizer::Gd,
            other => return Err(Error::config(format!("unknown structural.optimizer '{other}'"))),
        };
        let cfg = PipelineConfig {
            seed,
            output_dir: raw.get("output_dir").unwrap_or("out").into(),
            model_path: raw.get("model.path").filter(|p| !p.is_empty()).map(PathBuf::from),
            hidden: raw.list("model.hidden", vec![350, 50])?,
            train: SgdConfig {
                lr: raw.parsed("train.lr", 0.005)?,
                batch_size: raw.parsed("train.batch_size", 32)?,
                epochs: raw.parsed("train.epochs", 5)?,
                seed,
            },
            dataset: parse_dataset(raw)?,
            settings,
            split,
            tau: raw.parsed("characterize.tau", 0.0)?,
            percentile: raw.parsed("characterize.percentile", 90.0)?,
            gnn: GnnConfig {
                hidden_dim: raw.parsed("structural.hidden", 16)?,
                optimizer,
                epochs: raw.parsed("structural.epochs", 200)?,
                lr: raw.parsed("structural.lr", 0.01)?,
                seed,
                holdout: raw.parsed("structural.holdout", 0.2)?,
            },
            edge_samples: raw.parsed("structural.edge_samples", 4)?,
            p: raw.parsed("repair.p", 1.0)?,
            alpha: raw.parsed("repair.alpha", 1.0)?,
            aggregator: ReferenceAggregator {
                density_std_threshold: raw.parsed("repair.density_std_threshold", 0.15)?,
                kde_grid_points: raw.parsed("repair.kde_grid_points", 256)?,
                seed,
            },
            repair_layers: raw.list("repair.layers", Vec::new())?,
            max_iters: raw.parsed("eval.max_iters", 10)?,
            search: SearchMode::parse(raw.get("eval.search").unwrap_or("exhaustive"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        PipelineConfig::from_raw(&RawConfig::with_defaults(text)?)
    }

    fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("model.hidden needs at least one positive width"));
        }
        if !(self.train.lr > 0.0) || self.train.batch_size == 0 {
            return Err(Error::config("train.lr and train.batch_size must be positive"));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::config("characterize.tau must be non-negative"));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::config("characterize.percentile must be in (0, 100]"));
        }
        if !(self.p >= 1.0) {
            return Err(Error::config("repair.p must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("repair.alpha must lie in [0, 1]"));
        }
        if self.gnn.hidden_dim == 0 || !(self.gnn.lr > 0.0) || !(0.0..1.0).contains(&self.gnn.holdout) {
            return Err(Error::config("structural.hidden, lr and holdout are out of range"));
        }
        self.aggregator.validate()?;
        if self.max_iters == 0 {
            return Err(Error::config("eval.max_iters must be positive"));
        }
        Ok(())
    }

    pub fn nominal(&self) -> &SettingSpec {
        self.settings.iter().find(|s| s.is_nominal()).expect("validated")
    }

    pub fn targets(&self) -> impl Iterator<Item = &SettingSpec> {
        self.settings.iter().filter(|s| !s.is_nominal())
    }
}
