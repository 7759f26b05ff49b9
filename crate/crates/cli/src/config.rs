//! Flat `key = value` campaign configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`KEYS`]); values are resolved in the order default, file,
//! `ZOO_OUTPUT_DIR` (output directory only), command-line flag.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use zoo_core::attackspace::Stage;
use zoo_core::model::TrainConfig;
use zoo_core::optimizer::{BoxMode, SolverConfig, SolverKind};

use crate::CliError;

pub const OUTPUT_DIR_ENV: &str = "ZOO_OUTPUT_DIR";

/// `(key, default, help)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset", "idx", "idx | synthetic"),
    ("train_images", "data/mnist/train-images-idx3-ubyte", "IDX training images"),
    ("train_labels", "data/mnist/train-labels-idx1-ubyte", "IDX training labels"),
    ("test_images", "data/mnist/t10k-images-idx3-ubyte", "IDX test images"),
    ("test_labels", "data/mnist/t10k-labels-idx1-ubyte", "IDX test labels"),
    ("synthetic_seed", "1", "seed of the synthetic bar dataset"),
    ("synthetic_train", "2000", "synthetic training images"),
    ("synthetic_test", "500", "synthetic test images"),
    ("synthetic_side", "28", "synthetic image side length"),
    ("classes", "10", "number of classes"),
    ("model", "data/models/mnist-mlp.zoo", "weight file (written by train, read by attack)"),
    ("hidden", "128", "comma-separated hidden layer widths"),
    ("epochs", "40", "training epochs"),
    ("train_batch", "32", "training mini-batch size"),
    ("learning_rate", "0.2", "initial SGD learning rate"),
    ("lr_decay", "0.95", "learning-rate factor per epoch"),
    ("max_shift", "2", "random translation augmentation in pixels"),
    ("init_seed", "1", "weight initialization seed"),
    ("train_seed", "0", "training shuffle seed"),
    ("mode", "untargeted", "untargeted | targeted (all other classes)"),
    ("n_images", "100", "correctly classified test images to attack"),
    ("solver", "adam", "adam | newton"),
    ("step_size", "auto", "η; auto is 0.01, or 0.002 with the hierarchical space"),
    ("iterations", "3000", "iterations per value of c"),
    ("batch", "128", "coordinates updated per iteration"),
    ("h", "0.0001", "finite-difference step"),
    ("box", "projection", "projection | tanh"),
    ("patience", "100", "early-stop patience in iterations; 0 disables"),
    ("reset_adam", "auto", "true | false; auto resets only for targeted hierarchical attacks"),
    ("importance_cadence", "auto", "iterations between importance refreshes; auto is 1 hierarchical, 10 otherwise"),
    ("kappa", "0", "confidence margin"),
    ("c0", "0.01", "initial c of the binary search"),
    ("search_steps", "9", "binary search steps over c"),
    ("attack_space", "full", "full | hierarchical"),
    ("stages", "32x32@0,64x64@2000,128x128@10000", "HxW@iteration list for the hierarchical space"),
    ("importance_from_stage", "1", "first stage using importance sampling; none disables"),
    ("output_dir", "out", "directory for reports and artifacts"),
    ("seed", "0", "campaign seed"),
];

pub fn default_settings() -> BTreeMap<String, String> {
    KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect()
}

/// Parses `key = value` lines, rejecting unknown keys.
pub fn parse_settings(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if !KEYS.iter().any(|(key, _, _)| *key == k) {
            return Err(CliError::Config(format!("line {}: unknown key {k:?}", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_settings(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_settings(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Synthetic {
        seed: u64,
        train: usize,
        test: usize,
        side: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    Untargeted,
    /// Every class other than the true label.
    TargetedAll,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::TargetedAll => "targeted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpacePreset {
    Full,
    Hierarchical {
        stages: Vec<Stage>,
        importance_from_stage: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub hidden: Vec<usize>,
    pub init_seed: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub data: DataSource,
    pub classes: usize,
    pub model: PathBuf,
    pub train: TrainSpec,
    pub mode: AttackMode,
    pub n_images: usize,
    pub solver: SolverConfig,
    pub kappa: f64,
    pub c0: f64,
    pub search_steps: usize,
    pub space: SpacePreset,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// The resolved key/value table this config was built from.
    pub settings: BTreeMap<String, String>,
}

struct Table<'a>(&'a BTreeMap<String, String>);

impl Table<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or_default()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
    }

    fn auto<T: std::str::FromStr>(&self, key: &str, fallback: T) -> Result<T, CliError> {
        if self.raw(key) == "auto" {
            Ok(fallback)
        } else {
            self.parse(key)
        }
    }

    fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }
}

fn parse_stages(text: &str) -> Result<Vec<Stage>, CliError> {
    let bad = || CliError::Config(format!("stages: expected HxW@iteration list, got {text:?}"));
    text.split(',')
        .map(|item| {
            let (dims, start) = item.trim().split_once('@').ok_or_else(bad)?;
            let (h, w) = dims.split_once('x').ok_or_else(bad)?;
            Ok(Stage::new(
                h.parse().map_err(|_| bad())?,
                w.parse().map_err(|_| bad())?,
                start.parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

impl CampaignConfig {
    /// Builds a config from defaults overlaid with `overrides`.
    pub fn from_settings(overrides: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut settings = default_settings();
        for (k, v) in overrides {
            if !settings.contains_key(k) {
                return Err(CliError::Config(format!("unknown key {k:?}")));
            }
            settings.insert(k.clone(), v.clone());
        }
        let t = Table(&settings);

        let data = match t.raw("dataset") {
            "idx" => DataSource::Idx {
                train_images: t.path("train_images"),
                train_labels: t.path("train_labels"),
                test_images: t.path("test_images"),
                test_labels: t.path("test_labels"),
            },
            "synthetic" => DataSource::Synthetic {
                seed: t.parse("synthetic_seed")?,
                train: t.parse("synthetic_train")?,
                test: t.parse("synthetic_test")?,
                side: t.parse("synthetic_side")?,
            },
            other => return Err(CliError::Config(format!("dataset: unknown source {other:?}"))),
        };

        let space = match t.raw("attack_space") {
            "full" => SpacePreset::Full,
            "hierarchical" => SpacePreset::Hierarchical {
                stages: parse_stages(t.raw("stages"))?,
                importance_from_stage: match t.raw("importance_from_stage") {
                    "none" => None,
                    _ => Some(t.parse("importance_from_stage")?),
                },
            },
            other => return Err(CliError::Config(format!("attack_space: unknown preset {other:?}"))),
        };
        let hierarchical = matches!(space, SpacePreset::Hierarchical { .. });

        let mode = match t.raw("mode") {
            "untargeted" => AttackMode::Untargeted,
            "targeted" => AttackMode::TargetedAll,
            other => return Err(CliError::Config(format!("mode: unknown mode {other:?}"))),
        };

        let solver = SolverConfig {
            step_size: t.auto("step_size", if hierarchical { 0.002 } else { 0.01 })?,
            max_iterations: t.parse("iterations")?,
            batch: t.parse("batch")?,
            h: t.parse("h")?,
            box_mode: match t.raw("box") {
                "projection" => BoxMode::Projection,
                "tanh" => BoxMode::Tanh,
                other => return Err(CliError::Config(format!("box: unknown mode {other:?}"))),
            },
            patience: match t.parse::<usize>("patience")? {
                0 => None,
                p => Some(p),
            },
            reset_adam_on_first_success: t.auto("reset_adam", hierarchical && mode == AttackMode::TargetedAll)?,
            solver: match t.raw("solver") {
                "adam" => SolverKind::Adam,
                "newton" => SolverKind::Newton,
                other => return Err(CliError::Config(format!("solver: unknown solver {other:?}"))),
            },
            importance_cadence: t.auto("importance_cadence", if hierarchical { 1 } else { 10 })?,
        };
        solver.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let hidden = t
            .raw("hidden")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::Config(format!("hidden: cannot parse {:?}", t.raw("hidden"))))?;

        let cfg = CampaignConfig {
            data,
            classes: t.parse("classes")?,
            model: t.path("model"),
            train: TrainSpec {
                hidden,
                init_seed: t.parse("init_seed")?,
                config: TrainConfig {
                    epochs: t.parse("epochs")?,
                    batch_size: t.parse("train_batch")?,
                    learning_rate: t.parse("learning_rate")?,
                    seed: t.parse("train_seed")?,
                    lr_decay: t.parse("lr_decay")?,
                    max_shift: t.parse("max_shift")?,
                },
            },
            mode,
            n_images: t.parse("n_images")?,
            solver,
            kappa: t.parse("kappa")?,
            c0: t.parse("c0")?,
            search_steps: t.parse("search_steps")?,
            space,
            output_dir: t.path("output_dir"),
            seed: t.parse("seed")?,
            settings: settings.clone(),
        };
        if cfg.n_images == 0 {
            return Err(CliError::Config("n_images must be ≥ 1".into()));
        }
        if cfg.classes < 2 {
            return Err(CliError::Config("classes must be ≥ 2".into()));
        }
        if !(cfg.kappa >= 0.0) {
            return Err(CliError::Config("kappa must be ≥ 0".into()));
        }
        if !(cfg.c0 > 0.0) || cfg.search_steps == 0 {
            return Err(CliError::Config("c0 must be positive and search_steps ≥ 1".into()));
        }
        if let DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } = &cfg.data
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if !p.is_file() {
                    return Err(CliError::Config(format!("{}: no such file", p.display())));
                }
            }
        }
        Ok(cfg)
    }
}
