//! `key=value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use edsc::datagen::{DataSpec, TRAIN_TIMES};
use edsc::model::ModelConfig;
use edsc::training::{LossConfig, LossKind, TrainConfig};

use crate::CliError;

const KEYS: &[(&str, &str)] = &[
    ("model.kernel_size", "5"),
    ("model.hetconv_p", "4"),
    ("model.widths", "16,32,64,128"),
    ("model.block_depth", "2"),
    ("model.estimator_widths", "32,16,16"),
    ("model.multi_time", "false"),
    ("model.use_mask", "true"),
    ("model.use_bias", "true"),
    ("train.lr", "0.001"),
    ("train.epochs", "60"),
    ("train.halve_every", "20"),
    ("train.batch", "1"),
    ("train.loss", "charbonnier"),
    ("train.feature_weight", "0.01"),
    ("train.flip", "true"),
    ("train.crop", "32"),
    ("train.init", ""),
    ("seed", "0"),
    ("data.size", "64"),
    ("data.count", "192"),
    ("data.val_count", "16"),
    ("data.velocity", "8"),
    ("data.background_velocity", "4"),
    ("data.object_min", "0.2"),
    ("data.object_max", "0.35"),
    ("out.dir", "run"),
];

/// Every recognised key with its resolved value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn parse_line(line: &str) -> Option<Result<(String, String), String>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(format!("expected key=value, got {:?}", line)),
    })
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::data(format!("{}: {}", path.display(), e)))?;
            for (i, line) in text.lines().enumerate() {
                if let Some(kv) = parse_line(line) {
                    let (k, v) = kv.map_err(|e| {
                        CliError::usage(format!("{}:{}: {}", path.display(), i + 1, e))
                    })?;
                    cfg.set(&k, &v)?;
                }
            }
        }
        for o in overrides {
            match parse_line(o) {
                Some(Ok((k, v))) => cfg.set(&k, &v)?,
                Some(Err(e)) => return Err(CliError::usage(e)),
                None => {}
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(CliError::usage(format!("unknown config key {:?}", key))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.get(key)
            .parse()
            .map_err(|_| CliError::usage(format!("bad value {:?} for {}", self.get(key), key)))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        let pairs = self
            .values
            .iter()
            .filter(|(k, _)| k.starts_with("model.") || k.as_str() == "seed")
            .map(|(k, v)| (k.as_str(), v.as_str()));
        ModelConfig::from_kv(pairs).map_err(CliError::from)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let kind = match self.get("train.loss") {
            "charbonnier" => LossKind::Charbonnier,
            "charbonnier+feature" => LossKind::CharbonnierFeature,
            other => {
                return Err(CliError::usage(format!(
                    "train.loss must be charbonnier or charbonnier+feature, got {:?}",
                    other
                )))
            }
        };
        Ok(TrainConfig {
            epochs: self.parse("train.epochs")?,
            lr: self.parse("train.lr")?,
            halve_every: self.parse("train.halve_every")?,
            batch: self.parse("train.batch")?,
            loss: LossConfig {
                kind,
                feature_weight: self.parse("train.feature_weight")?,
                ..LossConfig::default()
            },
            flip: self.parse("train.flip")?,
            crop: match self.parse::<usize>("train.crop")? {
                0 => None,
                c => Some(c),
            },
            seed: self.seed()?,
            times: TRAIN_TIMES.to_vec(),
        })
    }

    pub fn init_checkpoint(&self) -> Option<PathBuf> {
        let v = self.get("train.init");
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Training and validation families; validation uses a different seed.
    pub fn data(&self, multi_time: bool) -> Result<(DataSpec, DataSpec), CliError> {
        let size: usize = self.parse("data.size")?;
        let lo: f64 = self.parse("data.object_min")?;
        let hi: f64 = self.parse("data.object_max")?;
        let seed = self.seed()?;
        let train = DataSpec {
            size,
            count: self.parse("data.count")?,
            max_velocity: self.parse("data.velocity")?,
            max_background_velocity: self.parse("data.background_velocity")?,
            object_size: (lo * size as f64, hi * size as f64),
            times: if multi_time { TRAIN_TIMES.to_vec() } else { vec![0.5] },
            seed: seed.wrapping_mul(2).wrapping_add(1),
        };
        let val = DataSpec {
            count: self.parse("data.val_count")?,
            seed: seed.wrapping_mul(2).wrapping_add(2),
            ..train.clone()
        };
        Ok((train, val))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out.dir"))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_string()).map_err(|e| CliError::data(format!("{}: {}", path.display(), e)))
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{}={}", k, v)?;
        }
        Ok(())
    }
}
