//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known to the section it configures; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::cam::CamLossMode;
use crate::corrupt::CorruptionKind;
use crate::model::WidthConfig;
use crate::repair::{Perturbation, RepairConfig};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key `{key}` appears twice")]
    Duplicate { line: usize, key: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: cannot parse {value:?}: {detail}")]
    Value { key: String, value: String, detail: String },
    #[error("unknown preset `{0}` (expected cifar, imagenet or desk)")]
    UnknownPreset(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// Parsed key/value pairs, consumed key by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl FromStr for KvConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }
}

impl KvConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?
            .parse()
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(value) => value.parse().map(Some).map_err(|e: T::Err| ConfigError::Value {
                key: key.to_string(),
                detail: e.to_string(),
                value,
            }),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            Some(key) => Err(ConfigError::UnknownKey(key)),
            None => Ok(()),
        }
    }
}

fn list(key: &str, text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim().parse().map_err(|e: std::num::ParseIntError| ConfigError::Value {
                key: key.to_string(),
                value: text.to_string(),
                detail: e.to_string(),
            })
        })
        .collect()
}

pub fn repair_preset(name: &str) -> Result<RepairConfig> {
    match name {
        "cifar" => Ok(RepairConfig::cifar()),
        "imagenet" => Ok(RepairConfig::imagenet()),
        "desk" => Ok(RepairConfig::desk()),
        other => Err(ConfigError::UnknownPreset(other.to_string())),
    }
}

/// Applies the keys of `kv` on top of `preset` (or on top of the preset
/// named by a `preset` key). Leaves unknown keys in `kv`.
pub fn repair_config(kv: &mut KvConfig, preset: RepairConfig) -> Result<RepairConfig> {
    let mut cfg = match kv.take::<String>("preset")? {
        Some(name) => repair_preset(&name)?,
        None => preset,
    };
    kv.set("iterations", &mut cfg.iterations)?;
    kv.set("refine_steps", &mut cfg.refine_steps)?;
    kv.set("finetune_steps", &mut cfg.finetune_steps)?;
    kv.set("k", &mut cfg.k)?;
    kv.set("alpha", &mut cfg.alpha)?;
    kv.set("refine_lr", &mut cfg.refine_lr)?;
    kv.set("finetune_lr", &mut cfg.finetune_lr)?;
    kv.set("momentum", &mut cfg.momentum)?;
    kv.set("max_grad_norm", &mut cfg.max_grad_norm)?;
    kv.set("batch_size", &mut cfg.batch_size)?;
    kv.set("seed", &mut cfg.seed)?;
    let corruption: Option<String> = kv.take("corruption")?;
    let severity: Option<u8> = kv.take("severity")?;
    match corruption.as_deref() {
        Some("identity") => cfg.perturbation = Perturbation::Identity,
        Some(name) => {
            let kind = name.parse::<CorruptionKind>().map_err(|e| ConfigError::Value {
                key: "corruption".into(),
                value: name.to_string(),
                detail: e.to_string(),
            })?;
            let severity = severity.unwrap_or(match cfg.perturbation {
                Perturbation::Corrupt { severity, .. } => severity,
                Perturbation::Identity => 3,
            });
            cfg.perturbation = Perturbation::Corrupt { kind, severity };
        }
        None => {
            if let (Some(s), Perturbation::Corrupt { kind, .. }) = (severity, cfg.perturbation) {
                cfg.perturbation = Perturbation::Corrupt { kind, severity: s };
            }
        }
    }
    if let Some(mode) = kv.take::<String>("cam_mode")? {
        cfg.cam_mode = match mode.as_str() {
            "raw" => CamLossMode::Raw,
            "normalized" => CamLossMode::Normalized,
            _ => {
                return Err(ConfigError::Value {
                    key: "cam_mode".into(),
                    value: mode,
                    detail: "expected raw or normalized".into(),
                })
            }
        };
    }
    Ok(cfg)
}

/// Applies the keys of `kv` on top of `base`. Leaves unknown keys in `kv`.
pub fn train_config(kv: &mut KvConfig, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    kv.set("epochs", &mut cfg.epochs)?;
    kv.set("batch_size", &mut cfg.batch_size)?;
    kv.set("learning_rate", &mut cfg.learning_rate)?;
    kv.set("momentum", &mut cfg.momentum)?;
    kv.set("final_lr_fraction", &mut cfg.final_lr_fraction)?;
    kv.set("weight_decay", &mut cfg.weight_decay)?;
    kv.set("warmup_epochs", &mut cfg.warmup_epochs)?;
    kv.set("max_grad_norm", &mut cfg.max_grad_norm)?;
    kv.set("seed", &mut cfg.seed)?;
    let widths = kv.take::<String>("widths")?;
    let strides = kv.take::<String>("strides")?;
    if widths.is_some() || strides.is_some() {
        cfg.width = WidthConfig {
            widths: widths.map_or(Ok(cfg.width.widths.clone()), |w| list("widths", &w))?,
            strides: strides.map_or(Ok(cfg.width.strides.clone()), |s| list("strides", &s))?,
        };
    }
    Ok(cfg)
}

/// Parses a complete repair configuration file, rejecting unknown keys.
pub fn parse_repair_config(text: &str) -> Result<RepairConfig> {
    let mut kv: KvConfig = text.parse()?;
    let cfg = repair_config(&mut kv, RepairConfig::cifar())?;
    kv.finish()?;
    Ok(cfg)
}

/// Parses a complete baseline-training configuration file, rejecting
/// unknown keys.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut kv: KvConfig = text.parse()?;
    let cfg = train_config(&mut kv, TrainConfig::default())?;
    kv.finish()?;
    Ok(cfg)
}

/// Renders a repair configuration in the same format it is parsed from.
pub fn render_repair_config(cfg: &RepairConfig) -> String {
    cfg.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = parse_repair_config("# desk\npreset = imagenet\n\niterations = 4\ncorruption = fog\nseed=9\n").unwrap();
        assert_eq!(cfg.iterations, 4);
        assert_eq!(cfg.refine_steps, 2);
        assert_eq!(cfg.alpha, 0.8);
        assert_eq!(cfg.seed, 9);
        assert_eq!(
            cfg.perturbation,
            Perturbation::Corrupt {
                kind: CorruptionKind::Fog,
                severity: 3
            }
        );
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_input() {
        assert!(matches!(parse_repair_config("alpah = 1"), Err(ConfigError::UnknownKey(k)) if k == "alpah"));
        assert!(matches!(parse_repair_config("k = 1\nk = 2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(parse_repair_config("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse_repair_config("k = three"), Err(ConfigError::Value { .. })));
        assert!(matches!(parse_repair_config("preset = mnist"), Err(ConfigError::UnknownPreset(_))));
        assert!(matches!(parse_repair_config("cam_mode = fancy"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn rendered_config_parses_back() {
        for cfg in [
            RepairConfig::cifar(),
            RepairConfig::imagenet().with_seed(3),
            RepairConfig::desk().with_perturbation(Perturbation::Identity),
        ] {
            assert_eq!(parse_repair_config(&render_repair_config(&cfg)).unwrap(), cfg);
        }
    }

    #[test]
    fn train_config_widths() {
        let cfg = parse_train_config("epochs = 2\nwidths = 4, 8\nstrides = 1,2\n").unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.width.widths, vec![4, 8]);
        assert_eq!(cfg.width.strides, vec![1, 2]);
        assert!(parse_train_config("widths = 4,x").is_err());
    }
}
