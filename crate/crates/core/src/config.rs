//! Model, inference, training and synthetic-data settings.
//!
//! Settings resolve as defaults ← TOML file ← `key=value` overrides. Keys
//! may be written bare (`delta`) when unambiguous, or qualified with their
//! section (`model.delta`). Unknown keys and type mismatches are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::SynthConfig;
use crate::error::{Error, Result};

/// Multiplier applied to predicted distances at level `l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// `2^l`
    Double,
    /// `2^(l-1)`, the level stride
    Stride,
}

impl ScaleMode {
    /// Scale for a 1-based level index.
    pub fn factor(self, level: usize) -> f64 {
        match self {
            ScaleMode::Double => (1u64 << level) as f64,
            ScaleMode::Stride => (1u64 << (level - 1)) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderType {
    Hierarchical,
    Vanilla,
    Cnn,
}

/// Which previous-level features feed inverse-transform context sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextSource {
    Combined,
    Encoded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub channels: usize,
    /// Background sampling rate.
    pub delta: f64,
    /// Half-width of the start/end supervision window, in snippets.
    pub tau: f64,
    /// Weight of the regression terms in the total loss.
    pub lambda: f64,
    /// Scale factor of the refined-distance regressor.
    pub omega: f64,
    pub scale_mode: ScaleMode,
    pub heads: usize,
    pub ffn_mult: usize,
    pub encoder_depth: usize,
    pub encoder_type: EncoderType,
    pub bfs_enabled: bool,
    pub context_source: ContextSource,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub boundary_kernel: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            channels: 64,
            delta: 0.7,
            tau: 5.0,
            lambda: 1.0,
            omega: 8.0,
            scale_mode: ScaleMode::Double,
            heads: 4,
            ffn_mult: 4,
            encoder_depth: 1,
            encoder_type: EncoderType::Hierarchical,
            bfs_enabled: true,
            context_source: ContextSource::Combined,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            boundary_kernel: 3,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("model.{key}"),
                message: message.into(),
            })
        };
        if self.levels == 0 || self.levels > 16 {
            return bad("levels", "must be in 1..=16");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta", "must be in (0, 1]");
        }
        if self.tau < 0.0 {
            return bad("tau", "must be nonnegative");
        }
        if self.lambda < 0.0 || self.omega < 0.0 {
            return bad("lambda", "lambda and omega must be nonnegative");
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad("heads", "must divide channels");
        }
        if self.encoder_depth == 0 || self.ffn_mult == 0 {
            return bad("encoder_depth", "encoder_depth and ffn_mult must be positive");
        }
        if self.boundary_kernel.is_multiple_of(2) {
            return bad("boundary_kernel", "must be odd");
        }
        if self.ln_eps <= 0.0 {
            return bad("ln_eps", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return bad("focal_alpha", "alpha must be in [0, 1] and gamma nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub top_k: usize,
    pub nms_sigma: f64,
    pub final_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 1e-3,
            top_k: 200,
            nms_sigma: 0.5,
            final_threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Cosine schedule length in optimizer steps; 0 spans the whole run.
    pub horizon: usize,
    pub seed: u64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 45,
            batch_size: 2,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            horizon: 0,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: "train.batch_size".into(),
                message: "must be positive".into(),
            });
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config {
                key: "train.lr".into(),
                message: "lr and weight_decay must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub inference: InferenceConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Resolves defaults ← `path` ← `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut table = defaults_table();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::format(path, e.to_string()))?;
        merge_file(&mut table, file)?;
    }
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    let config: Config = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config {
        key: "<config>".into(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// Applies `key=value` overrides on top of an already resolved config.
pub fn apply_overrides(base: &Config, overrides: &[String]) -> Result<Config> {
    let mut table = match Value::try_from(base).expect("config serializes") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    };
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    let config: Config = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config {
        key: "<config>".into(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config_str(text: &str) -> Result<Config> {
    let file: Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
        key: "<config>".into(),
        message: e.to_string(),
    })?;
    let mut table = defaults_table();
    merge_file(&mut table, file)?;
    let config: Config = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config {
        key: "<config>".into(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

fn defaults_table() -> Table {
    match Value::try_from(Config::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

fn merge_file(table: &mut Table, file: Table) -> Result<()> {
    for (section, value) in file {
        let Some(Value::Table(dst)) = table.get_mut(&section) else {
            return Err(Error::Config {
                key: section,
                message: "unknown section".into(),
            });
        };
        let Value::Table(src) = value else {
            return Err(Error::Config {
                key: section,
                message: "expected a table".into(),
            });
        };
        for (key, v) in src {
            let full = format!("{section}.{key}");
            set_checked(dst, &key, v, &full)?;
        }
    }
    Ok(())
}

fn set_checked(dst: &mut Table, key: &str, value: Value, full: &str) -> Result<()> {
    let Some(current) = dst.get(key) else {
        return Err(Error::Config {
            key: full.into(),
            message: "unknown key".into(),
        });
    };
    let value = match (current, value) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (c, v) if std::mem::discriminant(c) == std::mem::discriminant(&v) => v,
        (c, v) => {
            return Err(Error::Config {
                key: full.into(),
                message: format!("expected {}, got {}", c.type_str(), v.type_str()),
            })
        }
    };
    dst.insert(key.into(), value);
    Ok(())
}

fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| Error::Config {
        key: item.into(),
        message: "override must be key=value".into(),
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let (section, name) = match key.split_once('.') {
        Some((s, n)) => (s.to_string(), n.to_string()),
        None => {
            let owners: Vec<&String> = table
                .iter()
                .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
                .map(|(s, _)| s)
                .collect();
            match owners.as_slice() {
                [one] => ((*one).clone(), key.to_string()),
                [] => {
                    return Err(Error::Config {
                        key: key.into(),
                        message: "unknown key".into(),
                    })
                }
                _ => {
                    return Err(Error::Config {
                        key: key.into(),
                        message: "ambiguous; qualify with a section".into(),
                    })
                }
            }
        }
    };
    // Parse the value as a TOML literal, falling back to a bare string.
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let full = format!("{section}.{name}");
    let Some(Value::Table(dst)) = table.get_mut(&section) else {
        return Err(Error::Config {
            key: full,
            message: "unknown section".into(),
        });
    };
    set_checked(dst, &name, value, &full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c.model.delta, 0.7);
        assert_eq!(c.model.tau, 5.0);
        assert_eq!(c.model.lambda, 1.0);
        assert_eq!(c.model.levels, 5);
        assert_eq!(c.train.lr, 1e-4);
    }

    #[test]
    fn override_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[model]\ndelta = 0.3\nchannels = 32\n").unwrap();
        let c = load_config(Some(&p), &["delta=0.5".into()]).unwrap();
        assert_eq!(c.model.delta, 0.5);
        assert_eq!(c.model.channels, 32);
        let c = load_config(None, &["model.encoder_type=cnn".into(), "bfs_enabled=false".into()]).unwrap();
        assert_eq!(c.model.encoder_type, EncoderType::Cnn);
        assert!(!c.model.bfs_enabled);
    }

    #[test]
    fn type_mismatch_names_key() {
        let err = load_config(None, &["delta=banana".into()]).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "model.delta"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(load_config(None, &["nonsense=1".into()]).is_err());
        assert!(parse_config_str("[model]\nbogus = 1\n").is_err());
        assert!(parse_config_str("[extra]\nx = 1\n").is_err());
    }

    #[test]
    fn integer_promotes_to_float() {
        let c = load_config(None, &["omega=4".into()]).unwrap();
        assert_eq!(c.model.omega, 4.0);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = load_config(None, &["delta=0.5".into(), "train.seed=9".into()]).unwrap();
        let again = parse_config_str(&c.to_toml()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn scale_factors() {
        assert_eq!(ScaleMode::Double.factor(1), 2.0);
        assert_eq!(ScaleMode::Stride.factor(1), 1.0);
        assert_eq!(ScaleMode::Double.factor(3), 8.0);
    }
}
