//! Flat key=value experiment configuration.
//!
//! Every run writes its fully-resolved config next to its outputs so a run
//! can be reproduced from the echoed file alone. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for key `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("malformed config line `{0}` (expected key=value)")]
    BadLine(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    OnlyRoad,
    OnlyVeh,
    Addon,
    Iroam,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "only_road" => Ok(Mode::OnlyRoad),
            "only_veh" => Ok(Mode::OnlyVeh),
            "addon" => Ok(Mode::Addon),
            "iroam" => Ok(Mode::Iroam),
            _ => Err(format!(
                "expected one of only_road|only_veh|addon|iroam, got `{s}`"
            )),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::OnlyRoad => "only_road",
            Mode::OnlyVeh => "only_veh",
            Mode::Addon => "addon",
            Mode::Iroam => "iroam",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pairing {
    CycleShorter,
    SampleWithReplacement,
}

impl FromStr for Pairing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cycle_shorter" => Ok(Pairing::CycleShorter),
            "sample_with_replacement" => Ok(Pairing::SampleWithReplacement),
            _ => Err(format!(
                "expected cycle_shorter|sample_with_replacement, got `{s}`"
            )),
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pairing::CycleShorter => "cycle_shorter",
            Pairing::SampleWithReplacement => "sample_with_replacement",
        };
        f.write_str(s)
    }
}

/// All experiment knobs. Desk-scale defaults; full-scale values (1280×720,
/// C=256, 195 epochs, lr 5e-5, decay at 125/165) remain selectable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    // dataset
    pub seed: u64,
    pub n_roadside: usize,
    pub n_vehicle: usize,
    pub n_val_roadside: usize,
    pub n_val_vehicle: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub max_objects: usize,
    pub road_extent: f64,
    pub crop_augment: bool,
    // model
    pub channels: usize,
    pub n_queries: usize,
    pub depth_bins: usize,
    pub n_heads: usize,
    pub heads_use_full_query: bool,
    pub share_weights: bool,
    pub supervise_background_depth: bool,
    // training
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub lambdas: [f64; 7],
    pub pairing: Pairing,
    pub grad_clip: f64,
    pub use_cl: bool,
    pub decouple: bool,
    pub normalize_cl: bool,
    // inference / evaluation
    pub score_threshold: f64,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            n_roadside: 64,
            n_vehicle: 256,
            n_val_roadside: 32,
            n_val_vehicle: 32,
            image_width: 256,
            image_height: 160,
            max_objects: 3,
            road_extent: 56.0,
            crop_augment: false,
            channels: 64,
            n_queries: 50,
            depth_bins: 64,
            n_heads: 4,
            heads_use_full_query: false,
            share_weights: true,
            supervise_background_depth: true,
            mode: Mode::Iroam,
            epochs: 40,
            batch_size: 4,
            lr: 2e-4,
            weight_decay: 1e-4,
            lr_decay_epochs: vec![25, 33],
            lr_decay_factor: 0.1,
            lambdas: [2.0, 10.0, 5.0, 2.0, 1.0, 1.0, 1.0],
            pairing: Pairing::CycleShorter,
            grad_clip: 1.0,
            use_cl: true,
            decouple: true,
            normalize_cl: false,
            score_threshold: 0.2,
            depth_min: 2.0,
            depth_max: 65.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| parse::<usize>(key, p))
        .collect()
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "n_roadside" => self.n_roadside = parse(key, v)?,
            "n_vehicle" => self.n_vehicle = parse(key, v)?,
            "n_val_roadside" => self.n_val_roadside = parse(key, v)?,
            "n_val_vehicle" => self.n_val_vehicle = parse(key, v)?,
            "image_width" => self.image_width = parse(key, v)?,
            "image_height" => self.image_height = parse(key, v)?,
            "max_objects" => self.max_objects = parse(key, v)?,
            "road_extent" => self.road_extent = parse(key, v)?,
            "crop_augment" => self.crop_augment = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "n_queries" => self.n_queries = parse(key, v)?,
            "depth_bins" => self.depth_bins = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "heads_use_full_query" => self.heads_use_full_query = parse(key, v)?,
            "share_weights" => self.share_weights = parse(key, v)?,
            "supervise_background_depth" => self.supervise_background_depth = parse(key, v)?,
            "mode" => {
                self.mode = v.parse().map_err(|e: String| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    reason: e,
                })?
            }
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "lambdas" => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| parse::<f64>(key, p))
                    .collect::<Result<_, _>>()?;
                if parts.len() != 7 {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: v.into(),
                        reason: format!("expected 7 comma-separated values, got {}", parts.len()),
                    });
                }
                self.lambdas.copy_from_slice(&parts);
            }
            "pairing" => {
                self.pairing = v.parse().map_err(|e: String| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    reason: e,
                })?
            }
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "use_cl" => self.use_cl = parse(key, v)?,
            "decouple" => self.decouple = parse(key, v)?,
            "normalize_cl" => self.normalize_cl = parse(key, v)?,
            "score_threshold" => self.score_threshold = parse(key, v)?,
            "depth_min" => self.depth_min = parse(key, v)?,
            "depth_max" => self.depth_max = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn apply_line(&mut self, line: &str) -> Result<(), ConfigError> {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            return Ok(());
        }
        let Some((k, v)) = trimmed.split_once('=') else {
            return Err(ConfigError::BadLine(line.to_string()));
        };
        self.set(k, v)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let text = std::fs::read_to_string(path)?;
        for line in text.lines() {
            cfg.apply_line(line)?;
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            self.apply_line(o)?;
        }
        Ok(())
    }

    /// Serializes to the same key=value format the parser accepts.
    pub fn to_kv_string(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let lambdas = self
            .lambdas
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "seed = {}\nn_roadside = {}\nn_vehicle = {}\nn_val_roadside = {}\nn_val_vehicle = {}\n\
             image_width = {}\nimage_height = {}\nmax_objects = {}\nroad_extent = {}\ncrop_augment = {}\n\
             channels = {}\nn_queries = {}\ndepth_bins = {}\nn_heads = {}\nheads_use_full_query = {}\n\
             share_weights = {}\nsupervise_background_depth = {}\nmode = {}\nepochs = {}\nbatch_size = {}\n\
             lr = {}\nweight_decay = {}\nlr_decay_epochs = {}\nlr_decay_factor = {}\nlambdas = {}\n\
             pairing = {}\ngrad_clip = {}\nuse_cl = {}\ndecouple = {}\nnormalize_cl = {}\n\
             score_threshold = {}\ndepth_min = {}\ndepth_max = {}\n",
            self.seed,
            self.n_roadside,
            self.n_vehicle,
            self.n_val_roadside,
            self.n_val_vehicle,
            self.image_width,
            self.image_height,
            self.max_objects,
            self.road_extent,
            self.crop_augment,
            self.channels,
            self.n_queries,
            self.depth_bins,
            self.n_heads,
            self.heads_use_full_query,
            self.share_weights,
            self.supervise_background_depth,
            self.mode,
            self.epochs,
            self.batch_size,
            self.lr,
            self.weight_decay,
            list(&self.lr_decay_epochs),
            self.lr_decay_factor,
            lambdas,
            self.pairing,
            self.grad_clip,
            self.use_cl,
            self.decouple,
            self.normalize_cl,
            self.score_threshold,
            self.depth_min,
            self.depth_max,
        )
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(ConfigError::BadValue {
                key: key.into(),
                value,
                reason: reason.into(),
            })
        };
        if self.channels % 2 != 0 {
            return bad("channels", self.channels.to_string(), "must be even");
        }
        if self.channels % self.n_heads != 0 {
            return bad(
                "n_heads",
                self.n_heads.to_string(),
                "must divide channels",
            );
        }
        if self.image_width % 32 != 0 || self.image_height % 32 != 0 {
            return bad(
                "image_width",
                format!("{}x{}", self.image_width, self.image_height),
                "image dims must be divisible by 32",
            );
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(
                "lr_decay_factor",
                self.lr_decay_factor.to_string(),
                "must be in (0, 1)",
            );
        }
        if self.max_objects < 1 {
            return bad("max_objects", "0".into(), "must be at least 1");
        }
        if self.depth_min >= self.depth_max {
            return bad(
                "depth_min",
                format!("{}..{}", self.depth_min, self.depth_max),
                "depth range must be non-empty",
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_kv_format() {
        let mut cfg = Config::default();
        cfg.set("mode", "addon").unwrap();
        cfg.set("lambdas", "1,2,3,4,5,6,7").unwrap();
        cfg.set("lr_decay_epochs", "10,20").unwrap();
        let text = cfg.to_kv_string();
        let mut back = Config::default();
        for line in text.lines() {
            back.apply_line(line).unwrap();
        }
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_rejected_with_name() {
        let mut cfg = Config::default();
        let err = cfg.set("not_a_key", "1").unwrap_err();
        assert!(err.to_string().contains("not_a_key"));
    }

    #[test]
    fn validation_catches_odd_channels() {
        let mut cfg = Config::default();
        cfg.channels = 63;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let mut cfg = Config::default();
        cfg.apply_line("# a comment").unwrap();
        cfg.apply_line("").unwrap();
        cfg.apply_line("epochs = 7").unwrap();
        assert_eq!(cfg.epochs, 7);
    }
}
