//! `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use cystseg::retinagraph::DEFAULT_W_MIN;
use cystseg::samplekit::{PrepareParams, ReferenceDims};
use cystseg::tensornet::UNetConfig;
use cystseg::trainer::{PredictOptions, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: cannot parse {key} = {value:?}")]
    ParseError { line: usize, key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub sigma_d: f64,
    pub w_min: f64,
    pub ref_rows: usize,
    pub ref_cols: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub aspp_rates: Vec<usize>,
    /// `None` keeps the per-level default for the configured depth.
    pub dropout: Option<Vec<f64>>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub roi_clamp: bool,
    pub threshold: f32,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sigma_d: 2.0,
            w_min: DEFAULT_W_MIN,
            ref_rows: 640,
            ref_cols: 1024,
            base_channels: 16,
            depth: 3,
            aspp_rates: vec![1, 2, 4, 8, 16],
            dropout: None,
            batch_size: 10,
            epochs: 100,
            learning_rate: 1e-3,
            seed: 0,
            roi_clamp: true,
            threshold: 0.5,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::ParseError {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    value
        .trim_matches(|c| c == '{' || c == '}')
        .split(',')
        .map(|v| parse_value(line, key, v.trim()))
        .collect()
}

impl Config {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::ParseError {
                    line,
                    key: content.to_string(),
                    value: String::new(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "sigma_d" => cfg.sigma_d = parse_value(line, key, value)?,
                "w_min" => cfg.w_min = parse_value(line, key, value)?,
                "ref_rows" => cfg.ref_rows = parse_value(line, key, value)?,
                "ref_cols" => cfg.ref_cols = parse_value(line, key, value)?,
                "base_channels" => cfg.base_channels = parse_value(line, key, value)?,
                "depth" => cfg.depth = parse_value(line, key, value)?,
                "aspp_rates" => cfg.aspp_rates = parse_list(line, key, value)?,
                "dropout" => cfg.dropout = Some(parse_list(line, key, value)?),
                "batch_size" => cfg.batch_size = parse_value(line, key, value)?,
                "epochs" => cfg.epochs = parse_value(line, key, value)?,
                "learning_rate" => cfg.learning_rate = parse_value(line, key, value)?,
                "seed" => cfg.seed = parse_value(line, key, value)?,
                "threshold" => cfg.threshold = parse_value(line, key, value)?,
                "roi_clamp" => {
                    cfg.roi_clamp = match value {
                        "on" | "true" | "1" => true,
                        "off" | "false" | "0" => false,
                        _ => {
                            return Err(ConfigError::ParseError {
                                line,
                                key: key.to_string(),
                                value: value.to_string(),
                            })
                        }
                    }
                }
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        Ok(cfg)
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if !(self.sigma_d > 0.0 && self.sigma_d.is_finite()) {
            return Err(ConfigError::Invalid(format!("sigma_d must be positive, got {}", self.sigma_d)));
        }
        if !(self.w_min > 0.0 && self.w_min.is_finite()) {
            return Err(ConfigError::Invalid(format!("w_min must be positive, got {}", self.w_min)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::Invalid(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        self.unet().validate().map_err(|e| invalid(&e))?;
        self.train().validate().map_err(|e| invalid(&e))?;
        self.reference().check_divisible(self.depth).map_err(|e| invalid(&e))?;
        Ok(())
    }

    pub fn unet(&self) -> UNetConfig {
        let mut cfg = UNetConfig::scaled(self.base_channels, self.depth.min(16), self.aspp_rates.clone(), self.seed);
        cfg.depth = self.depth;
        if let Some(d) = &self.dropout {
            cfg.dropout = d.clone();
        }
        cfg
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn reference(&self) -> ReferenceDims {
        ReferenceDims::new(self.ref_rows, self.ref_cols)
    }

    pub fn prepare(&self) -> PrepareParams {
        PrepareParams {
            sigma_d: self.sigma_d,
            w_min: self.w_min,
        }
    }

    pub fn predict(&self) -> PredictOptions {
        PredictOptions {
            threshold: self.threshold,
            roi_clamp: self.roi_clamp,
        }
    }
}

pub fn parse_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Config::parse_str(&text)
}
