//! Flat `key=value` run configuration: one pair per line, `#` comments,
//! unknown keys rejected, numeric ranges validated at load.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decoder::DecoderConfig;
use crate::learn::{LossWeights, OptimConfig, TrainConfig, TrainMode};
use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {0}: expected key=value, got `{1}`")]
    Syntax(usize, String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{0}`: {1}")]
    InvalidValue(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Mode2d,
    Mode3d,
    Joint,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Mode2d => "2d",
            Mode::Mode3d => "3d",
            Mode::Joint => "joint",
        }
    }

    pub fn train_mode(&self) -> TrainMode {
        match self {
            Mode::Mode2d => TrainMode::Mode2d,
            Mode::Mode3d => TrainMode::Mode3d,
            Mode::Joint => TrainMode::Joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub image_width: usize,
    pub image_height: usize,
    pub views: usize,
    pub backbone_width: usize,
    pub decoder_dim: usize,
    pub heads: usize,
    pub rounds: usize,
    pub queries: usize,
    pub deform_points: usize,
    pub knn: usize,
    pub voxel_size4: f64,
    pub fusion_layers: usize,
    pub lambda_class: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub no_object_weight: f64,
    pub lr: f64,
    pub clip: f64,
    pub iterations: usize,
    pub seed: u64,
    pub mode: Mode,
    pub disable_3d_fusion: bool,
    pub late_fusion_only: bool,
    pub open_vocab: bool,
    pub frames_per_sample: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub augment_3d: bool,
    pub eval_every: usize,
    pub log_every: usize,
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image_width: 64,
            image_height: 64,
            views: 4,
            backbone_width: 16,
            decoder_dim: 64,
            heads: 4,
            rounds: 3,
            queries: 20,
            deform_points: 4,
            knn: 8,
            voxel_size4: 0.04,
            fusion_layers: 2,
            lambda_class: 2.0,
            lambda_bce: 5.0,
            lambda_dice: 5.0,
            no_object_weight: 0.1,
            lr: 1e-3,
            clip: 1.0,
            iterations: 500,
            seed: 0,
            mode: Mode::Mode3d,
            disable_3d_fusion: false,
            late_fusion_only: false,
            open_vocab: false,
            frames_per_sample: 2,
            batch_size: 2,
            augment: true,
            augment_3d: true,
            eval_every: 0,
            log_every: 10,
            data_dir: String::new(),
            out_dir: String::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::InvalidValue(key.into(), v.into()))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(ConfigError::InvalidValue(key.into(), v.into())),
    }
}

impl Config {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax(lineno + 1, raw.to_string()))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "image_width" => self.image_width = parse(key, v)?,
            "image_height" => self.image_height = parse(key, v)?,
            "views" => self.views = parse(key, v)?,
            "backbone_width" => self.backbone_width = parse(key, v)?,
            "decoder_dim" => self.decoder_dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "queries" => self.queries = parse(key, v)?,
            "deform_points" => self.deform_points = parse(key, v)?,
            "knn" => self.knn = parse(key, v)?,
            "voxel_size4" => self.voxel_size4 = parse(key, v)?,
            "fusion_layers" => self.fusion_layers = parse(key, v)?,
            "lambda_class" => self.lambda_class = parse(key, v)?,
            "lambda_bce" => self.lambda_bce = parse(key, v)?,
            "lambda_dice" => self.lambda_dice = parse(key, v)?,
            "no_object_weight" => self.no_object_weight = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "mode" => {
                self.mode = match v {
                    "2d" => Mode::Mode2d,
                    "3d" => Mode::Mode3d,
                    "joint" => Mode::Joint,
                    _ => return Err(ConfigError::InvalidValue(key.into(), v.into())),
                }
            }
            "disable_3d_fusion" => self.disable_3d_fusion = parse_bool(key, v)?,
            "late_fusion_only" => self.late_fusion_only = parse_bool(key, v)?,
            "open_vocab" => self.open_vocab = parse_bool(key, v)?,
            "frames_per_sample" => self.frames_per_sample = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "augment_3d" => self.augment_3d = parse_bool(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "data_dir" => self.data_dir = v.to_string(),
            "out_dir" => self.out_dir = v.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |k: &str, why: &str| Err(ConfigError::InvalidValue(k.into(), why.into()));
        if self.image_width == 0 || self.image_width % 32 != 0 {
            return bad("image_width", "must be a positive multiple of 32");
        }
        if self.image_height == 0 || self.image_height % 32 != 0 {
            return bad("image_height", "must be a positive multiple of 32");
        }
        if self.views == 0 {
            return bad("views", "must be ≥ 1");
        }
        if self.backbone_width == 0 {
            return bad("backbone_width", "must be ≥ 1");
        }
        if self.decoder_dim == 0 || self.decoder_dim % 4 != 0 {
            return bad("decoder_dim", "must be a positive multiple of 4");
        }
        if self.heads == 0 || self.decoder_dim % self.heads != 0 {
            return bad("heads", "must divide decoder_dim");
        }
        if self.queries == 0 {
            return bad("queries", "must be ≥ 1");
        }
        if self.deform_points == 0 {
            return bad("deform_points", "must be ≥ 1");
        }
        if self.knn == 0 {
            return bad("knn", "must be ≥ 1");
        }
        if !(self.voxel_size4 > 0.0) {
            return bad("voxel_size4", "must be > 0");
        }
        for (k, v) in [
            ("lambda_class", self.lambda_class),
            ("lambda_bce", self.lambda_bce),
            ("lambda_dice", self.lambda_dice),
            ("no_object_weight", self.no_object_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(k, "must be finite and ≥ 0");
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be finite and > 0");
        }
        if !(self.clip >= 0.0) || !self.clip.is_finite() {
            return bad("clip", "must be finite and ≥ 0 (0 disables)");
        }
        if self.frames_per_sample == 0 {
            return bad("frames_per_sample", "must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be ≥ 1");
        }
        Ok(())
    }

    /// Canonical serialization: every key on its own line, fixed order.
    /// Parsing it back reproduces the config exactly.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{}={}", k, v);
        };
        kv("image_width", self.image_width.to_string());
        kv("image_height", self.image_height.to_string());
        kv("views", self.views.to_string());
        kv("backbone_width", self.backbone_width.to_string());
        kv("decoder_dim", self.decoder_dim.to_string());
        kv("heads", self.heads.to_string());
        kv("rounds", self.rounds.to_string());
        kv("queries", self.queries.to_string());
        kv("deform_points", self.deform_points.to_string());
        kv("knn", self.knn.to_string());
        kv("voxel_size4", self.voxel_size4.to_string());
        kv("fusion_layers", self.fusion_layers.to_string());
        kv("lambda_class", self.lambda_class.to_string());
        kv("lambda_bce", self.lambda_bce.to_string());
        kv("lambda_dice", self.lambda_dice.to_string());
        kv("no_object_weight", self.no_object_weight.to_string());
        kv("lr", self.lr.to_string());
        kv("clip", self.clip.to_string());
        kv("iterations", self.iterations.to_string());
        kv("seed", self.seed.to_string());
        kv("mode", self.mode.as_str().to_string());
        kv("disable_3d_fusion", self.disable_3d_fusion.to_string());
        kv("late_fusion_only", self.late_fusion_only.to_string());
        kv("open_vocab", self.open_vocab.to_string());
        kv("frames_per_sample", self.frames_per_sample.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("augment", self.augment.to_string());
        kv("augment_3d", self.augment_3d.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("log_every", self.log_every.to_string());
        kv("data_dir", self.data_dir.clone());
        kv("out_dir", self.out_dir.clone());
        s
    }

    /// Hex SHA-256 of the canonical serialization with the path keys
    /// blanked; checkpoints embed this so a checkpoint can only be loaded
    /// against the model configuration that produced it.
    pub fn model_hash(&self) -> String {
        let mut canon = self.clone();
        canon.data_dir.clear();
        canon.out_dir.clear();
        let digest = Sha256::digest(canon.to_canonical_string().as_bytes());
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone_width: self.backbone_width,
            decoder: DecoderConfig {
                d: self.decoder_dim,
                heads: self.heads,
                rounds: self.rounds,
                num_queries: self.queries,
                classes: 0, // filled from the vocabulary by Model::new
                deform_points: self.deform_points,
            },
            voxel_size4: self.voxel_size4,
            knn: self.knn,
            fusion_layers: self.fusion_layers,
            fusion_heads: self.heads,
            enable_3d_fusion: !self.disable_3d_fusion,
            interleaved_fusion: !self.late_fusion_only,
            open_vocab: self.open_vocab,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            seed: self.seed,
            mode: self.mode.train_mode(),
            frames_per_sample: self.frames_per_sample,
            batch_size: self.batch_size,
            weights: LossWeights {
                class: self.lambda_class,
                bce: self.lambda_bce,
                dice: self.lambda_dice,
                no_object: self.no_object_weight,
            },
            optim: OptimConfig {
                lr: self.lr,
                clip: if self.clip > 0.0 { Some(self.clip) } else { None },
                ..OptimConfig::default()
            },
            augment: self.augment,
            augment_3d: self.augment_3d,
            eval_every: self.eval_every,
            log_every: self.log_every,
        }
    }
}
