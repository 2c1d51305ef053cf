//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known;
//! anything else is rejected so a misspelled hyperparameter cannot fall back
//! to its default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Result, SvtError};
use crate::incremental::Scoring;
use crate::model::ModelConfig;
use crate::params::hex;
use crate::protocol::ProtocolConfig;
use crate::text::{TextConfig, DEFAULT_TEMPLATE};
use crate::training::TrainConfig;
use crate::vision::{InputLayout, VisionConfig};

pub const OUT_DIR_ENV: &str = "SVT_OUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        feature_dim: usize,
        spread: f64,
    },
    /// CSV manifest or `train/`/`test/` image directory.
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub base_classes: usize,
    pub sessions: usize,
    pub ways: usize,
    pub shots: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scoring: Scoring,
    pub out_dir: PathBuf,
    /// Suffix of the table row labels (`V-<encoder>`, `SV-<encoder>`).
    pub encoder_label: String,
    /// Class words whose test embeddings are exported; empty exports every
    /// class.
    pub export_classes: Vec<String>,
}

impl Default for ExperimentConfig {
    /// A tiny feature-input run: 20 synthetic classes split 12 + 4 × 2-way
    /// 5-shot.
    fn default() -> Self {
        let d_v = 16;
        ExperimentConfig {
            seed: 0,
            data: DataSource::Synthetic {
                classes: 20,
                train_per_class: 20,
                test_per_class: 10,
                feature_dim: 32,
                spread: 0.1,
            },
            base_classes: 12,
            sessions: 4,
            ways: 2,
            shots: 5,
            model: ModelConfig {
                vision: VisionConfig {
                    input: InputLayout::Features { dim: 32, chunk: 8 },
                    embed_dim: 16,
                    depth: 1,
                    heads: 2,
                    window_size: 2,
                    shifted_windows: true,
                    global_attention: false,
                    mlp_hidden: 32,
                    head_hidden: 0,
                    d_v,
                },
                text: TextConfig {
                    vocab_size: 256,
                    max_len: 8,
                    token_dim: 16,
                    depth: 1,
                    heads: 2,
                    mlp_hidden: 32,
                    d_s: 12,
                    projection_hidden: 0,
                    d_v,
                },
                num_classes: 12,
                separate_heads: false,
            },
            train: TrainConfig {
                main_epochs: 30,
                finetune_epochs: 0,
                ..TrainConfig::default()
            },
            scoring: Scoring::Cosine,
            out_dir: PathBuf::from("runs"),
            encoder_label: "T".into(),
            export_classes: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| SvtError::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(SvtError::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

/// Splits the text into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SvtError::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if seen.insert(k.clone(), n + 1).is_some() {
            return Err(SvtError::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
        pairs.push((k, v));
    }
    Ok(pairs)
}

impl ExperimentConfig {
    /// Every accepted key, in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "data.source",
        "data.classes",
        "data.train_per_class",
        "data.test_per_class",
        "data.feature_dim",
        "data.spread",
        "protocol.base_classes",
        "protocol.sessions",
        "protocol.ways",
        "protocol.shots",
        "vision.input",
        "vision.image_size",
        "vision.channels",
        "vision.patch_size",
        "vision.feature_chunk",
        "vision.embed_dim",
        "vision.depth",
        "vision.heads",
        "vision.window_size",
        "vision.shifted_windows",
        "vision.global_attention",
        "vision.mlp_hidden",
        "vision.head_hidden",
        "model.d_v",
        "model.separate_heads",
        "text.vocab_size",
        "text.max_len",
        "text.token_dim",
        "text.depth",
        "text.heads",
        "text.mlp_hidden",
        "text.d_s",
        "text.projection_hidden",
        "text.template",
        "train.lambda",
        "train.lr",
        "train.momentum",
        "train.epochs",
        "train.finetune_epochs",
        "train.finetune_lr",
        "train.decay_factor",
        "train.decay_every",
        "train.batch_size",
        "train.freeze_text_encoder",
        "train.augment_flip",
        "train.augment_crop_pad",
        "head.scoring",
        "output.dir",
        "output.encoder_label",
        "output.export_classes",
    ];

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SvtError::io(path, e))?;
        let mut config = Self::parse(&text)?;
        if let DataSource::Manifest(p) = &mut config.data {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    /// Applies the keys in `text` over the defaults, then honors
    /// `SVT_OUT_DIR`.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let unknown: Vec<&str> = pairs
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| !Self::KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(SvtError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let mut c = ExperimentConfig::default();
        // Synthetic parameters and the input layout are assembled after all
        // keys are read, since they may arrive in any order.
        let mut synth = match c.data.clone() {
            DataSource::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                feature_dim,
                spread,
            } => (classes, train_per_class, test_per_class, feature_dim, spread),
            DataSource::Manifest(_) => unreachable!("default is synthetic"),
        };
        let mut source = "synthetic".to_string();
        let mut input_kind = "features".to_string();
        let (mut image_size, mut channels, mut patch_size, mut chunk) = (32usize, 3usize, 8usize, 8usize);
        let mut feature_dim_set = false;
        for (k, v) in &pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "seed" => c.seed = parse(k, v)?,
                "data.source" => source = v.to_string(),
                "data.classes" => synth.0 = parse(k, v)?,
                "data.train_per_class" => synth.1 = parse(k, v)?,
                "data.test_per_class" => synth.2 = parse(k, v)?,
                "data.feature_dim" => {
                    synth.3 = parse(k, v)?;
                    feature_dim_set = true;
                }
                "data.spread" => synth.4 = parse(k, v)?,
                "protocol.base_classes" => c.base_classes = parse(k, v)?,
                "protocol.sessions" => c.sessions = parse(k, v)?,
                "protocol.ways" => c.ways = parse(k, v)?,
                "protocol.shots" => c.shots = parse(k, v)?,
                "vision.input" => input_kind = v.to_string(),
                "vision.image_size" => image_size = parse(k, v)?,
                "vision.channels" => channels = parse(k, v)?,
                "vision.patch_size" => patch_size = parse(k, v)?,
                "vision.feature_chunk" => chunk = parse(k, v)?,
                "vision.embed_dim" => c.model.vision.embed_dim = parse(k, v)?,
                "vision.depth" => c.model.vision.depth = parse(k, v)?,
                "vision.heads" => c.model.vision.heads = parse(k, v)?,
                "vision.window_size" => c.model.vision.window_size = parse(k, v)?,
                "vision.shifted_windows" => c.model.vision.shifted_windows = parse_bool(k, v)?,
                "vision.global_attention" => c.model.vision.global_attention = parse_bool(k, v)?,
                "vision.mlp_hidden" => c.model.vision.mlp_hidden = parse(k, v)?,
                "vision.head_hidden" => c.model.vision.head_hidden = parse(k, v)?,
                "model.d_v" => {
                    let d: usize = parse(k, v)?;
                    c.model.vision.d_v = d;
                    c.model.text.d_v = d;
                }
                "model.separate_heads" => c.model.separate_heads = parse_bool(k, v)?,
                "text.vocab_size" => c.model.text.vocab_size = parse(k, v)?,
                "text.max_len" => c.model.text.max_len = parse(k, v)?,
                "text.token_dim" => c.model.text.token_dim = parse(k, v)?,
                "text.depth" => c.model.text.depth = parse(k, v)?,
                "text.heads" => c.model.text.heads = parse(k, v)?,
                "text.mlp_hidden" => c.model.text.mlp_hidden = parse(k, v)?,
                "text.d_s" => c.model.text.d_s = parse(k, v)?,
                "text.projection_hidden" => c.model.text.projection_hidden = parse(k, v)?,
                "text.template" => c.train.prompt_template = v.to_string(),
                "train.lambda" => c.train.lambda = parse(k, v)?,
                "train.lr" => c.train.lr_b = parse(k, v)?,
                "train.momentum" => c.train.momentum = parse(k, v)?,
                "train.epochs" => c.train.main_epochs = parse(k, v)?,
                "train.finetune_epochs" => c.train.finetune_epochs = parse(k, v)?,
                "train.finetune_lr" => c.train.finetune_lr = parse(k, v)?,
                "train.decay_factor" => c.train.decay_factor = parse(k, v)?,
                "train.decay_every" => c.train.decay_every = parse(k, v)?,
                "train.batch_size" => c.train.batch_size = parse(k, v)?,
                "train.freeze_text_encoder" => c.train.freeze_text_encoder = parse_bool(k, v)?,
                "train.augment_flip" => c.train.augment_flip = parse_bool(k, v)?,
                "train.augment_crop_pad" => c.train.augment_crop_pad = parse(k, v)?,
                "head.scoring" => {
                    c.scoring = match v {
                        "cosine" => Scoring::Cosine,
                        "dot" => Scoring::Dot,
                        _ => return Err(SvtError::Config(format!("{k} = {v:?}: expected cosine or dot"))),
                    }
                }
                "output.dir" => c.out_dir = PathBuf::from(v),
                "output.encoder_label" => c.encoder_label = v.to_string(),
                "output.export_classes" => {
                    c.export_classes = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                _ => unreachable!("keys were checked above"),
            }
        }
        c.data = if source == "synthetic" {
            DataSource::Synthetic {
                classes: synth.0,
                train_per_class: synth.1,
                test_per_class: synth.2,
                feature_dim: synth.3,
                spread: synth.4,
            }
        } else {
            DataSource::Manifest(PathBuf::from(&source))
        };
        c.model.vision.input = match input_kind.as_str() {
            "features" => InputLayout::Features {
                dim: if feature_dim_set || matches!(c.data, DataSource::Synthetic { .. }) {
                    synth.3
                } else {
                    return Err(SvtError::Config(
                        "vision.input = features with a manifest needs data.feature_dim".into(),
                    ));
                },
                chunk,
            },
            "image" => InputLayout::Image {
                image_size,
                channels,
                patch_size,
            },
            other => {
                return Err(SvtError::Config(format!(
                    "vision.input = {other:?}: expected features or image"
                )))
            }
        };
        c.train.seed = c.seed;
        c.model.num_classes = c.base_classes;
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                c.out_dir = PathBuf::from(dir);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.ways == 0 || self.shots == 0 {
            return Err(SvtError::Config("protocol.ways and protocol.shots must be ≥ 1".into()));
        }
        if let DataSource::Synthetic { spread, .. } = self.data {
            if !(spread >= 0.0 && spread.is_finite()) {
                return Err(SvtError::Config(format!("data.spread must be ≥ 0, got {spread}")));
            }
        }
        if self.train.prompt_template != DEFAULT_TEMPLATE {
            crate::text::render_prompt("x", &self.train.prompt_template)?;
        }
        Ok(())
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            base_class_count: self.base_classes,
            session_count: self.sessions,
            ways: self.ways,
            shots: self.shots,
            seed: self.seed,
        }
    }

    /// Every key with its effective value, one `key = value` line each, in
    /// [`Self::KEYS`] order.
    pub fn canonical(&self) -> String {
        let v = &self.model.vision;
        let t = &self.model.text;
        let tr = &self.train;
        let (source, classes, train_pc, test_pc, fdim, spread) = match &self.data {
            DataSource::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                feature_dim,
                spread,
            } => (
                "synthetic".to_string(),
                classes.to_string(),
                train_per_class.to_string(),
                test_per_class.to_string(),
                feature_dim.to_string(),
                format!("{spread:?}"),
            ),
            DataSource::Manifest(p) => (
                p.display().to_string(),
                "-".into(),
                "-".into(),
                "-".into(),
                match v.input {
                    InputLayout::Features { dim, .. } => dim.to_string(),
                    InputLayout::Image { .. } => "-".into(),
                },
                "-".into(),
            ),
        };
        let (input, image_size, channels, patch_size, chunk) = match v.input {
            InputLayout::Image {
                image_size,
                channels,
                patch_size,
            } => ("image", image_size.to_string(), channels.to_string(), patch_size.to_string(), "-".into()),
            InputLayout::Features { chunk, .. } => ("features", "-".into(), "-".into(), "-".into(), chunk.to_string()),
        };
        let scoring = match self.scoring {
            Scoring::Cosine => "cosine",
            Scoring::Dot => "dot",
        };
        let values: Vec<String> = vec![
            self.seed.to_string(),
            source,
            classes,
            train_pc,
            test_pc,
            fdim,
            spread,
            self.base_classes.to_string(),
            self.sessions.to_string(),
            self.ways.to_string(),
            self.shots.to_string(),
            input.into(),
            image_size,
            channels,
            patch_size,
            chunk,
            v.embed_dim.to_string(),
            v.depth.to_string(),
            v.heads.to_string(),
            v.window_size.to_string(),
            v.shifted_windows.to_string(),
            v.global_attention.to_string(),
            v.mlp_hidden.to_string(),
            v.head_hidden.to_string(),
            v.d_v.to_string(),
            self.model.separate_heads.to_string(),
            t.vocab_size.to_string(),
            t.max_len.to_string(),
            t.token_dim.to_string(),
            t.depth.to_string(),
            t.heads.to_string(),
            t.mlp_hidden.to_string(),
            t.d_s.to_string(),
            t.projection_hidden.to_string(),
            tr.prompt_template.clone(),
            format!("{:?}", tr.lambda),
            format!("{:?}", tr.lr_b),
            format!("{:?}", tr.momentum),
            tr.main_epochs.to_string(),
            tr.finetune_epochs.to_string(),
            format!("{:?}", tr.finetune_lr),
            format!("{:?}", tr.decay_factor),
            tr.decay_every.to_string(),
            tr.batch_size.to_string(),
            tr.freeze_text_encoder.to_string(),
            tr.augment_flip.to_string(),
            tr.augment_crop_pad.to_string(),
            scoring.into(),
            self.out_dir.display().to_string(),
            self.encoder_label.clone(),
            self.export_classes.join(","),
        ];
        debug_assert_eq!(values.len(), Self::KEYS.len());
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical form without the
    /// seed and output directory, so a run hashes the same wherever it is
    /// written.
    pub fn config_hash(&self) -> String {
        let canonical: String = self
            .canonical()
            .lines()
            .filter(|l| !l.starts_with("seed =") && !l.starts_with("output.dir ="))
            .map(|l| format!("{l}\n"))
            .collect();
        hex(&Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-{}", self.config_hash(), self.seed))
    }
}
