//! Run configuration.
//!
//! Every hyperparameter and interpretation knob lives in [`TrainConfig`], which
//! is read from a TOML file and written verbatim into checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::semantic_sync::DescriptionEmbedderSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub encoders: EncodersConfig,
    pub embedder: DescriptionEmbedderSpec,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared model width.
    pub d_t: usize,
    /// Text length; every modality is aligned to it.
    pub l_t: usize,
    pub l_v: usize,
    pub l_a: usize,
    /// Anchors selected per auxiliary stream.
    pub k: usize,
    pub heads: usize,
    /// Hidden width of the feedforward inside each cross-attention block.
    pub block_ff_hidden: usize,
    pub encoder_kind: EncoderStackKind,
    pub encoder_depth: usize,
    pub encoder_ff_hidden: usize,
    /// Weights for `encoder_kind = "external"`, a checkpoint file.
    pub encoder_weights: Option<PathBuf>,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub pooling: Pooling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderStackKind {
    Toy,
    External,
}

/// How the sequence is reduced before the token MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub negatives: NegativesMode,
    pub include_positive_in_denominator: bool,
}

/// Which descriptions form the denominator of the triplet loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativesMode {
    /// Every bank label other than the sample's own.
    Label,
    /// Labels of the other batch members that differ from the sample's own.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Also return the last-epoch parameters.
    pub keep_last: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodersConfig {
    pub text: EncoderSpec,
    pub video: EncoderSpec,
    pub audio: EncoderSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
    /// Descriptions used per label (the first `m` of each list).
    pub descriptions_per_label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Average {
    Macro,
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub average: Average,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            average: Average::Macro,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_t: 32,
            l_t: 50,
            l_v: 180,
            l_a: 400,
            k: 8,
            heads: 1,
            block_ff_hidden: 32,
            encoder_kind: EncoderStackKind::Toy,
            encoder_depth: 2,
            encoder_ff_hidden: 128,
            encoder_weights: None,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            pooling: Pooling::Mean,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            negatives: NegativesMode::Label,
            include_positive_in_denominator: false,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 8,
            epochs: 40,
            patience: 8,
            keep_last: false,
        }
    }
}

impl Default for EncodersConfig {
    fn default() -> Self {
        Self {
            text: EncoderSpec::mock(32, 50, 7),
            video: EncoderSpec::mock(24, 180, 11),
            audio: EncoderSpec::mock(16, 400, 13),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            encoders: EncodersConfig::default(),
            embedder: DescriptionEmbedderSpec::default(),
            data: DataConfig {
                descriptions_per_label: 3,
                ..DataConfig::default()
            },
            metrics: MetricsConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for synthetic data: shorter sequences, everything
    /// else at the defaults.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.model.l_t = 24;
        cfg.model.l_v = 32;
        cfg.model.l_a = 48;
        cfg.model.k = 4;
        cfg.encoders.text.max_length = 24;
        cfg.encoders.video.max_length = 32;
        cfg.encoders.audio.max_length = 48;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("model.d_t", m.d_t),
            ("model.l_t", m.l_t),
            ("model.l_v", m.l_v),
            ("model.l_a", m.l_a),
            ("model.k", m.k),
            ("model.heads", m.heads),
            ("model.block_ff_hidden", m.block_ff_hidden),
            ("model.encoder_ff_hidden", m.encoder_ff_hidden),
            ("optim.batch_size", self.optim.batch_size),
            ("optim.epochs", self.optim.epochs),
            ("optim.patience", self.optim.patience),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if m.k > m.l_t {
            return bad(format!("model.k = {} exceeds model.l_t = {}", m.k, m.l_t));
        }
        if m.l_t < 2 {
            return bad("model.l_t must be at least 2 for anchor selection".into());
        }
        if m.d_t % m.heads != 0 {
            return bad(format!("model.d_t = {} not divisible by heads = {}", m.d_t, m.heads));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("model.dropout = {} outside [0, 1)", m.dropout));
        }
        if !(m.layer_norm_eps > 0.0) {
            return bad("model.layer_norm_eps must be positive".into());
        }
        if m.encoder_kind == EncoderStackKind::External && m.encoder_weights.is_none() {
            return bad("model.encoder_kind = external requires model.encoder_weights".into());
        }
        if !(self.loss.tau > 0.0) {
            return bad(format!("loss.tau = {} must be positive", self.loss.tau));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || o.grad_clip < 0.0 || !(o.eps > 0.0) {
            return bad("optim.lr/eps must be positive, weight_decay/grad_clip non-negative".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optim betas must lie in [0, 1)".into());
        }
        if o.patience > o.epochs {
            return bad(format!(
                "optim.patience = {} exceeds optim.epochs = {}",
                o.patience, o.epochs
            ));
        }
        if self.data.descriptions_per_label < 2 {
            return bad(format!(
                "data.descriptions_per_label = {} but at least 2 are required",
                self.data.descriptions_per_label
            ));
        }
        if self.embedder.dim != m.d_t {
            return bad(format!(
                "embedder.dim = {} must equal model.d_t = {}",
                self.embedder.dim, m.d_t
            ));
        }
        for (name, spec) in [
            ("text", &self.encoders.text),
            ("video", &self.encoders.video),
            ("audio", &self.encoders.audio),
        ] {
            spec.validate()
                .map_err(|e| Error::Config(format!("encoders.{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|source| Error::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Apply a `section.key=value` override; the value is parsed as a TOML
    /// scalar, falling back to a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut tree = toml::Value::try_from(&*self).expect("config serializes");
        let mut node = &mut tree;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config section `{part}` in `{key}`")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` does not name a config field")))?;
        let last = parts[parts.len() - 1];
        // Optional fields are absent from the serialized tree when unset.
        table.insert(last.to_string(), value);
        *self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }
}
