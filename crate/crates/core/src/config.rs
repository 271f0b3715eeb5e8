//! Declarative run configuration. Defaults are the full-scale hyperparameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{MatchMode, DEFAULT_THRESHOLDS};
use crate::training::{AdamConfig, LoopSettings, LossCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    /// Captioner first; proposal heads on its frozen encoder.
    #[default]
    CapThenProp,
    /// Proposal generator first; captioner on its frozen encoder.
    PropThenCap,
    /// Both trained from scratch with their own encoders.
    Separate,
}

impl StageOrder {
    pub const ALL: [StageOrder; 3] = [StageOrder::Separate, StageOrder::PropThenCap, StageOrder::CapThenProp];

    pub fn label(self) -> &'static str {
        match self {
            StageOrder::CapThenProp => "Cap → Prop",
            StageOrder::PropThenCap => "Prop → Cap",
            StageOrder::Separate => "Separately",
        }
    }
}

impl std::str::FromStr for StageOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cap_then_prop" => Ok(StageOrder::CapThenProp),
            "prop_then_cap" => Ok(StageOrder::PropThenCap),
            "separate" => Ok(StageOrder::Separate),
            other => Err(Error::config(format!("unknown stage order {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training annotations (ActivityNet Captions schema).
    pub annotations: PathBuf,
    pub val_annotations: Option<PathBuf>,
    /// Directory of `<video>.audio.bmtf` / `<video>.visual.bmtf` files.
    pub features_dir: PathBuf,
    pub audio_cell_seconds: f64,
    pub visual_cell_seconds: f64,
    pub pad_audio: usize,
    pub pad_visual: usize,
    pub min_count: usize,
    /// Optional text word vectors (`word v1 … vd`) for the embedding table.
    pub word_vectors: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            annotations: PathBuf::from("annotations.json"),
            val_annotations: None,
            features_dir: PathBuf::from("features"),
            audio_cell_seconds: 0.96,
            visual_cell_seconds: 2.56,
            pad_audio: 800,
            pad_visual: 300,
            min_count: 1,
            word_vectors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_audio: usize,
    pub d_visual: usize,
    pub d_caption: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_internal: usize,
    pub dropout: f64,
    pub encoder_final_norm: bool,
    pub decoder_final_norm: bool,
    pub max_caption_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_audio: 128,
            d_visual: 1024,
            d_caption: 300,
            layers: 2,
            heads: 4,
            d_internal: 1024,
            dropout: 0.1,
            encoder_final_norm: true,
            decoder_final_norm: true,
            max_caption_len: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalSection {
    pub hidden: usize,
    pub dropout: f64,
    pub audio_anchor_count: usize,
    pub visual_anchor_count: usize,
    pub audio_heads: usize,
    pub visual_heads: usize,
    /// Explicit anchors in cells; estimated from the training annotations when empty.
    pub audio_anchors: Vec<f64>,
    pub visual_anchors: Vec<f64>,
    /// Explicit kernel sizes; estimated from the training annotations when empty.
    pub audio_kernels: Vec<usize>,
    pub visual_kernels: Vec<usize>,
    pub top_k: usize,
    /// Allowed relative gap between `pad_audio·|Ψ_a|` and `pad_visual·|Ψ_v|`.
    pub balance_tolerance: f64,
}

impl Default for ProposalSection {
    fn default() -> Self {
        ProposalSection {
            hidden: 512,
            dropout: 0.1,
            audio_anchor_count: 48,
            visual_anchor_count: 128,
            audio_heads: 10,
            visual_heads: 10,
            audio_anchors: Vec::new(),
            visual_anchors: Vec::new(),
            audio_kernels: Vec::new(),
            visual_kernels: Vec::new(),
            top_k: 100,
            balance_tolerance: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage_order: StageOrder,
    pub label_smoothing: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub caption_batch: usize,
    pub proposal_batch: usize,
    pub loc_coeff: f64,
    pub obj_coeff: f64,
    pub noobj_coeff: f64,
    pub caption_epochs: usize,
    pub proposal_epochs: usize,
    pub caption_max_steps: Option<usize>,
    pub proposal_max_steps: Option<usize>,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage_order: StageOrder::CapThenProp,
            label_smoothing: 0.7,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            caption_batch: 32,
            proposal_batch: 16,
            loc_coeff: 1.0,
            obj_coeff: 1.0,
            noobj_coeff: 100.0,
            caption_epochs: 100,
            proposal_epochs: 70,
            caption_max_steps: None,
            proposal_max_steps: None,
            patience: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub thresholds: Vec<f64>,
    pub match_mode: MatchMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            match_mode: MatchMode::AnyOverlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub proposals: ProposalSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Checks `pad_a·|Ψ_a|` against `pad_v·|Ψ_v|` and returns both products.
pub fn check_balance(pad_a: usize, psi_a: usize, pad_v: usize, psi_v: usize, tolerance: f64) -> Result<(usize, usize)> {
    let (a, v) = (pad_a * psi_a, pad_v * psi_v);
    let gap = a.abs_diff(v) as f64 / a.max(v).max(1) as f64;
    if gap > tolerance {
        return Err(Error::config(format!(
            "modality balance off: {pad_a}·{psi_a} = {a} vs {pad_v}·{psi_v} = {v} (relative gap {gap:.4} > {tolerance})"
        )));
    }
    Ok((a, v))
}

impl Config {
    /// Parses TOML; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text)?;
        if let Some(base) = base {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.annotations);
        fix(&mut self.data.features_dir);
        if let Some(p) = &mut self.data.val_annotations {
            fix(p);
        }
        if let Some(p) = &mut self.data.word_vectors {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        let m = &self.model;
        if m.max_caption_len == 0 {
            return Err(Error::config("max_caption_len must be positive"));
        }
        let p = &self.proposals;
        if p.top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        if p.audio_heads + p.visual_heads == 0 {
            return Err(Error::config("at least one proposal head is needed"));
        }
        let psi_a = if p.audio_anchors.is_empty() {
            p.audio_anchor_count
        } else {
            p.audio_anchors.len()
        };
        let psi_v = if p.visual_anchors.is_empty() {
            p.visual_anchor_count
        } else {
            p.visual_anchors.len()
        };
        if psi_a == 0 || psi_v == 0 {
            return Err(Error::config("anchor counts must be positive"));
        }
        if !p.audio_kernels.is_empty() && p.audio_kernels.len() != p.audio_heads
            || !p.visual_kernels.is_empty() && p.visual_kernels.len() != p.visual_heads
        {
            return Err(Error::config("explicit kernel lists must have one entry per head"));
        }
        if p.audio_kernels.iter().chain(&p.visual_kernels).any(|k| k % 2 == 0) {
            return Err(Error::config("kernel sizes must be odd"));
        }
        check_balance(
            self.data.pad_audio,
            psi_a,
            self.data.pad_visual,
            psi_v,
            p.balance_tolerance,
        )?;
        let t = &self.train;
        if !(0.0..1.0).contains(&t.label_smoothing) {
            return Err(Error::config(format!(
                "label smoothing {} outside [0, 1)",
                t.label_smoothing
            )));
        }
        self.coefficients().validate()?;
        if t.caption_batch == 0 || t.proposal_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.data.audio_cell_seconds > 0.0 && self.data.visual_cell_seconds > 0.0) {
            return Err(Error::config("cell spans must be positive"));
        }
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) {
            return Err(Error::config("thresholds must be a non-empty list in (0, 1]"));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            layers: m.layers,
            d_audio: m.d_audio,
            d_visual: m.d_visual,
            heads: m.heads,
            d_internal: m.d_internal,
            dropout_p: m.dropout,
            final_norm: m.encoder_final_norm,
        }
    }

    pub fn decoder_config(&self, vocab_size: usize) -> DecoderConfig {
        let m = &self.model;
        DecoderConfig {
            layers: m.layers,
            d_caption: m.d_caption,
            d_audio: m.d_audio,
            d_visual: m.d_visual,
            heads: m.heads,
            d_internal: m.d_internal,
            dropout_p: m.dropout,
            vocab_size,
            final_norm: m.decoder_final_norm,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
        }
    }

    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            loc: self.train.loc_coeff,
            obj: self.train.obj_coeff,
            noobj: self.train.noobj_coeff,
        }
    }

    pub fn caption_loop(&self) -> LoopSettings {
        LoopSettings {
            adam: self.adam(),
            batch_size: self.train.caption_batch,
            max_epochs: self.train.caption_epochs,
            max_steps: self.train.caption_max_steps,
            patience: self.train.patience,
            seed: crate::util::derive_seed(self.seed, 1),
        }
    }

    pub fn proposal_loop(&self) -> LoopSettings {
        LoopSettings {
            adam: self.adam(),
            batch_size: self.train.proposal_batch,
            max_epochs: self.train.proposal_epochs,
            max_steps: self.train.proposal_max_steps,
            patience: self.train.patience,
            seed: crate::util::derive_seed(self.seed, 2),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_balance_is_exact() {
        assert_eq!(check_balance(800, 48, 300, 128, 0.0).unwrap(), (38_400, 38_400));
        assert!(check_balance(800, 48, 300, 100, 0.05).is_err());
    }

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(Config::from_toml(&cfg.to_toml(), None).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_toml("[model]\nwidth = 3\n", None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let cfg = Config::from_toml("[data]\nannotations = \"a.json\"\n", Some(Path::new("/x/y"))).unwrap();
        assert_eq!(cfg.data.annotations, PathBuf::from("/x/y/a.json"));
    }
}
