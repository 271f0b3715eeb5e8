//! Bi-modal encoder.
//!
//! Each layer runs per-modality self-attention, then cross-modal attention where
//! audio queries attend to visual keys/values and vice versa, then a per-modality
//! position-wise network. Every sub-layer is a pre-norm residual block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, MultiHeadAttention, MultiHeadConfig};
use crate::error::{Error, Result};
use crate::layers::{residual, FeedForward, LayerNorm};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub heads: usize,
    /// Internal width of the cross-modal attention blocks.
    pub d_internal: usize,
    pub dropout_p: f64,
    /// LayerNorm on both output streams after the last layer.
    pub final_norm: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_audio == 0 || self.d_visual == 0 || self.heads == 0 || self.d_internal == 0 {
            return Err(Error::config(format!("encoder sizes must be positive: {self:?}")));
        }
        for (name, d) in [("d_audio", self.d_audio), ("d_visual", self.d_visual)] {
            if d % 2 != 0 {
                return Err(Error::config(format!(
                    "{name}={d} must be even for positional encoding"
                )));
            }
        }
        for cfg in self.attention_configs() {
            cfg.validate()?;
        }
        Ok(())
    }

    /// `[audio self, visual self, audio←visual, visual←audio]`
    fn attention_configs(&self) -> [MultiHeadConfig; 4] {
        let p = self.dropout_p;
        [
            MultiHeadConfig::new(self.heads, self.d_audio, self.d_audio, p),
            MultiHeadConfig::new(self.heads, self.d_visual, self.d_visual, p),
            MultiHeadConfig::new(self.heads, self.d_audio, self.d_visual, p).with_internal(self.d_internal),
            MultiHeadConfig::new(self.heads, self.d_visual, self.d_audio, p).with_internal(self.d_internal),
        ]
    }
}

/// Sinusoid table: `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(·)`.
pub fn positional_encoding(t: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(format!("positional encoding width {d} must be even")));
    }
    if t == 0 {
        return Err(Error::contract("positional encoding for an empty sequence"));
    }
    let mut data = vec![0.0; t * d];
    for p in 0..t {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = angle.sin();
            data[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![t, d], data)
}

/// Adds the sinusoid table to `x` and applies dropout.
pub fn add_positional_encoding(tape: &mut Tape, x: Var, dropout_p: f64) -> Result<Var> {
    let (t, d) = tape.dims2(x)?;
    let pe = tape.constant(positional_encoding(t, d)?);
    let y = tape.add(x, pe)?;
    tape.dropout(y, dropout_p)
}

/// Encoder output: visual-attended audio and audio-attended visual features, plus the
/// padding masks they were computed under.
#[derive(Debug, Clone)]
pub struct BiModalFeatures {
    pub audio: Var,
    pub visual: Var,
    pub audio_mask: Vec<bool>,
    pub visual_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
struct StreamBlocks {
    norm_self: LayerNorm,
    self_att: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_att: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    audio: StreamBlocks,
    visual: StreamBlocks,
    dropout_p: f64,
}

struct LayerMasks {
    audio_self: AttentionMask,
    visual_self: AttentionMask,
    audio_cross: AttentionMask,
    visual_cross: AttentionMask,
}

impl LayerMasks {
    fn new(audio_valid: &[bool], visual_valid: &[bool]) -> Self {
        let (ta, tv) = (audio_valid.len(), visual_valid.len());
        LayerMasks {
            audio_self: AttentionMask::padding(ta, audio_valid),
            visual_self: AttentionMask::padding(tv, visual_valid),
            audio_cross: AttentionMask::padding(ta, visual_valid),
            visual_cross: AttentionMask::padding(tv, audio_valid),
        }
    }
}

impl EncoderLayer {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        let [self_a, self_v, cross_a, cross_v] = cfg.attention_configs();
        let mut stream = |tag: &str, d: usize, self_cfg, cross_cfg, rng: &mut _| -> Result<StreamBlocks> {
            Ok(StreamBlocks {
                norm_self: LayerNorm::new(store, &format!("{prefix}.norm_self_{tag}"), d)?,
                self_att: MultiHeadAttention::new(self_cfg, store, &format!("{prefix}.self_att_{tag}"), rng)?,
                norm_cross: LayerNorm::new(store, &format!("{prefix}.norm_cross_{tag}"), d)?,
                cross_att: MultiHeadAttention::new(cross_cfg, store, &format!("{prefix}.cross_att_{tag}"), rng)?,
                norm_ff: LayerNorm::new(store, &format!("{prefix}.norm_ff_{tag}"), d)?,
                ff: FeedForward::new(store, &format!("{prefix}.ff_{tag}"), d, cfg.dropout_p, rng)?,
            })
        };
        let audio = stream("a", cfg.d_audio, self_a, cross_a, rng)?;
        let visual = stream("v", cfg.d_visual, self_v, cross_v, rng)?;
        Ok(EncoderLayer {
            audio,
            visual,
            dropout_p: cfg.dropout_p,
        })
    }

    /// One layer: `(A_prev, V_prev) → (A_fc, V_fc)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        audio: Var,
        visual: Var,
        audio_valid: &[bool],
        visual_valid: &[bool],
    ) -> Result<(Var, Var)> {
        let masks = LayerMasks::new(audio_valid, visual_valid);
        self.forward_masked(tape, store, audio, visual, &masks)
    }

    fn forward_masked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        audio: Var,
        visual: Var,
        masks: &LayerMasks,
    ) -> Result<(Var, Var)> {
        let p = self.dropout_p;
        let (a, v) = (&self.audio, &self.visual);

        let a_self = residual(tape, store, &a.norm_self, audio, p, |t, x| {
            a.self_att.forward(t, store, x, x, x, Some(&masks.audio_self))
        })?;
        let v_self = residual(tape, store, &v.norm_self, visual, p, |t, x| {
            v.self_att.forward(t, store, x, x, x, Some(&masks.visual_self))
        })?;

        let a_mm = residual(tape, store, &a.norm_cross, a_self, p, |t, x| {
            a.cross_att
                .forward(t, store, x, v_self, v_self, Some(&masks.audio_cross))
        })?;
        let v_mm = residual(tape, store, &v.norm_cross, v_self, p, |t, x| {
            v.cross_att
                .forward(t, store, x, a_self, a_self, Some(&masks.visual_cross))
        })?;

        let a_fc = residual(tape, store, &a.norm_ff, a_mm, p, |t, x| a.ff.forward(t, store, x))?;
        let v_fc = residual(tape, store, &v.norm_ff, v_mm, p, |t, x| v.ff.forward(t, store, x))?;
        Ok((a_fc, v_fc))
    }

    /// Parameters whose zeroing turns every sub-layer output into zero.
    pub fn output_params(&self) -> Vec<crate::tensor::ParamId> {
        let mut out = Vec::new();
        for s in [&self.audio, &self.visual] {
            out.push(s.self_att.w_out);
            out.push(s.cross_att.w_out);
            out.push(s.ff.project.weight);
            out.push(s.ff.project.bias);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BiModalEncoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
    final_norm: Option<(LayerNorm, LayerNorm)>,
}

impl BiModalEncoder {
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|n| EncoderLayer::new(&cfg, store, &format!("{prefix}.layer{n}"), rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if cfg.final_norm {
            Some((
                LayerNorm::new(store, &format!("{prefix}.final_norm_a"), cfg.d_audio)?,
                LayerNorm::new(store, &format!("{prefix}.final_norm_v"), cfg.d_visual)?,
            ))
        } else {
            None
        };
        Ok(BiModalEncoder {
            cfg,
            layers,
            final_norm,
        })
    }

    /// Encodes padded streams. `audio` is `T_a×d_a`, `visual` is `T_v×d_v`; the masks
    /// mark real rows and must each contain at least one `true`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        audio: Var,
        visual: Var,
        audio_valid: &[bool],
        visual_valid: &[bool],
    ) -> Result<BiModalFeatures> {
        let (ta, da) = tape.dims2(audio)?;
        let (tv, dv) = tape.dims2(visual)?;
        if da != self.cfg.d_audio || dv != self.cfg.d_visual {
            return Err(Error::dim(format!(
                "encoder expects widths ({}, {}), got audio {:?} and visual {:?}",
                self.cfg.d_audio,
                self.cfg.d_visual,
                tape.shape(audio),
                tape.shape(visual)
            )));
        }
        if audio_valid.len() != ta || visual_valid.len() != tv {
            return Err(Error::dim(format!(
                "masks of length ({}, {}) for sequences of length ({ta}, {tv})",
                audio_valid.len(),
                visual_valid.len()
            )));
        }
        if !audio_valid.contains(&true) || !visual_valid.contains(&true) {
            return Err(Error::contract("encoder input has an empty stream"));
        }

        let mut a = add_positional_encoding(tape, audio, self.cfg.dropout_p)?;
        let mut v = add_positional_encoding(tape, visual, self.cfg.dropout_p)?;
        let masks = LayerMasks::new(audio_valid, visual_valid);
        for layer in &self.layers {
            (a, v) = layer.forward_masked(tape, store, a, v, &masks)?;
        }
        if let Some((na, nv)) = &self.final_norm {
            a = na.forward(tape, store, a)?;
            v = nv.forward(tape, store, v)?;
        }
        Ok(BiModalFeatures {
            audio: a,
            visual: v,
            audio_mask: audio_valid.to_vec(),
            visual_mask: visual_valid.to_vec(),
        })
    }

    /// Encodes unpadded streams.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        audio: &Tensor,
        visual: &Tensor,
    ) -> Result<BiModalFeatures> {
        let (ta, _) = audio.dims2()?;
        let (tv, _) = visual.dims2()?;
        let a = tape.leaf(audio);
        let v = tape.leaf(visual);
        self.forward(tape, store, a, v, &vec![true; ta], &vec![true; tv])
    }
}
