//! Bi-modal decoder and the word generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, MultiHeadAttention, MultiHeadConfig};
use crate::encoder::{add_positional_encoding, BiModalFeatures};
use crate::error::{Error, Result};
use crate::layers::{residual, FeedForward, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d_caption: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub heads: usize,
    pub d_internal: usize,
    pub dropout_p: f64,
    pub vocab_size: usize,
    /// LayerNorm after the last layer, before the generator.
    pub final_norm: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_caption == 0 || !self.d_caption.is_multiple_of(2) {
            return Err(Error::config(format!(
                "caption width {} must be even and positive",
                self.d_caption
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("empty vocabulary"));
        }
        for cfg in self.attention_configs() {
            cfg.validate()?;
        }
        Ok(())
    }

    /// `[caption self, caption←audio, caption←visual]`
    fn attention_configs(&self) -> [MultiHeadConfig; 3] {
        let p = self.dropout_p;
        [
            MultiHeadConfig::new(self.heads, self.d_caption, self.d_caption, p),
            MultiHeadConfig::new(self.heads, self.d_caption, self.d_audio, p).with_internal(self.d_internal),
            MultiHeadConfig::new(self.heads, self.d_caption, self.d_visual, p).with_internal(self.d_internal),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    norm_self: LayerNorm,
    self_att: MultiHeadAttention,
    norm_audio: LayerNorm,
    att_audio: MultiHeadAttention,
    norm_visual: LayerNorm,
    att_visual: MultiHeadAttention,
    bridge: Linear,
    norm_ff: LayerNorm,
    ff: FeedForward,
    dropout_p: f64,
}

impl DecoderLayer {
    pub fn new(cfg: &DecoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        let [self_cfg, audio_cfg, visual_cfg] = cfg.attention_configs();
        let d = cfg.d_caption;
        Ok(DecoderLayer {
            norm_self: LayerNorm::new(store, &format!("{prefix}.norm_self"), d)?,
            self_att: MultiHeadAttention::new(self_cfg, store, &format!("{prefix}.self_att"), rng)?,
            norm_audio: LayerNorm::new(store, &format!("{prefix}.norm_att_a"), d)?,
            att_audio: MultiHeadAttention::new(audio_cfg, store, &format!("{prefix}.att_a"), rng)?,
            norm_visual: LayerNorm::new(store, &format!("{prefix}.norm_att_v"), d)?,
            att_visual: MultiHeadAttention::new(visual_cfg, store, &format!("{prefix}.att_v"), rng)?,
            bridge: Linear::new(store, &format!("{prefix}.bridge"), 2 * d, d, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{prefix}.norm_ff"), d)?,
            ff: FeedForward::new(store, &format!("{prefix}.ff"), d, cfg.dropout_p, rng)?,
            dropout_p: cfg.dropout_p,
        })
    }

    /// `C_prev: t×d_c → C_fc: t×d_c`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        caption: Var,
        self_mask: &AttentionMask,
        enc: &BiModalFeatures,
    ) -> Result<Var> {
        let p = self.dropout_p;
        let (t, _) = tape.dims2(caption)?;
        let audio_mask = AttentionMask::padding(t, &enc.audio_mask);
        let visual_mask = AttentionMask::padding(t, &enc.visual_mask);

        let c_self = residual(tape, store, &self.norm_self, caption, p, |tp, x| {
            self.self_att.forward(tp, store, x, x, x, Some(self_mask))
        })?;
        // both cross-attentions query the same self-attended captions
        let c_audio = residual(tape, store, &self.norm_audio, c_self, p, |tp, x| {
            self.att_audio
                .forward(tp, store, x, enc.audio, enc.audio, Some(&audio_mask))
        })?;
        let c_visual = residual(tape, store, &self.norm_visual, c_self, p, |tp, x| {
            self.att_visual
                .forward(tp, store, x, enc.visual, enc.visual, Some(&visual_mask))
        })?;

        // bridge: no residual, in and out widths differ
        let cat = tape.concat_cols(&[c_audio, c_visual])?;
        let fused = self.bridge.forward(tape, store, cat)?;
        let fused = tape.dropout(fused, p)?;
        let c_mm = tape.relu(fused);

        residual(tape, store, &self.norm_ff, c_mm, p, |tp, x| {
            self.ff.forward(tp, store, x)
        })
    }
}

#[derive(Debug, Clone)]
pub struct BiModalDecoder {
    pub cfg: DecoderConfig,
    pub embedding: ParamId,
    pub layers: Vec<DecoderLayer>,
    final_norm: Option<LayerNorm>,
}

impl BiModalDecoder {
    pub fn new(cfg: DecoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let embedding = store.register_xavier(
            format!("{prefix}.embedding"),
            &[cfg.vocab_size, cfg.d_caption],
            cfg.vocab_size,
            cfg.d_caption,
            rng,
        )?;
        let layers = (0..cfg.layers)
            .map(|n| DecoderLayer::new(&cfg, store, &format!("{prefix}.layer{n}"), rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if cfg.final_norm {
            Some(LayerNorm::new(store, &format!("{prefix}.final_norm"), cfg.d_caption)?)
        } else {
            None
        };
        Ok(BiModalDecoder {
            cfg,
            embedding,
            layers,
            final_norm,
        })
    }

    /// Replaces the embedding table, e.g. with pre-trained word vectors.
    pub fn set_embeddings(&self, store: &mut ParamStore, table: Tensor) -> Result<()> {
        let slot = store.get_mut(self.embedding);
        if slot.shape() != table.shape() {
            return Err(Error::dim(format!(
                "embedding table {:?}, expected {:?}",
                table.shape(),
                slot.shape()
            )));
        }
        let trainable = slot.requires_grad();
        *slot = table.with_grad(trainable);
        Ok(())
    }

    /// Decodes caption prefixes. `tokens` has length `t ≥ 1` (it starts with the start
    /// token); `token_valid` marks non-pad positions. Returns `C_av: t×d_c`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        token_valid: &[bool],
        enc: &BiModalFeatures,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::contract("decoder input needs at least the start token"));
        }
        if token_valid.len() != tokens.len() {
            return Err(Error::dim(format!(
                "{} mask entries for {} tokens",
                token_valid.len(),
                tokens.len()
            )));
        }
        if !token_valid[0] {
            return Err(Error::contract("first caption position is padding"));
        }
        let table = tape.param(store, self.embedding);
        let emb = tape.gather_rows(table, tokens)?;
        let mut c = add_positional_encoding(tape, emb, self.cfg.dropout_p)?;
        let self_mask = AttentionMask::causal_padding(token_valid);
        for layer in &self.layers {
            c = layer.forward(tape, store, c, &self_mask, enc)?;
        }
        if let Some(norm) = &self.final_norm {
            c = norm.forward(tape, store, c)?;
        }
        Ok(c)
    }
}

/// Fully-connected layer from caption features to vocabulary logits.
#[derive(Debug, Clone)]
pub struct Generator {
    pub proj: Linear,
}

impl Generator {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_caption: usize,
        vocab: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Generator {
            proj: Linear::new(store, prefix, d_caption, vocab, rng)?,
        })
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, c: Var) -> Result<Var> {
        self.proj.forward(tape, store, c)
    }

    /// Row-stochastic `t×vocab` next-word distribution.
    pub fn distribution(&self, tape: &mut Tape, store: &ParamStore, c: Var) -> Result<Var> {
        let z = self.logits(tape, store, c)?;
        tape.softmax_rows(z, None)
    }

    pub fn log_distribution(&self, tape: &mut Tape, store: &ParamStore, c: Var) -> Result<Var> {
        let z = self.logits(tape, store, c)?;
        tape.log_softmax_rows(z)
    }
}
