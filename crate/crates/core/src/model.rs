//! Captioning and proposal models assembled from the encoder, decoder and heads.

use rand::Rng;

use crate::data::{END, START};
use crate::decoder::{BiModalDecoder, DecoderConfig, Generator};
use crate::encoder::{BiModalEncoder, BiModalFeatures, EncoderConfig};
use crate::error::{Error, Result};
use crate::proposals::{HeadOutputs, Proposal, ProposalConfig, ProposalGenerator};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder";
pub const DECODER_PREFIX: &str = "decoder";
pub const GENERATOR_PREFIX: &str = "generator";
pub const PROPOSAL_PREFIX: &str = "proposal";

/// Padded features of one video or clip.
#[derive(Debug, Clone, Copy)]
pub struct Streams<'a> {
    pub audio: &'a Tensor,
    pub visual: &'a Tensor,
    pub audio_valid: &'a [bool],
    pub visual_valid: &'a [bool],
}

impl Streams<'_> {
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, encoder: &BiModalEncoder) -> Result<BiModalFeatures> {
        let a = tape.leaf(self.audio);
        let v = tape.leaf(self.visual);
        encoder.forward(tape, store, a, v, self.audio_valid, self.visual_valid)
    }
}

/// Encoder, decoder and generator; parameters live under `encoder.`, `decoder.` and
/// `generator.`.
#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub encoder: BiModalEncoder,
    pub decoder: BiModalDecoder,
    pub generator: Generator,
}

impl CaptionModel {
    pub fn new(enc: EncoderConfig, dec: DecoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if dec.d_audio != enc.d_audio || dec.d_visual != enc.d_visual {
            return Err(Error::config("decoder and encoder disagree on stream widths"));
        }
        let encoder = BiModalEncoder::new(enc, store, ENCODER_PREFIX, rng)?;
        let decoder = BiModalDecoder::new(dec, store, DECODER_PREFIX, rng)?;
        let generator = Generator::new(store, GENERATOR_PREFIX, dec.d_caption, dec.vocab_size, rng)?;
        Ok(CaptionModel {
            encoder,
            decoder,
            generator,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.cfg.vocab_size
    }

    /// Next-token log-probabilities `t×vocab` for the decoder input `tokens`.
    pub fn log_probs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &BiModalFeatures,
        tokens: &[usize],
        token_valid: &[bool],
    ) -> Result<Var> {
        let c = self.decoder.forward(tape, store, tokens, token_valid, enc)?;
        self.generator.log_distribution(tape, store, c)
    }

    /// Argmax decoding from the start token until the end token or `max_len` words.
    /// Returns the words without start and end markers.
    pub fn greedy_caption(&self, store: &ParamStore, streams: Streams<'_>, max_len: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let enc = streams.encode(&mut tape, store, &self.encoder)?;
        self.greedy_from(&mut tape, store, &enc, max_len)
    }

    pub fn greedy_from(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &BiModalFeatures,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mark = tape.len();
        let mut tokens = vec![START];
        for _ in 0..max_len {
            let valid = vec![true; tokens.len()];
            let c = self.decoder.forward(tape, store, &tokens, &valid, enc)?;
            let last = tape.dims2(c)?.0 - 1;
            let (_, d) = tape.dims2(c)?;
            let row = Tensor::new(vec![1, d], tape.value(c)[last * d..].to_vec())?;
            let row = tape.constant(row);
            let z = self.generator.logits(tape, store, row)?;
            let next = argmax(tape.value(z));
            tape.truncate(mark);
            if next == END {
                break;
            }
            tokens.push(next);
        }
        Ok(tokens[1..].to_vec())
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Encoder and proposal heads; parameters under `encoder.` and `proposal.`.
#[derive(Debug, Clone)]
pub struct ProposalModel {
    pub encoder: BiModalEncoder,
    pub heads: ProposalGenerator,
}

impl ProposalModel {
    pub fn new(enc: EncoderConfig, cfg: ProposalConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let encoder = BiModalEncoder::new(enc, store, ENCODER_PREFIX, rng)?;
        let heads = ProposalGenerator::new(cfg, enc.d_audio, enc.d_visual, store, PROPOSAL_PREFIX, rng)?;
        Ok(ProposalModel { encoder, heads })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        streams: Streams<'_>,
    ) -> Result<(BiModalFeatures, HeadOutputs)> {
        let enc = streams.encode(tape, store, &self.encoder)?;
        let out = self.heads.forward(tape, store, &enc)?;
        Ok((enc, out))
    }

    /// Top-`top_k` proposals of the common pool for one video (eval mode).
    pub fn propose(&self, store: &ParamStore, streams: Streams<'_>, top_k: usize) -> Result<Vec<Proposal>> {
        let mut tape = Tape::new();
        let enc = streams.encode(&mut tape, store, &self.encoder)?;
        self.heads.generate(&mut tape, store, &enc, top_k)
    }
}
