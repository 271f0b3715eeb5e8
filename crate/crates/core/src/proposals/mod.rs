//! Multi-headed bi-modal proposal generation.

pub mod kmeans;

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, Modality, PredictedSegment};
use crate::encoder::BiModalFeatures;
use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LOG_LENGTH_CLAMP: f64 = 8.0;

/// Segment-length priors for one modality, in grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub modality: Modality,
    pub anchors: Vec<f64>,
    pub cell_seconds: f64,
}

impl AnchorSet {
    pub fn new(modality: Modality, mut anchors: Vec<f64>, cell_seconds: f64) -> Result<Self> {
        if anchors.is_empty() || anchors.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::config(format!(
                "{modality} anchors must be positive and non-empty"
            )));
        }
        if !(cell_seconds > 0.0) {
            return Err(Error::config(format!("{modality} cell span must be positive")));
        }
        anchors.sort_by(f64::total_cmp);
        Ok(AnchorSet {
            modality,
            anchors,
            cell_seconds,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// K-means centroids of ground-truth lengths (seconds), converted to grid cells.
pub fn estimate_anchors(
    lengths_sec: &[f64],
    count: usize,
    modality: Modality,
    cell_seconds: f64,
    seed: u64,
) -> Result<AnchorSet> {
    let c = kmeans::kmeans(lengths_sec, count, seed)?;
    AnchorSet::new(
        modality,
        c.centroids.iter().map(|x| x / cell_seconds).collect(),
        cell_seconds,
    )
}

/// Rounds a centroid (in cells) up to the next odd integer.
pub fn next_odd(cells: f64) -> usize {
    let k = cells.ceil().max(1.0) as usize;
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

/// Odd, strictly increasing kernel sizes from K-means centroids of the ground-truth lengths.
pub fn estimate_kernel_sizes(lengths_sec: &[f64], count: usize, cell_seconds: f64, seed: u64) -> Result<Vec<usize>> {
    if !(cell_seconds > 0.0) {
        return Err(Error::config("cell span must be positive"));
    }
    let c = kmeans::kmeans(lengths_sec, count, seed)?;
    let mut ks: Vec<usize> = c.centroids.iter().map(|x| next_odd(x / cell_seconds)).collect();
    for i in 1..ks.len() {
        if ks[i] <= ks[i - 1] {
            ks[i] = ks[i - 1] + 2;
        }
    }
    Ok(ks)
}

/// Pool size `T_a·K_a·|Ψ_a| + T_v·K_v·|Ψ_v|`; each proposal carries three raw values.
pub fn pool_size(t_a: usize, k_a: usize, psi_a: usize, t_v: usize, k_v: usize, psi_v: usize) -> usize {
    t_a * k_a * psi_a + t_v * k_v * psi_v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalHeadConfig {
    pub kernel_size: usize,
    pub hidden: usize,
    pub d_in: usize,
    pub anchors: usize,
    pub dropout_p: f64,
}

impl ProposalHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {} is even", self.kernel_size)));
        }
        if self.hidden == 0 || self.d_in == 0 || self.anchors == 0 {
            return Err(Error::config("proposal head widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn out_width(&self) -> usize {
        3 * self.anchors
    }
}

/// Three temporal convolutions with kernel sizes `(k, 1, 1)`.
#[derive(Debug, Clone)]
pub struct ProposalHead {
    pub cfg: ProposalHeadConfig,
    pub convs: [(ParamId, ParamId); 3],
}

impl ProposalHead {
    pub fn new(cfg: ProposalHeadConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let shapes = [
            (cfg.kernel_size, cfg.d_in, cfg.hidden),
            (1, cfg.hidden, cfg.hidden),
            (1, cfg.hidden, cfg.out_width()),
        ];
        let mut convs = Vec::with_capacity(3);
        for (i, (k, din, dout)) in shapes.into_iter().enumerate() {
            let w = store.register_xavier(format!("{prefix}.conv{}.W", i + 1), &[k, din, dout], k * din, dout, rng)?;
            let b = store.register_const(format!("{prefix}.conv{}.b", i + 1), &[dout], 0.0)?;
            convs.push((w, b));
        }
        Ok(ProposalHead {
            cfg,
            convs: [convs[0], convs[1], convs[2]],
        })
    }

    /// `X: T×d → T×3|Ψ|`, columns `[c, l, o]` per anchor.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, d) = tape.dims2(x)?;
        if d != self.cfg.d_in {
            return Err(Error::dim(format!(
                "proposal head expects width {}, got {d}",
                self.cfg.d_in
            )));
        }
        let mut h = x;
        for (i, (w, b)) in self.convs.iter().enumerate() {
            let w = tape.param(store, *w);
            let b = tape.param(store, *b);
            h = tape.conv1d(h, w)?;
            h = tape.add_row(h, b)?;
            if i < 2 {
                h = tape.relu(h);
                h = tape.dropout(h, self.cfg.dropout_p)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalSource {
    pub modality: Modality,
    pub head: usize,
    pub position: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub center: f64,
    pub length: f64,
    pub confidence: f64,
    pub source: ProposalSource,
}

impl Proposal {
    pub fn start(&self) -> f64 {
        (self.center - 0.5 * self.length).max(0.0)
    }

    /// Not clipped to the video end.
    pub fn end(&self) -> f64 {
        self.center + 0.5 * self.length
    }

    pub fn to_segment(&self) -> PredictedSegment {
        PredictedSegment::new(self.start(), self.end(), self.confidence)
    }
}

/// `center = (p + σ(c))·cell`, `length = anchor·exp(l)·cell`, `confidence = σ(o)`.
pub fn decode_proposal(raw: [f64; 3], position: usize, anchor: f64, cell_seconds: f64) -> (f64, f64, f64) {
    let [c, l, o] = raw;
    let center = (position as f64 + sigmoid(c)) * cell_seconds;
    let length = anchor * l.clamp(-LOG_LENGTH_CLAMP, LOG_LENGTH_CLAMP).exp() * cell_seconds;
    (center, length, sigmoid(o))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    pub hidden: usize,
    pub dropout_p: f64,
    pub audio_kernels: Vec<usize>,
    pub visual_kernels: Vec<usize>,
    pub audio_anchors: Vec<f64>,
    pub visual_anchors: Vec<f64>,
    pub audio_cell_seconds: f64,
    pub visual_cell_seconds: f64,
}

impl ProposalConfig {
    pub fn anchor_set(&self, modality: Modality) -> Result<AnchorSet> {
        match modality {
            Modality::Audio => AnchorSet::new(modality, self.audio_anchors.clone(), self.audio_cell_seconds),
            Modality::Visual => AnchorSet::new(modality, self.visual_anchors.clone(), self.visual_cell_seconds),
        }
    }
}

/// Raw outputs of every head for one video, `T×3|Ψ|` each.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub audio: Vec<Var>,
    pub visual: Vec<Var>,
}

impl HeadOutputs {
    pub fn get(&self, modality: Modality) -> &[Var] {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProposalGenerator {
    pub cfg: ProposalConfig,
    pub audio_anchors: AnchorSet,
    pub visual_anchors: AnchorSet,
    pub audio_heads: Vec<ProposalHead>,
    pub visual_heads: Vec<ProposalHead>,
}

impl ProposalGenerator {
    pub fn new(
        cfg: ProposalConfig,
        d_audio: usize,
        d_visual: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let audio_anchors = cfg.anchor_set(Modality::Audio)?;
        let visual_anchors = cfg.anchor_set(Modality::Visual)?;
        if cfg.audio_kernels.is_empty() && cfg.visual_kernels.is_empty() {
            return Err(Error::config("no proposal heads configured"));
        }
        let mut build = |kernels: &[usize], d_in: usize, anchors: usize, tag: &str| {
            kernels
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let hc = ProposalHeadConfig {
                        kernel_size: k,
                        hidden: cfg.hidden,
                        d_in,
                        anchors,
                        dropout_p: cfg.dropout_p,
                    };
                    ProposalHead::new(hc, store, &format!("{prefix}.{tag}.head{i}"), rng)
                })
                .collect::<Result<Vec<_>>>()
        };
        let audio_heads = build(&cfg.audio_kernels, d_audio, audio_anchors.len(), "audio")?;
        let visual_heads = build(&cfg.visual_kernels, d_visual, visual_anchors.len(), "visual")?;
        Ok(ProposalGenerator {
            cfg,
            audio_anchors,
            visual_anchors,
            audio_heads,
            visual_heads,
        })
    }

    pub fn anchors(&self, modality: Modality) -> &AnchorSet {
        match modality {
            Modality::Audio => &self.audio_anchors,
            Modality::Visual => &self.visual_anchors,
        }
    }

    pub fn heads(&self, modality: Modality) -> &[ProposalHead] {
        match modality {
            Modality::Audio => &self.audio_heads,
            Modality::Visual => &self.visual_heads,
        }
    }

    /// Runs every head. Padded encoder rows are zeroed first so they act like the
    /// convolution's own zero padding.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, enc: &BiModalFeatures) -> Result<HeadOutputs> {
        let audio = zero_padding(tape, enc.audio, &enc.audio_mask)?;
        let visual = zero_padding(tape, enc.visual, &enc.visual_mask)?;
        let run = |tape: &mut Tape, heads: &[ProposalHead], x: Var| {
            heads
                .iter()
                .map(|h| h.forward(tape, store, x))
                .collect::<Result<Vec<_>>>()
        };
        Ok(HeadOutputs {
            audio: run(tape, &self.audio_heads, audio)?,
            visual: run(tape, &self.visual_heads, visual)?,
        })
    }

    /// Decodes every head at every unpadded position into one pool.
    pub fn decode_pool(&self, tape: &Tape, outputs: &HeadOutputs, enc: &BiModalFeatures) -> Vec<Proposal> {
        let mut pool = Vec::new();
        for (modality, mask) in [(Modality::Audio, &enc.audio_mask), (Modality::Visual, &enc.visual_mask)] {
            let anchors = self.anchors(modality);
            let a = anchors.len();
            for (head, &out) in outputs.get(modality).iter().enumerate() {
                let vals = tape.value(out);
                for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for (ai, &anchor) in anchors.anchors.iter().enumerate() {
                        let base = p * 3 * a + 3 * ai;
                        let raw = [vals[base], vals[base + 1], vals[base + 2]];
                        let (center, length, confidence) = decode_proposal(raw, p, anchor, anchors.cell_seconds);
                        pool.push(Proposal {
                            center,
                            length,
                            confidence,
                            source: ProposalSource {
                                modality,
                                head,
                                position: p,
                                anchor: ai,
                            },
                        });
                    }
                }
            }
        }
        pool
    }

    /// Top-`top_k` proposals from the common pool of both modalities.
    pub fn generate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &BiModalFeatures,
        top_k: usize,
    ) -> Result<Vec<Proposal>> {
        if top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        let outputs = self.forward(tape, store, enc)?;
        Ok(select_top(self.decode_pool(tape, &outputs, enc), top_k))
    }
}

fn zero_padding(tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let (t, d) = tape.dims2(x)?;
    if mask.len() != t {
        return Err(Error::dim(format!("{} mask entries for {t} rows", mask.len())));
    }
    let keep = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d))
        .collect();
    let keep = tape.constant(Tensor::new(vec![t, d], keep)?);
    tape.mul(x, keep)
}

/// Total order: confidence descending, then earlier center, audio before visual,
/// lower head, position and anchor indices.
pub fn rank_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.center.total_cmp(&b.center))
        .then(a.source.modality.cmp(&b.source.modality))
        .then(a.source.head.cmp(&b.source.head))
        .then(a.source.position.cmp(&b.source.position))
        .then(a.source.anchor.cmp(&b.source.anchor))
}

pub fn select_top(mut pool: Vec<Proposal>, top_k: usize) -> Vec<Proposal> {
    pool.sort_by(rank_order);
    pool.truncate(top_k);
    pool
}

/// Keeps the rows of each modality whose time span intersects `[start, end)`. If none
/// does, the row containing the segment center (clamped to the sequence) is kept.
pub fn clip_features(
    audio: &FeatureSequence,
    visual: &FeatureSequence,
    start: f64,
    end: f64,
) -> Result<(FeatureSequence, FeatureSequence)> {
    if !(start < end) {
        return Err(Error::contract(format!("zero-length segment [{start}, {end}]")));
    }
    Ok((clip_one(audio, start, end)?, clip_one(visual, start, end)?))
}

pub fn clip_rows(t: usize, cell: f64, start: f64, end: f64) -> (usize, usize) {
    let mut first = None;
    let mut last = 0;
    for i in 0..t {
        let (lo, hi) = (i as f64 * cell, (i + 1) as f64 * cell);
        if lo < end && hi > start {
            first.get_or_insert(i);
            last = i;
        }
    }
    match first {
        Some(f) => (f, last + 1),
        None => {
            let c = ((0.5 * (start + end) / cell).floor().max(0.0) as usize).min(t - 1);
            (c, c + 1)
        }
    }
}

fn clip_one(seq: &FeatureSequence, start: f64, end: f64) -> Result<FeatureSequence> {
    let (a, b) = clip_rows(seq.len(), seq.cell_seconds, start, end);
    seq.slice(a, b)
}
