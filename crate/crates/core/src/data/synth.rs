//! Synthetic bi-modal videos with planted events.
//!
//! Every event carries one audio motif and one visual motif. Feature rows inside an
//! event add the motif vector scaled by the fraction of the row the event covers, so
//! boundaries are recoverable below the cell resolution. The caption is a template
//! over the motif pair.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::derive_seed;

use super::annotations::{AnnotationSet, EventSegment, VideoAnnotation};
use super::features::{load_features, save_features, FeatureSequence, Modality};

const VISUAL_PHRASES: [&str; 12] = [
    "a man runs",
    "a woman dances",
    "a dog jumps",
    "a child swims",
    "a car drives",
    "a bird flies",
    "a boy climbs",
    "a girl paints",
    "a cat sleeps",
    "a horse walks",
    "a chef cooks",
    "a player kicks",
];

const AUDIO_PHRASES: [&str; 12] = [
    "music plays",
    "a crowd cheers",
    "a bell rings",
    "water splashes",
    "an engine roars",
    "people talk",
    "a drum beats",
    "wind blows",
    "a phone buzzes",
    "glass breaks",
    "a baby laughs",
    "rain falls",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    /// Distinct motifs per modality (at most 12).
    pub motifs: usize,
    pub events_per_video: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub min_event: f64,
    pub max_event: f64,
    /// Minimum silence between consecutive events, seconds.
    pub min_gap: f64,
    pub audio_cell_seconds: f64,
    pub visual_cell_seconds: f64,
    /// Scale of the motif vectors.
    pub pattern_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_videos: 20,
            d_audio: 16,
            d_visual: 24,
            motifs: 6,
            events_per_video: 3,
            min_duration: 48.0,
            max_duration: 60.0,
            min_event: 4.0,
            max_event: 12.0,
            min_gap: 3.0,
            audio_cell_seconds: 0.96,
            visual_cell_seconds: 2.56,
            pattern_strength: 1.0,
            noise_std: 0.3,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.num_videos == 0 || self.d_audio == 0 || self.d_visual == 0 || self.events_per_video == 0 {
            return bad("synthetic dataset needs videos, events and non-zero widths".into());
        }
        if self.motifs == 0 || self.motifs > VISUAL_PHRASES.len() {
            return bad(format!("motifs must be in 1..={}", VISUAL_PHRASES.len()));
        }
        if !(0.0 < self.min_event && self.min_event <= self.max_event) {
            return bad("event length range is empty".into());
        }
        if !(self.min_duration <= self.max_duration) {
            return bad("duration range is empty".into());
        }
        let needed = self.events_per_video as f64 * self.max_event + (self.events_per_video + 1) as f64 * self.min_gap;
        if self.min_duration < needed {
            return bad(format!(
                "min_duration {} cannot hold the events (needs {needed})",
                self.min_duration
            ));
        }
        if !(self.audio_cell_seconds > 0.0 && self.visual_cell_seconds > 0.0) {
            return bad("cell spans must be positive".into());
        }
        Ok(())
    }

    /// Longest possible feature sequences, `(audio, visual)`.
    pub fn max_rows(&self) -> (usize, usize) {
        (
            rows_for(self.max_duration, self.audio_cell_seconds),
            rows_for(self.max_duration, self.visual_cell_seconds),
        )
    }
}

fn rows_for(duration: f64, cell: f64) -> usize {
    ((duration / cell).floor() as usize).max(1)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn caption_for(visual_motif: usize, audio_motif: usize) -> String {
    format!("{} while {}", VISUAL_PHRASES[visual_motif], AUDIO_PHRASES[audio_motif])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub annotations: AnnotationSet,
    pub audio: BTreeMap<String, FeatureSequence>,
    pub visual: BTreeMap<String, FeatureSequence>,
}

pub fn feature_path(dir: &Path, video_id: &str, modality: Modality) -> PathBuf {
    dir.join(format!("{video_id}.{modality}.bmtf"))
}

impl SynthDataset {
    pub fn generate(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut motif_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
        let audio_motifs = motif_bank(spec.motifs, spec.d_audio, spec.pattern_strength, &mut motif_rng);
        let visual_motifs = motif_bank(spec.motifs, spec.d_visual, spec.pattern_strength, &mut motif_rng);

        let mut annotations = AnnotationSet::default();
        let mut audio = BTreeMap::new();
        let mut visual = BTreeMap::new();
        for v in 0..spec.num_videos {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 100 + v as u64));
            let id = format!("v_synth{v:03}");
            let duration = round2(rng.random_range(spec.min_duration..=spec.max_duration));
            let (segments, pairs) = place_events(spec, duration, &mut rng);

            let a = render(
                spec,
                Modality::Audio,
                duration,
                &segments,
                &pairs,
                &audio_motifs,
                &mut rng,
            )?;
            let vis = render(
                spec,
                Modality::Visual,
                duration,
                &segments,
                &pairs,
                &visual_motifs,
                &mut rng,
            )?;
            annotations
                .videos
                .insert(id.clone(), VideoAnnotation { duration, segments });
            audio.insert(id.clone(), a);
            visual.insert(id, vis);
        }
        Ok(SynthDataset {
            spec: spec.clone(),
            annotations,
            audio,
            visual,
        })
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.annotations.videos.keys().map(String::as_str)
    }

    /// Writes `annotations.json`, `spec.json` and `features/<id>.<modality>.bmtf`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let features = dir.join("features");
        for (id, seq) in self.audio.iter().chain(&self.visual) {
            save_features(&feature_path(&features, id, seq.modality), seq)?;
        }
        self.annotations.save(&dir.join("annotations.json"))?;
        let spec = serde_json::to_string_pretty(&self.spec)?;
        crate::util::write_atomic(&dir.join("spec.json"), spec.as_bytes())
    }

    pub fn read_from(dir: &Path) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("spec.json"))?)?;
        let annotations = AnnotationSet::load(&dir.join("annotations.json"))?;
        let features = dir.join("features");
        let mut audio = BTreeMap::new();
        let mut visual = BTreeMap::new();
        for id in annotations.videos.keys() {
            audio.insert(
                id.clone(),
                load_features(&feature_path(&features, id, Modality::Audio), Some(spec.d_audio))?,
            );
            visual.insert(
                id.clone(),
                load_features(&feature_path(&features, id, Modality::Visual), Some(spec.d_visual))?,
            );
        }
        Ok(SynthDataset {
            spec,
            annotations,
            audio,
            visual,
        })
    }
}

fn motif_bank(n: usize, d: usize, strength: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // a shared "something happens" direction plus a motif-specific one
    let shared: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let own: f64 = StandardNormal.sample(rng);
                    strength * (shared[j] + own) / std::f64::consts::SQRT_2
                })
                .collect()
        })
        .collect()
}

/// Non-overlapping events separated by at least `min_gap`, times rounded to 0.01 s.
fn place_events(spec: &SynthSpec, duration: f64, rng: &mut ChaCha8Rng) -> (Vec<EventSegment>, Vec<(usize, usize)>) {
    let n = spec.events_per_video;
    let lengths: Vec<f64> = (0..n)
        .map(|_| round2(rng.random_range(spec.min_event..=spec.max_event)))
        .collect();
    let slack = (duration - lengths.iter().sum::<f64>() - (n + 1) as f64 * spec.min_gap).max(0.0);
    let mut weights: Vec<f64> = (0..=n).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = weights.iter().sum::<f64>().max(1e-12);
    weights.iter_mut().for_each(|w| *w *= slack / total);

    let mut segments = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    let mut t = 0.0;
    for (i, len) in lengths.iter().enumerate() {
        t += spec.min_gap + weights[i];
        let start = round2(t);
        let end = round2(start + len).min(duration);
        let vm = rng.random_range(0..spec.motifs);
        let am = rng.random_range(0..spec.motifs);
        segments.push(EventSegment {
            start,
            end,
            sentence: caption_for(vm, am),
        });
        pairs.push((am, vm));
        t = end;
    }
    (segments, pairs)
}

fn render(
    spec: &SynthSpec,
    modality: Modality,
    duration: f64,
    segments: &[EventSegment],
    pairs: &[(usize, usize)],
    motifs: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<FeatureSequence> {
    let (cell, d) = match modality {
        Modality::Audio => (spec.audio_cell_seconds, spec.d_audio),
        Modality::Visual => (spec.visual_cell_seconds, spec.d_visual),
    };
    let t = rows_for(duration, cell);
    let mut data = Vec::with_capacity(t * d);
    for i in 0..t {
        let (lo, hi) = (i as f64 * cell, (i + 1) as f64 * cell);
        let mut row: Vec<f64> = (0..d)
            .map(|_| spec.noise_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        for (seg, &(am, vm)) in segments.iter().zip(pairs) {
            let cover = (hi.min(seg.end) - lo.max(seg.start)).max(0.0) / cell;
            if cover > 0.0 {
                let m = match modality {
                    Modality::Audio => &motifs[am],
                    Modality::Visual => &motifs[vm],
                };
                row.iter_mut().zip(m).for_each(|(x, mv)| *x += cover * mv);
            }
        }
        data.extend(row);
    }
    FeatureSequence::new(modality, Tensor::new(vec![t, d], data)?, cell)
}

/// Fraction of each row covered by any event.
pub fn row_coverage(seq: &FeatureSequence, segments: &[EventSegment]) -> Vec<f64> {
    (0..seq.len())
        .map(|i| {
            let (lo, hi) = seq.row_span(i);
            segments
                .iter()
                .map(|s| (hi.min(s.end) - lo.max(s.start)).max(0.0))
                .sum::<f64>()
                / seq.cell_seconds
        })
        .collect()
}

/// Training accuracy of a logistic-regression probe (one per modality) separating rows
/// fully inside an event from rows fully outside all events. Partially covered rows are
/// left out.
pub fn probe_accuracy(ds: &SynthDataset) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for streams in [&ds.audio, &ds.visual] {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (id, seq) in streams {
            let cov = row_coverage(seq, &ds.annotations.videos[id].segments);
            for (i, c) in cov.iter().enumerate() {
                if *c >= 1.0 - 1e-9 || *c <= 1e-9 {
                    xs.push(seq.features.row(i).to_vec());
                    ys.push(if *c > 0.5 { 1.0 } else { 0.0 });
                }
            }
        }
        let (w, b) = fit_logistic(&xs, &ys, 500, 0.5);
        for (x, y) in xs.iter().zip(&ys) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            correct += usize::from((z > 0.0) == (*y > 0.5));
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

fn fit_logistic(xs: &[Vec<f64>], ys: &[f64], iters: usize, lr: f64) -> (Vec<f64>, f64) {
    let d = xs.first().map_or(0, Vec::len);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let n = xs.len().max(1) as f64;
    for _ in 0..iters {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = crate::tensor::kernels::sigmoid(z) - y;
            gw.iter_mut().zip(x).for_each(|(g, xi)| *g += err * xi);
            gb += err;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= lr * g / n);
        b -= lr * gb / n;
    }
    (w, b)
}
