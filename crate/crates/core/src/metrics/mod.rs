//! Temporal IoU, proposal precision/recall/F1 and caption BLEU.

mod bleu;

pub use bleu::{bleu, modified_precision};

use serde::{Deserialize, Serialize};

use crate::data::{tokenize, AnnotationSet, PredictedSegment, PredictionSet};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

/// `|a∩b| / |a∪b|`, 0 when the union is empty.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(s <= e) {
            return Err(Error::contract(format!("inverted interval [{s}, {e}]")));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// How predictions are credited against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// A prediction counts if it overlaps any ground-truth segment at `≥ θ`; a
    /// ground-truth segment counts if any prediction overlaps it at `≥ θ`.
    #[default]
    AnyOverlap,
    /// Greedy one-to-one matching in descending confidence order.
    OneToOne,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any-overlap" => Ok(MatchMode::AnyOverlap),
            "one-to-one" => Ok(MatchMode::OneToOne),
            other => Err(Error::config(format!("unknown match mode {other:?}"))),
        }
    }
}

fn overlap_matrix(pred: &[(f64, f64)], gt: &[(f64, f64)]) -> Result<Vec<Vec<f64>>> {
    pred.iter().map(|p| gt.iter().map(|g| tiou(*p, *g)).collect()).collect()
}

/// Greedy one-to-one matching. Predictions are visited in the given order (callers
/// sort by confidence); each takes the free ground-truth segment with the highest
/// tIoU `≥ θ`, lowest index on ties. Returns `(prediction, ground truth)` pairs.
pub fn greedy_match(pred: &[(f64, f64)], gt: &[(f64, f64)], threshold: f64) -> Result<Vec<(usize, usize)>> {
    let m = overlap_matrix(pred, gt)?;
    let mut taken = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (i, row) in m.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (j, &v) in row.iter().enumerate() {
            if !taken[j] && v >= threshold && best.is_none_or(|b| v > row[b]) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            taken[j] = true;
            pairs.push((i, j));
        }
    }
    Ok(pairs)
}

/// `(true-positive predictions, covered ground-truth segments)` at one threshold.
pub fn count_hits(pred: &[(f64, f64)], gt: &[(f64, f64)], threshold: f64, mode: MatchMode) -> Result<(usize, usize)> {
    match mode {
        MatchMode::OneToOne => {
            let n = greedy_match(pred, gt, threshold)?.len();
            Ok((n, n))
        }
        MatchMode::AnyOverlap => {
            let m = overlap_matrix(pred, gt)?;
            let tp = m.iter().filter(|row| row.iter().any(|&v| v >= threshold)).count();
            let covered = (0..gt.len())
                .filter(|&j| m.iter().any(|row| row[j] >= threshold))
                .count();
            Ok((tp, covered))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    pub predictions: usize,
    pub ground_truth: usize,
    pub precision: f64,
    pub recall: f64,
    pub per_threshold: Vec<ThresholdScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    pub bleu3: f64,
    pub bleu4: f64,
    /// `(prediction, ground truth)` caption pairs scored, summed over thresholds.
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub match_mode: MatchMode,
    pub thresholds: Vec<f64>,
    pub averaging: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_threshold: Vec<ThresholdScores>,
    pub videos: Vec<VideoScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<BleuScores>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::config("thresholds must be a non-empty list in (0, 1]"));
    }
    Ok(())
}

fn sorted_segments(preds: &[PredictedSegment]) -> Vec<&PredictedSegment> {
    let mut order: Vec<&PredictedSegment> = preds.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    order
}

/// Precision and recall per video and threshold, averaged over thresholds and then
/// over ground-truth videos; F1 from the averaged precision and recall.
pub fn proposal_prf(
    pred: &PredictionSet,
    gt: &AnnotationSet,
    thresholds: &[f64],
    mode: MatchMode,
) -> Result<EvalReport> {
    validate_thresholds(thresholds)?;
    let mut notes = vec!["precision of a video without predictions is 0".to_string()];
    let unknown = pred.results.keys().filter(|k| !gt.videos.contains_key(*k)).count();
    if unknown > 0 {
        notes.push(format!(
            "{unknown} predicted videos are absent from the ground truth and ignored"
        ));
    }
    let mut videos = Vec::new();
    for (id, ann) in &gt.videos {
        if ann.segments.is_empty() {
            continue;
        }
        let gt_iv: Vec<(f64, f64)> = ann.segments.iter().map(|s| (s.start, s.end)).collect();
        let preds = pred.results.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let pred_iv: Vec<(f64, f64)> = sorted_segments(preds).iter().map(|p| (p.start(), p.end())).collect();
        let mut per_threshold = Vec::with_capacity(thresholds.len());
        for &th in thresholds {
            let (tp, covered) = count_hits(&pred_iv, &gt_iv, th, mode)?;
            let precision = if pred_iv.is_empty() {
                0.0
            } else {
                tp as f64 / pred_iv.len() as f64
            };
            per_threshold.push(ThresholdScores {
                threshold: th,
                precision,
                recall: covered as f64 / gt_iv.len() as f64,
            });
        }
        let nt = thresholds.len() as f64;
        videos.push(VideoScores {
            video_id: id.clone(),
            predictions: pred_iv.len(),
            ground_truth: gt_iv.len(),
            precision: per_threshold.iter().map(|s| s.precision).sum::<f64>() / nt,
            recall: per_threshold.iter().map(|s| s.recall).sum::<f64>() / nt,
            per_threshold,
        });
    }
    if videos.is_empty() {
        return Err(Error::data("ground truth has no annotated segments"));
    }
    let nv = videos.len() as f64;
    let precision = videos.iter().map(|v| v.precision).sum::<f64>() / nv;
    let recall = videos.iter().map(|v| v.recall).sum::<f64>() / nv;
    let per_threshold = (0..thresholds.len())
        .map(|i| ThresholdScores {
            threshold: thresholds[i],
            precision: videos.iter().map(|v| v.per_threshold[i].precision).sum::<f64>() / nv,
            recall: videos.iter().map(|v| v.per_threshold[i].recall).sum::<f64>() / nv,
        })
        .collect();
    Ok(EvalReport {
        match_mode: mode,
        thresholds: thresholds.to_vec(),
        averaging: "per video over thresholds, then over videos".into(),
        precision,
        recall,
        f1: f1(precision, recall),
        per_threshold,
        videos,
        bleu: None,
        notes,
    })
}

/// Corpus BLEU@3 and BLEU@4 over `(predicted caption, ground-truth caption)` pairs whose
/// segments overlap at `≥ θ`, computed per threshold and averaged over thresholds.
/// A threshold without pairs scores 0.
pub fn caption_bleu(pred: &PredictionSet, gt: &AnnotationSet, thresholds: &[f64]) -> Result<BleuScores> {
    validate_thresholds(thresholds)?;
    let mut b3 = 0.0;
    let mut b4 = 0.0;
    let mut pairs = 0;
    for &th in thresholds {
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for (id, ann) in &gt.videos {
            let Some(preds) = pred.results.get(id) else { continue };
            for p in preds {
                let Some(sentence) = &p.sentence else { continue };
                for s in &ann.segments {
                    if tiou((p.start(), p.end()), (s.start, s.end))? >= th {
                        cands.push(tokenize(sentence));
                        refs.push(vec![tokenize(&s.sentence)]);
                    }
                }
            }
        }
        pairs += cands.len();
        if !cands.is_empty() {
            b3 += bleu(&cands, &refs, 3)?;
            b4 += bleu(&cands, &refs, 4)?;
        }
    }
    let nt = thresholds.len() as f64;
    Ok(BleuScores {
        bleu3: b3 / nt,
        bleu4: b4 / nt,
        pairs,
    })
}

/// Proposal scores plus, when any prediction carries a sentence, caption BLEU.
pub fn evaluate(pred: &PredictionSet, gt: &AnnotationSet, thresholds: &[f64], mode: MatchMode) -> Result<EvalReport> {
    let mut report = proposal_prf(pred, gt, thresholds, mode)?;
    if pred.results.values().flatten().any(|p| p.sentence.is_some()) {
        report.bleu = Some(caption_bleu(pred, gt, thresholds)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EventSegment, VideoAnnotation};

    fn gt_of(segs: &[(f64, f64)]) -> AnnotationSet {
        let mut set = AnnotationSet::default();
        set.videos.insert(
            "v".into(),
            VideoAnnotation {
                duration: 100.0,
                segments: segs
                    .iter()
                    .map(|&(start, end)| EventSegment {
                        start,
                        end,
                        sentence: "a dog runs".into(),
                    })
                    .collect(),
            },
        );
        set
    }

    fn pred_of(segs: &[(f64, f64)]) -> PredictionSet {
        let mut set = PredictionSet::default();
        set.results.insert(
            "v".into(),
            segs.iter()
                .enumerate()
                .map(|(i, &(s, e))| PredictedSegment::new(s, e, 1.0 - 0.1 * i as f64))
                .collect(),
        );
        set
    }

    #[test]
    fn tiou_hand_cases() {
        assert!((tiou((0.0, 2.0), (1.0, 3.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(tiou((1.0, 4.0), (1.0, 4.0)).unwrap(), 1.0);
        assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert_eq!(tiou((1.0, 1.0), (1.0, 1.0)).unwrap(), 0.0);
        assert!(matches!(tiou((2.0, 1.0), (0.0, 1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn exact_predictions_score_one() {
        let segs = [(0.0, 5.0), (10.0, 20.0), (30.0, 31.0)];
        for mode in [MatchMode::AnyOverlap, MatchMode::OneToOne] {
            let r = proposal_prf(&pred_of(&segs), &gt_of(&segs), &DEFAULT_THRESHOLDS, mode).unwrap();
            assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn empty_predictions_score_zero() {
        let r = proposal_prf(
            &PredictionSet::default(),
            &gt_of(&[(0.0, 1.0)]),
            &DEFAULT_THRESHOLDS,
            MatchMode::OneToOne,
        )
        .unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn duplicates_count_once_only_in_one_to_one() {
        let gt = gt_of(&[(0.0, 10.0)]);
        let pred = pred_of(&[(0.0, 10.0), (0.0, 10.0)]);
        let any = proposal_prf(&pred, &gt, &[0.5], MatchMode::AnyOverlap).unwrap();
        let one = proposal_prf(&pred, &gt, &[0.5], MatchMode::OneToOne).unwrap();
        assert_eq!(any.precision, 1.0);
        assert_eq!(one.precision, 0.5);
    }

    #[test]
    fn greedy_prefers_higher_overlap() {
        let pairs = greedy_match(&[(0.0, 10.0)], &[(0.0, 6.0), (0.0, 9.0)], 0.5).unwrap();
        assert_eq!(pairs, [(0, 1)]);
    }

    #[test]
    fn bleu_on_matched_captions() {
        let gt = gt_of(&[(0.0, 10.0)]);
        let mut pred = pred_of(&[(0.0, 10.0)]);
        pred.results.get_mut("v").unwrap()[0].sentence = Some("a dog runs".into());
        let b = caption_bleu(&pred, &gt, &DEFAULT_THRESHOLDS).unwrap();
        assert!((b.bleu3 - 1.0).abs() < 1e-12);
        assert_eq!(b.bleu4, 0.0);
        assert_eq!(b.pairs, 4);
    }
}
