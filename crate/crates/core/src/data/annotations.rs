//! ActivityNet-style annotation files and prediction files.

use std::collections::BTreeMap;
use std::fmt;
use std::marker::PhantomData;
use std::path::Path;

use serde::de::{DeserializeOwned, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::util::write_atomic;

/// A JSON object whose keys are kept in file order, duplicates included.
struct OrderedEntries<T>(Vec<(String, T)>);

impl<'de, T: Deserialize<'de>> Deserialize<'de> for OrderedEntries<T> {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct V<T>(PhantomData<T>);
        impl<'de, T: Deserialize<'de>> Visitor<'de> for V<T> {
            type Value = OrderedEntries<T>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object keyed by video id")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, T>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }
        de.deserialize_map(V(PhantomData))
    }
}

fn unique<T>(entries: OrderedEntries<T>, what: &str) -> Result<BTreeMap<String, T>> {
    let mut map = BTreeMap::new();
    for (k, v) in entries.0 {
        if map.contains_key(&k) {
            return Err(Error::data(format!("duplicate video id {k:?} in {what}")));
        }
        map.insert(k, v);
    }
    Ok(map)
}

fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSegment {
    pub start: f64,
    pub end: f64,
    pub sentence: String,
}

impl EventSegment {
    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VideoAnnotation {
    pub duration: f64,
    pub segments: Vec<EventSegment>,
}

#[derive(Deserialize, Serialize)]
struct RawVideo {
    duration: f64,
    timestamps: Vec<[f64; 2]>,
    sentences: Vec<String>,
}

/// Ground-truth events per video, ordered by video id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub videos: BTreeMap<String, VideoAnnotation>,
}

impl AnnotationSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw = unique(parse::<OrderedEntries<RawVideo>>(text)?, "annotations")?;
        let mut videos = BTreeMap::new();
        for (id, v) in raw {
            if v.timestamps.len() != v.sentences.len() {
                return Err(Error::data(format!(
                    "video {id:?}: {} timestamps but {} sentences",
                    v.timestamps.len(),
                    v.sentences.len()
                )));
            }
            if !(v.duration > 0.0 && v.duration.is_finite()) {
                return Err(Error::data(format!(
                    "video {id:?}: duration {} must be positive",
                    v.duration
                )));
            }
            let mut segments = Vec::with_capacity(v.sentences.len());
            for ([start, end], sentence) in v.timestamps.into_iter().zip(v.sentences) {
                if !(start.is_finite() && end.is_finite() && start >= 0.0 && start < end) {
                    return Err(Error::data(format!("video {id:?}: bad segment [{start}, {end}]")));
                }
                segments.push(EventSegment { start, end, sentence });
            }
            videos.insert(
                id,
                VideoAnnotation {
                    duration: v.duration,
                    segments,
                },
            );
        }
        Ok(AnnotationSet { videos })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let raw: BTreeMap<&str, RawVideo> = self
            .videos
            .iter()
            .map(|(id, v)| {
                let raw = RawVideo {
                    duration: v.duration,
                    timestamps: v.segments.iter().map(|s| [s.start, s.end]).collect(),
                    sentences: v.segments.iter().map(|s| s.sentence.clone()).collect(),
                };
                (id.as_str(), raw)
            })
            .collect();
        serde_json::to_string_pretty(&raw).expect("annotations serialize")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.videos
            .values()
            .flat_map(|v| v.segments.iter().map(|s| s.sentence.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedSegment {
    pub segment: [f64; 2],
    #[serde(default = "default_score")]
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence: Option<String>,
}

fn default_score() -> f64 {
    1.0
}

impl PredictedSegment {
    pub fn new(start: f64, end: f64, score: f64) -> Self {
        PredictedSegment {
            segment: [start, end],
            score,
            sentence: None,
        }
    }

    pub fn start(&self) -> f64 {
        self.segment[0]
    }

    pub fn end(&self) -> f64 {
        self.segment[1]
    }
}

#[derive(Deserialize)]
struct RawPredictions {
    results: OrderedEntries<Vec<PredictedSegment>>,
}

#[derive(Serialize)]
struct RawPredictionsOut<'a> {
    version: &'static str,
    results: &'a BTreeMap<String, Vec<PredictedSegment>>,
}

/// Predicted segments (optionally captioned) per video.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub results: BTreeMap<String, Vec<PredictedSegment>>,
}

impl PredictionSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawPredictions = parse(text)?;
        let results = unique(raw.results, "predictions")?;
        for (id, preds) in &results {
            for p in preds {
                let [s, e] = p.segment;
                if !(s.is_finite() && e.is_finite() && s <= e) {
                    return Err(Error::data(format!("video {id:?}: bad predicted segment [{s}, {e}]")));
                }
                if !p.score.is_finite() {
                    return Err(Error::data(format!("video {id:?}: non-finite score")));
                }
            }
        }
        Ok(PredictionSet { results })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let raw = RawPredictionsOut {
            version: "1.0",
            results: &self.results,
        };
        serde_json::to_string_pretty(&raw).expect("predictions serialize")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "v_b": {"duration": 20.0, "timestamps": [[0.5, 4.0]], "sentences": ["A man runs."]},
        "v_a": {"duration": 10.0, "timestamps": [[1.0, 2.0], [3.0, 9.5]], "sentences": ["one", "two"]}
    }"#;

    #[test]
    fn parses_and_roundtrips() {
        let set = AnnotationSet::from_json(SAMPLE).unwrap();
        assert_eq!(set.videos.keys().collect::<Vec<_>>(), ["v_a", "v_b"]);
        assert_eq!(set.videos["v_a"].segments[1].end, 9.5);
        assert_eq!(AnnotationSet::from_json(&set.to_json()).unwrap(), set);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dup = r#"{"x": {"duration": 1, "timestamps": [], "sentences": []},
                      "x": {"duration": 2, "timestamps": [], "sentences": []}}"#;
        let err = AnnotationSet::from_json(dup).unwrap_err();
        assert!(err.to_string().contains("duplicate video id \"x\""), "{err}");
        let dup = r#"{"results": {"x": [], "x": []}}"#;
        assert!(matches!(PredictionSet::from_json(dup), Err(Error::Data(_))));
    }

    #[test]
    fn reversed_segments_are_rejected() {
        let bad = r#"{"x": {"duration": 5, "timestamps": [[3, 1]], "sentences": ["s"]}}"#;
        assert!(matches!(AnnotationSet::from_json(bad), Err(Error::Data(_))));
        let bad = r#"{"results": {"x": [{"segment": [3, 1], "score": 0.5}]}}"#;
        assert!(matches!(PredictionSet::from_json(bad), Err(Error::Data(_))));
        let mismatch = r#"{"x": {"duration": 5, "timestamps": [[0, 1]], "sentences": []}}"#;
        assert!(matches!(AnnotationSet::from_json(mismatch), Err(Error::Data(_))));
    }

    #[test]
    fn predictions_roundtrip_without_empty_sentences() {
        let mut set = PredictionSet::default();
        set.results
            .insert("v".into(), vec![PredictedSegment::new(0.0, 1.5, 0.25)]);
        let json = set.to_json();
        assert!(!json.contains("sentence"));
        assert_eq!(PredictionSet::from_json(&json).unwrap(), set);
    }
}
