//! Feature and annotation ingestion, vocabulary, batching and synthetic data.

mod annotations;
mod batch;
mod features;
pub mod synth;

pub use synth::{feature_path, SynthDataset, SynthSpec};
mod vocab;

pub use annotations::{AnnotationSet, EventSegment, PredictedSegment, PredictionSet, VideoAnnotation};
pub use batch::{make_batch, BatchItem, PaddedBatch, PaddedItem};
pub use features::{load_features, read_features, save_features, write_features, FeatureSequence, Modality};
pub use vocab::{load_word_vectors, tokenize, Vocabulary, END, PAD, START, UNK};
