//! Training loops for the captioning module and the proposal generator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, BatchItem, Modality, PaddedItem, PAD};
use crate::encoder::BiModalFeatures;
use crate::error::{Error, Result};
use crate::model::{CaptionModel, ProposalModel, Streams, ENCODER_PREFIX};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::util::derive_seed;

use super::adam::{Adam, AdamConfig};
use super::loss::{caption_loss, proposal_loss, LossCoefficients};
use super::targets::{assign_targets, Assignment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopSettings {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optimiser steps after which training stops regardless of epochs.
    pub max_steps: Option<usize>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl LoopSettings {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size and epoch count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

impl History {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

fn check_finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("{what} loss is {loss}")))
    }
}

/// Shared epoch / early-stopping driver. `run_batch` performs one optimiser step on the
/// given example indices and returns the summed training loss and its weight;
/// `validate` returns the current validation loss.
fn drive(
    store: &mut ParamStore,
    n: usize,
    settings: &LoopSettings,
    mut run_batch: impl FnMut(&mut ParamStore, &[usize], u64) -> Result<(f64, f64)>,
    mut validate: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<History> {
    settings.validate()?;
    let mut adam = Adam::new(settings.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, 0x5eed));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History {
        best_val_loss: f64::INFINITY,
        ..History::default()
    };
    let mut best: Option<ParamStore> = None;
    let mut since_best = 0;
    'epochs: for epoch in 1..=settings.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight) = (0.0, 0.0);
        let mut capped = false;
        for chunk in order.chunks(settings.batch_size) {
            store.zero_grads();
            let (l, w) = run_batch(store, chunk, derive_seed(settings.seed, history.steps as u64 + 1))?;
            adam.step(store);
            loss_sum += l;
            weight += w;
            history.steps += 1;
            if settings.max_steps.is_some_and(|m| history.steps >= m) {
                capped = true;
                break;
            }
        }
        store.zero_grads();
        let val_loss = check_finite(validate(store)?, "validation")?;
        let train_loss = loss_sum / weight.max(f64::MIN_POSITIVE);
        log::info!(
            "epoch {epoch}: steps {} train {train_loss:.6} val {val_loss:.6}",
            history.steps
        );
        history.records.push(EpochRecord {
            epoch,
            steps: history.steps,
            train_loss,
            val_loss,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = Some(store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= settings.patience {
                history.stopped_early = true;
                break 'epochs;
            }
        }
        if capped {
            break;
        }
    }
    if let Some(b) = best {
        *store = b;
    }
    Ok(history)
}

/// One ground-truth clip and its caption (`<s> … </s>`).
#[derive(Debug, Clone)]
pub struct CaptionExample {
    pub video_id: String,
    pub audio: Tensor,
    pub visual: Tensor,
    pub tokens: Vec<usize>,
}

impl CaptionExample {
    fn batch_item(&self) -> BatchItem {
        BatchItem {
            video_id: self.video_id.clone(),
            audio: self.audio.clone(),
            visual: self.visual.clone(),
            tokens: Some(self.tokens.clone()),
        }
    }
}

/// Teacher-forced caption loss of one padded item, as `(mean loss, token count)`.
pub fn caption_item_loss(
    model: &CaptionModel,
    store: &ParamStore,
    tape: &mut Tape,
    item: &PaddedItem,
    gamma: f64,
) -> Result<(crate::tensor::Var, usize)> {
    let streams = Streams {
        audio: &item.audio,
        visual: &item.visual,
        audio_valid: &item.audio_mask,
        visual_valid: &item.visual_mask,
    };
    let enc = streams.encode(tape, store, &model.encoder)?;
    let l = item.tokens.len();
    if l < 2 {
        return Err(Error::data(format!("caption of {:?} has no words", item.video_id)));
    }
    let logp = model.log_probs(tape, store, &enc, &item.tokens[..l - 1], &item.token_mask[..l - 1])?;
    caption_loss(tape, logp, &item.tokens[1..], &item.token_mask[1..], gamma, Some(PAD))
}

/// Per-token caption loss over a set of examples, in eval mode.
pub fn caption_eval_loss(
    model: &CaptionModel,
    store: &ParamStore,
    examples: &[CaptionExample],
    gamma: f64,
) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for ex in examples {
        let batch = make_batch(&[ex.batch_item()], None)?;
        let mut tape = Tape::new();
        let (l, n) = caption_item_loss(model, store, &mut tape, &batch.items[0], gamma)?;
        total += tape.item(l)? * n as f64;
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Teacher-forced training with label smoothing. The loss of a batch is the mean over
/// all its non-pad target tokens. Early stopping watches `val` (the training set when
/// absent); the best parameters are restored at the end.
pub fn train_captioner(
    model: &CaptionModel,
    store: &mut ParamStore,
    train: &[CaptionExample],
    val: Option<&[CaptionExample]>,
    settings: &LoopSettings,
    gamma: f64,
) -> Result<History> {
    if train.is_empty() {
        return Err(Error::data("no captioning examples"));
    }
    let val = val.filter(|v| !v.is_empty()).unwrap_or(train);
    drive(
        store,
        train.len(),
        settings,
        |store, idx, seed| {
            let items: Vec<BatchItem> = idx.iter().map(|&i| train[i].batch_item()).collect();
            let batch = make_batch(&items, None)?;
            let total_tokens: usize = batch
                .items
                .iter()
                .map(|b| b.token_mask.iter().skip(1).filter(|&&m| m).count())
                .sum();
            let mut loss_sum = 0.0;
            for (j, item) in batch.items.iter().enumerate() {
                let mut tape = Tape::training(derive_seed(seed, j as u64));
                let (l, n) = caption_item_loss(model, store, &mut tape, item, gamma)?;
                let value = check_finite(tape.item(l)?, "caption")?;
                loss_sum += value * n as f64;
                let scaled = tape.scale(l, n as f64 / total_tokens as f64);
                tape.backward(scaled)?;
                store.accumulate_grads(&tape)?;
            }
            Ok((loss_sum, total_tokens as f64))
        },
        |store| caption_eval_loss(model, store, val, gamma),
    )
}

/// A whole video with its ground-truth segments in seconds.
#[derive(Debug, Clone)]
pub struct ProposalExample {
    pub video_id: String,
    pub audio: Tensor,
    pub visual: Tensor,
    pub segments: Vec<(f64, f64)>,
}

/// A padded video with its targets for both modalities.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub item: PaddedItem,
    pub audio_targets: Assignment,
    pub visual_targets: Assignment,
}

pub fn prepare_videos(
    model: &ProposalModel,
    examples: &[ProposalExample],
    pad_to: (usize, usize),
) -> Result<Vec<PreparedVideo>> {
    examples
        .iter()
        .map(|ex| {
            let item = BatchItem {
                video_id: ex.video_id.clone(),
                audio: ex.audio.clone(),
                visual: ex.visual.clone(),
                tokens: None,
            };
            let item = make_batch(&[item], Some(pad_to))?.items.remove(0);
            let target = |m: Modality, rows: usize, padded: usize| {
                let mut a = assign_targets(&ex.segments, model.heads.anchors(m), rows);
                a.positions = padded;
                a
            };
            Ok(PreparedVideo {
                audio_targets: target(Modality::Audio, ex.audio.shape()[0], pad_to.0),
                visual_targets: target(Modality::Visual, ex.visual.shape()[0], pad_to.1),
                item,
            })
        })
        .collect()
}

/// Encoder outputs computed once, for training heads on a frozen encoder.
#[derive(Debug, Clone)]
struct CachedEncoding {
    audio: Tensor,
    visual: Tensor,
}

fn encode_eval(model: &ProposalModel, store: &ParamStore, item: &PaddedItem) -> Result<CachedEncoding> {
    let mut tape = Tape::new();
    let enc = streams_of(item).encode(&mut tape, store, &model.encoder)?;
    Ok(CachedEncoding {
        audio: tape.tensor(enc.audio),
        visual: tape.tensor(enc.visual),
    })
}

fn streams_of(item: &PaddedItem) -> Streams<'_> {
    Streams {
        audio: &item.audio,
        visual: &item.visual,
        audio_valid: &item.audio_mask,
        visual_valid: &item.visual_mask,
    }
}

/// Proposal loss of one prepared video. With `cached` the encoder is bypassed.
fn proposal_item_loss_inner(
    model: &ProposalModel,
    store: &ParamStore,
    tape: &mut Tape,
    video: &PreparedVideo,
    cached: Option<&CachedEncoding>,
    coeffs: LossCoefficients,
) -> Result<crate::tensor::Var> {
    let enc = match cached {
        Some(c) => BiModalFeatures {
            audio: tape.constant(c.audio.clone()),
            visual: tape.constant(c.visual.clone()),
            audio_mask: video.item.audio_mask.clone(),
            visual_mask: video.item.visual_mask.clone(),
        },
        None => streams_of(&video.item).encode(tape, store, &model.encoder)?,
    };
    let out = model.heads.forward(tape, store, &enc)?;
    proposal_loss(
        tape,
        &out,
        (&video.audio_targets, &video.item.audio_mask),
        (&video.visual_targets, &video.item.visual_mask),
        coeffs,
    )
}

/// Proposal loss of one prepared video through the full model.
pub fn proposal_item_loss(
    model: &ProposalModel,
    store: &ParamStore,
    tape: &mut Tape,
    video: &PreparedVideo,
    coeffs: LossCoefficients,
) -> Result<crate::tensor::Var> {
    proposal_item_loss_inner(model, store, tape, video, None, coeffs)
}

/// Trains the proposal heads (and the encoder unless `freeze_encoder`) on whole videos
/// padded to `pad_to`. With a frozen encoder its outputs are computed once up front and
/// its parameters are checked to be bit-identical afterwards.
#[allow(clippy::too_many_arguments)]
pub fn train_proposal_generator(
    model: &ProposalModel,
    store: &mut ParamStore,
    train: &[ProposalExample],
    val: Option<&[ProposalExample]>,
    settings: &LoopSettings,
    coeffs: LossCoefficients,
    pad_to: (usize, usize),
    freeze_encoder: bool,
) -> Result<History> {
    if train.is_empty() {
        return Err(Error::data("no proposal training videos"));
    }
    coeffs.validate()?;
    let train_v = prepare_videos(model, train, pad_to)?;
    let val_v = match val.filter(|v| !v.is_empty()) {
        Some(v) => prepare_videos(model, v, pad_to)?,
        None => train_v.clone(),
    };
    let snapshot = if freeze_encoder {
        store.set_trainable(&format!("{ENCODER_PREFIX}."), false);
        Some(store.clone())
    } else {
        None
    };
    let cache = |store: &ParamStore, videos: &[PreparedVideo]| -> Result<Option<Vec<CachedEncoding>>> {
        if freeze_encoder {
            videos
                .iter()
                .map(|v| encode_eval(model, store, &v.item))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        } else {
            Ok(None)
        }
    };
    let train_cache = cache(store, &train_v)?;
    let val_cache = cache(store, &val_v)?;

    let history = drive(
        store,
        train_v.len(),
        settings,
        |store, idx, seed| {
            let mut loss_sum = 0.0;
            for (j, &i) in idx.iter().enumerate() {
                let mut tape = Tape::training(derive_seed(seed, j as u64));
                let cached = train_cache.as_ref().map(|c| &c[i]);
                let l = proposal_item_loss_inner(model, store, &mut tape, &train_v[i], cached, coeffs)?;
                loss_sum += check_finite(tape.item(l)?, "proposal")?;
                let scaled = tape.scale(l, 1.0 / idx.len() as f64);
                tape.backward(scaled)?;
                store.accumulate_grads(&tape)?;
            }
            Ok((loss_sum, idx.len() as f64))
        },
        |store| {
            let mut total = 0.0;
            for (i, v) in val_v.iter().enumerate() {
                let mut tape = Tape::new();
                let cached = val_cache.as_ref().map(|c| &c[i]);
                let l = proposal_item_loss_inner(model, store, &mut tape, v, cached, coeffs)?;
                total += tape.item(l)?;
            }
            Ok(total / val_v.len() as f64)
        },
    )?;

    if let Some(before) = snapshot {
        if !store.bit_identical(&before, &format!("{ENCODER_PREFIX}.")) {
            return Err(Error::contract("frozen encoder changed during proposal training"));
        }
    }
    Ok(history)
}
