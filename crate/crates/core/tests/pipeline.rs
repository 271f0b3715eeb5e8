mod common;

use bmt_core::config::StageOrder;
use bmt_core::data::{make_batch, BatchItem, SynthDataset, SynthSpec};
use bmt_core::model::ENCODER_PREFIX;
use bmt_core::pipeline::*;
use bmt_core::tensor::Tape;
use bmt_core::training::{caption_item_loss, prepare_videos, proposal_item_loss};
use bmt_core::Error;
use common::*;

#[test]
fn padding_leaves_caption_losses_unchanged() {
    let cfg = quick_config();
    let ds = toy_dataset();
    let vocab = build_vocab(&cfg, &ds.annotations).unwrap();
    let (model, store) = build_caption_model(&cfg, &vocab).unwrap();
    let examples = ds.caption_examples(&vocab).unwrap();
    let items: Vec<BatchItem> = examples[..6]
        .iter()
        .map(|e| BatchItem {
            video_id: e.video_id.clone(),
            audio: e.audio.clone(),
            visual: e.visual.clone(),
            tokens: Some(e.tokens.clone()),
        })
        .collect();
    let batched = make_batch(&items, None).unwrap();
    for (i, item) in items.iter().enumerate() {
        let alone = make_batch(std::slice::from_ref(item), None).unwrap();
        let loss = |it| {
            let mut tape = Tape::new();
            let (l, n) = caption_item_loss(&model, &store, &mut tape, it, 0.2).unwrap();
            (tape.item(l).unwrap(), n)
        };
        let (a, na) = loss(&alone.items[0]);
        let (b, nb) = loss(&batched.items[i]);
        assert_eq!(na, nb);
        assert!((a - b).abs() <= 1e-9, "item {i}: {a} vs {b}");
    }
}

#[test]
fn padding_leaves_proposal_losses_unchanged() {
    let cfg = quick_config();
    let ds = toy_dataset();
    let pcfg = resolve_proposal_config(&cfg, &ds.annotations).unwrap();
    let (model, store) = build_proposal_model(&cfg, &pcfg).unwrap();
    let examples = ds.proposal_examples().unwrap();
    let tight = prepare_videos(&model, &examples[..4], (64, 24)).unwrap();
    let loose = prepare_videos(&model, &examples[..4], (90, 40)).unwrap();
    for (a, b) in tight.iter().zip(&loose) {
        let loss = |v| {
            let mut tape = Tape::new();
            let l = proposal_item_loss(&model, &store, &mut tape, v, cfg.coefficients()).unwrap();
            tape.item(l).unwrap()
        };
        let (x, y) = (loss(a), loss(b));
        assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn cap_then_prop_keeps_the_encoder_bit_identical() {
    let cfg = quick_config();
    let ds = toy_dataset();
    let (cap, prop) = train_both(&cfg, &ds, None, StageOrder::CapThenProp).unwrap();
    assert!(prop.store.bit_identical(&cap.store, &format!("{ENCODER_PREFIX}.")));
}

#[test]
fn prop_then_cap_reuses_the_proposal_encoder() {
    let cfg = quick_config();
    let ds = toy_dataset();
    let (cap, prop) = train_both(&cfg, &ds, None, StageOrder::PropThenCap).unwrap();
    assert!(cap.store.bit_identical(&prop.store, &format!("{ENCODER_PREFIX}.")));
}

#[test]
fn separate_training_gives_independent_encoders() {
    let cfg = quick_config();
    let ds = toy_dataset();
    let (cap, prop) = train_both(&cfg, &ds, None, StageOrder::Separate).unwrap();
    assert!(!cap.store.bit_identical(&prop.store, &format!("{ENCODER_PREFIX}.")));
}

#[test]
fn checkpoints_restore_identical_outputs() {
    let cfg = quick_config();
    let ds = toy_dataset();
    let (cap, prop) = train_both(&cfg, &ds, None, StageOrder::Separate).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (cp, pp) = (dir.path().join("cap.bmtc"), dir.path().join("prop.bmtc"));
    save_caption_checkpoint(&cp, &cfg, &cap).unwrap();
    save_proposal_checkpoint(&pp, &cfg, &prop).unwrap();
    let (cfg2, cap2) = load_caption_checkpoint(&cp).unwrap();
    let (_, prop2) = load_proposal_checkpoint(&pp).unwrap();
    assert_eq!(cfg2.model, cfg.model);
    assert_eq!(cap2.vocab, cap.vocab);

    let a = propose_all(&prop, &ds.features, 5).unwrap();
    let b = propose_all(&prop2, &ds.features, 5).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let gt = ds.gt_segments();
    let x = caption_segments(&cap, &ds.features, &gt, 8).unwrap();
    let y = caption_segments(&cap2, &ds.features, &gt, 8).unwrap();
    assert_eq!(x.to_json(), y.to_json());

    let wrong = load_proposal_checkpoint(&cp).unwrap_err();
    assert!(matches!(wrong, Error::Config(_)), "{wrong}");
}

#[test]
fn dataset_roundtrips_through_disk() {
    let synth = SynthDataset::generate(&SynthSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synth.write_to(dir.path()).unwrap();
    let cfg = toy_config();
    let loaded = Dataset::load(&dir.path().join("annotations.json"), &dir.path().join("features"), &cfg).unwrap();
    assert_eq!(loaded.annotations, synth.annotations);
    assert_eq!(loaded.features.audio.len(), 20);
    let all = Features::load_dir(&dir.path().join("features"), None, &cfg).unwrap();
    assert_eq!(all, loaded.features);

    let mut other = cfg.clone();
    other.data.visual_cell_seconds = 1.0;
    let err = Dataset::load(
        &dir.path().join("annotations.json"),
        &dir.path().join("features"),
        &other,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn anchors_follow_the_training_lengths() {
    let cfg = toy_config();
    let ds = toy_dataset();
    let p = resolve_proposal_config(&cfg, &ds.annotations).unwrap();
    assert_eq!((p.audio_anchors.len(), p.visual_anchors.len()), (3, 8));
    assert_eq!((p.audio_kernels.len(), p.visual_kernels.len()), (2, 2));
    let lengths = ds.segment_lengths();
    let (lo, hi) = lengths
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    for &a in &p.audio_anchors {
        assert!(a * 0.96 >= lo - 1e-9 && a * 0.96 <= hi + 1e-9);
    }
}
