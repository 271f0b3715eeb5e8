//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::path::Path;
use std::time::Instant;

use bmt_core::config::{check_balance, Config, StageOrder};
use bmt_core::data::{tokenize, Modality, SynthDataset, SynthSpec};
use bmt_core::decoder::DecoderConfig;
use bmt_core::encoder::EncoderConfig;
use bmt_core::metrics::{greedy_match, modified_precision, proposal_prf, tiou, MatchMode};
use bmt_core::model::{CaptionModel, ProposalModel, Streams};
use bmt_core::pipeline::{caption_segments, run_ablation, run_pipeline, Dataset, PipelineRun};
use bmt_core::proposals::kmeans::kmeans;
use bmt_core::proposals::{estimate_anchors, estimate_kernel_sizes, pool_size, ProposalConfig};
use bmt_core::tensor::gradcheck::random_tensor;
use bmt_core::tensor::{ParamStore, Tape};
use bmt_core::training::caption_eval_loss;
use common::*;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let cases = gradient_suite(0..20).unwrap();
    let dropout = (0..20).map(|s| dropout_gradient_error(s).unwrap()).fold(0.0, f64::max);
    let (worst, name) = cases
        .iter()
        .map(|c| (c.max_rel_error, c.name))
        .chain([(dropout, "dropout")])
        .fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-3 && secs < 120.0,
        format!(
            "{} cases x 20 seeds, worst relative error {worst:.2e} ({name}), {secs:.1}s",
            cases.len() + 1
        ),
    )
}

fn masks() -> Outcome {
    let checks = mask_suite(50).unwrap();
    let worst = checks.iter().map(|c| c.max_deviation).fold(0.0, f64::max);
    let names: Vec<_> = checks.iter().map(|c| c.name).collect();
    outcome(
        worst <= 1e-9,
        format!("50 instances, max deviation {worst:.1e} over {}", names.join(", ")),
    )
}

fn shapes() -> Outcome {
    let mut r = rng(3);
    let enc_cfg = EncoderConfig {
        layers: 2,
        d_audio: 128,
        d_visual: 1024,
        heads: 4,
        d_internal: 1024,
        dropout_p: 0.1,
        final_norm: true,
    };
    let dec_cfg = DecoderConfig {
        layers: 2,
        d_caption: 300,
        d_audio: 128,
        d_visual: 1024,
        heads: 4,
        d_internal: 1024,
        dropout_p: 0.1,
        vocab_size: 40,
        final_norm: true,
    };
    let mut store = ParamStore::new();
    let model = CaptionModel::new(enc_cfg, dec_cfg, &mut store, &mut r).unwrap();
    let (ta, tv, t) = (12, 5, 6);
    let a = random_tensor(&[ta, 128], &mut r);
    let v = random_tensor(&[tv, 1024], &mut r);
    let streams = Streams {
        audio: &a,
        visual: &v,
        audio_valid: &vec![true; ta],
        visual_valid: &vec![true; tv],
    };
    let mut tape = Tape::new();
    let enc = streams.encode(&mut tape, &store, &model.encoder).unwrap();
    let c = model
        .decoder
        .forward(&mut tape, &store, &[2, 5, 6, 7, 8, 9], &[true; 6], &enc)
        .unwrap();
    let got_enc = (tape.shape(enc.audio).to_vec(), tape.shape(enc.visual).to_vec());
    let got_dec = tape.shape(c).to_vec();

    // one head per modality keeps the full-width check quick
    let pcfg = ProposalConfig {
        hidden: 512,
        dropout_p: 0.1,
        audio_kernels: vec![5],
        visual_kernels: vec![1],
        audio_anchors: (1..=48).map(|i| i as f64).collect(),
        visual_anchors: (1..=128).map(|i| i as f64 * 0.5).collect(),
        audio_cell_seconds: 0.96,
        visual_cell_seconds: 2.56,
    };
    let mut pstore = ParamStore::new();
    let pmodel = ProposalModel::new(enc_cfg, pcfg, &mut pstore, &mut r).unwrap();
    let mut ptape = Tape::new();
    let (_, heads) = pmodel.forward(&mut ptape, &pstore, streams).unwrap();
    let head_a = ptape.shape(heads.audio[0]).to_vec();
    let head_v = ptape.shape(heads.visual[0]).to_vec();
    let pool = pool_size(800, 10, 48, 300, 10, 128);

    let pass = got_enc == (vec![ta, 128], vec![tv, 1024])
        && got_dec == vec![t, 300]
        && head_a == vec![ta, 3 * 48]
        && head_v == vec![tv, 3 * 128]
        && pool == 768_000;
    outcome(
        pass,
        format!(
            "A^v {:?}, V^a {:?}, decoder {:?}, heads {:?}/{:?} (T x 3|Psi|), pool {pool}",
            got_enc.0, got_enc.1, got_dec, head_a, head_v
        ),
    )
}

fn balance() -> Outcome {
    let full = Config::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/full.toml")).unwrap();
    let validated = full.validate().is_ok() && Config::default().validate().is_ok();
    let (a, v) = check_balance(800, 48, 300, 128, 0.0).unwrap();
    let mut broken = full.clone();
    broken.proposals.visual_anchor_count = 127;
    let rejected = broken.validate().is_err();
    outcome(
        validated && a == 38_400 && v == 38_400 && rejected,
        format!("{a} == {v}; full config validates; 300x127 rejected: {rejected}"),
    )
}

/// Shared toy run: synthetic data written to disk and read back, then cap_then_prop.
struct ToyRun {
    cfg: Config,
    dataset: Dataset,
    run: PipelineRun,
    seconds: f64,
    bytes: (String, String),
}

fn toy_run(dir: &Path) -> ToyRun {
    let cfg = toy_config();
    SynthDataset::generate(&SynthSpec::default())
        .unwrap()
        .write_to(dir)
        .unwrap();
    let dataset = Dataset::load(&dir.join("annotations.json"), &dir.join("features"), &cfg).unwrap();
    let t = Instant::now();
    let run = run_pipeline(&cfg, &dataset, &dataset, StageOrder::CapThenProp).unwrap();
    let seconds = t.elapsed().as_secs_f64();
    run.proposals.save(&dir.join("proposals.json")).unwrap();
    run.captions.save(&dir.join("captions.json")).unwrap();
    let bytes = (
        std::fs::read_to_string(dir.join("proposals.json")).unwrap(),
        std::fs::read_to_string(dir.join("captions.json")).unwrap(),
    );
    ToyRun {
        cfg,
        dataset,
        run,
        seconds,
        bytes,
    }
}

fn overfit_captions(toy: &ToyRun) -> Outcome {
    let cap = &toy.run.caption;
    let examples = toy.dataset.caption_examples(&cap.vocab).unwrap();
    let loss = caption_eval_loss(&cap.model, &cap.store, &examples, 0.0).unwrap();
    let reached = cap
        .history
        .records
        .iter()
        .find(|r| r.train_loss <= 0.05)
        .map(|r| r.steps);
    let gt = toy.dataset.gt_segments();
    let captions = caption_segments(cap, &toy.dataset.features, &gt, toy.cfg.model.max_caption_len).unwrap();
    let (mut exact, mut total) = (0, 0);
    for (id, video) in &toy.dataset.annotations.videos {
        for (seg, pred) in video.segments.iter().zip(&captions.results[id]) {
            total += 1;
            exact += usize::from(pred.sentence.as_deref() == Some(tokenize(&seg.sentence).join(" ").as_str()));
        }
    }
    let share = exact as f64 / total as f64;
    let pass = loss <= 0.05 && reached.is_some_and(|s| s <= 2000) && share >= 0.9 && toy.seconds < 600.0;
    outcome(
        pass,
        format!(
            "vocab {}, per-token loss {loss:.4} (<= 0.05 after {} steps), exact captions {exact}/{total}, pipeline {:.1}s",
            cap.vocab.len(),
            reached.map_or("-".to_string(), |s| s.to_string()),
            toy.seconds
        ),
    )
}

fn overfit_proposals(toy: &ToyRun) -> Outcome {
    let th = &toy.cfg.eval.thresholds;
    let ann = &toy.dataset.annotations;
    let any = proposal_prf(&toy.run.proposals, ann, th, MatchMode::AnyOverlap).unwrap();
    let one = proposal_prf(&toy.run.proposals, ann, th, MatchMode::OneToOne).unwrap();
    outcome(
        any.f1 >= 0.9 && toy.seconds < 600.0,
        format!(
            "top-{} F1 {:.3} (P {:.3}, R {:.3}) any-overlap; one-to-one F1 {:.3} for reference",
            toy.cfg.proposals.top_k, any.f1, any.precision, any.recall, one.f1
        ),
    )
}

fn ablation(toy: &ToyRun) -> Outcome {
    // no numeric target here, so the proposal stage trains for a quarter of the epochs
    let mut cfg = toy.cfg.clone();
    cfg.train.proposal_epochs /= 4;
    let t = Instant::now();
    let report = run_ablation(&cfg, &toy.dataset, &toy.dataset).unwrap();
    let cells: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{}: B@3 {:.3} B@4 {:.3} F1 {:.3}", r.label, r.bleu3, r.bleu4, r.f1))
        .collect();
    outcome(
        report.cells() == 9 && report.frozen_encoder_identical,
        format!(
            "{} cells, frozen encoder identical {}, {} proposal epochs; {} ({:.1}s)",
            report.cells(),
            report.frozen_encoder_identical,
            cfg.train.proposal_epochs,
            cells.join("; "),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let hand = tiou((0.0, 2.0), (1.0, 3.0)).unwrap() == 1.0 / 3.0;
    let mut r = rng(11);
    let mut agree = 0;
    for _ in 0..1000 {
        let (pred, gt) = greedy_safe_instance(&mut r);
        let th = [0.3, 0.5, 0.7, 0.9][r.random_range(0..4)];
        agree += usize::from(greedy_match(&pred, &gt, th).unwrap().len() == brute_force_matches(&pred, &gt, th));
    }
    let words = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let clipped = modified_precision(
        &words("the the the the the the the"),
        &[words("the cat is on the mat"), words("there is a cat on the mat")],
        1,
    );
    outcome(
        hand && agree == 1000 && clipped == (2, 7),
        format!(
            "tIoU([0,2],[1,3]) = 1/3: {hand}; greedy = brute force on {agree}/1000; clipped unigram precision {}/{}",
            clipped.0, clipped.1
        ),
    )
}

fn kmeans_oracle() -> Outcome {
    let mut r = rng(5);
    let (mut within, mut better, mut worse) = (0, 0, 0);
    let mut odd = true;
    for case in 0..100u64 {
        let (values, k) = kmeans_instance(&mut r);
        let oracle = lloyd_oracle(&values, k, 64, 1000 + case);
        let ours = kmeans(&values, k, case).unwrap().inertia;
        let anchors = estimate_anchors(&values, k, Modality::Audio, 1.0, case).unwrap();
        let via_anchors = oracle_inertia(&values, &anchors.anchors);
        assert!((via_anchors - ours).abs() <= 1e-9 * (1.0 + ours));
        if (ours - oracle).abs() <= 1e-6 {
            within += 1;
        } else if ours < oracle {
            better += 1;
        } else {
            worse += 1;
        }
        let ks = estimate_kernel_sizes(&values, k, [0.96, 2.56][case as usize % 2], case).unwrap();
        odd &= ks.iter().all(|k| k % 2 == 1 && *k >= 1);
    }
    outcome(
        worse == 0 && odd,
        format!("100 instances: {within} within 1e-6 of 64-restart Lloyd, {better} lower, {worse} higher; kernel sizes odd and >= 1: {odd}"),
    )
}

fn determinism(first: &ToyRun) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let second = toy_run(dir.path());
    let same = first.bytes == second.bytes;
    outcome(
        same,
        format!(
            "two seeded runs: proposals {} bytes, captions {} bytes, identical {same}",
            first.bytes.0.len(),
            first.bytes.1.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} [{}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    report(1, "gradient suite", gradients());
    report(2, "mask invariances", masks());
    report(3, "shape contract at full dims", shapes());
    report(4, "balance identity", balance());
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_run(dir.path());
    report(5, "overfit captioning", overfit_captions(&toy));
    report(6, "overfit proposals", overfit_proposals(&toy));
    report(7, "ablation harness", ablation(&toy));
    report(8, "metric oracles", metric_oracles());
    report(9, "k-means oracle", kmeans_oracle());
    report(10, "determinism", determinism(&toy));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
