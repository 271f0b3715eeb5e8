//! Shared fixtures, independent oracles and the gradient / mask suites.
#![allow(dead_code)]

use std::sync::Arc;

use bmt_core::attention::{AttentionMask, MultiHeadAttention, MultiHeadConfig};
use bmt_core::data::Modality;
use bmt_core::decoder::{DecoderConfig, DecoderLayer};
use bmt_core::encoder::{BiModalEncoder, BiModalFeatures, EncoderConfig, EncoderLayer};
use bmt_core::layers::{FeedForward, LayerNorm, Linear};
use bmt_core::model::CaptionModel;
use bmt_core::proposals::{AnchorSet, ProposalConfig, ProposalHead, ProposalHeadConfig};
use bmt_core::tensor::gradcheck::{check_gradients, random_tensor, DEFAULT_STEP};
use bmt_core::tensor::{ParamStore, Tape, Tensor, Var};
use bmt_core::training::{assign_targets, caption_loss, proposal_loss, LossCoefficients};
use bmt_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy_encoder(final_norm: bool) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        d_audio: 4,
        d_visual: 6,
        heads: 2,
        d_internal: 4,
        dropout_p: 0.0,
        final_norm,
    }
}

pub fn toy_decoder(vocab: usize) -> DecoderConfig {
    DecoderConfig {
        layers: 2,
        d_caption: 8,
        d_audio: 4,
        d_visual: 6,
        heads: 2,
        d_internal: 4,
        dropout_p: 0.0,
        vocab_size: vocab,
        final_norm: true,
    }
}

pub fn toy_proposals() -> ProposalConfig {
    ProposalConfig {
        hidden: 5,
        dropout_p: 0.0,
        audio_kernels: vec![3],
        visual_kernels: vec![1, 3],
        audio_anchors: vec![2.0, 4.0],
        visual_anchors: vec![1.0, 2.0, 3.0],
        audio_cell_seconds: 1.0,
        visual_cell_seconds: 2.0,
    }
}

/// Random weights so that a matrix output reduces to a scalar without symmetric cancellation.
pub fn project(tape: &mut Tape, x: Var, rng: &mut impl Rng) -> Result<Var> {
    let n = tape.value(x).len();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.weighted_sum(x, Arc::new(w))
}

pub fn random_mask(t: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..t).map(|_| rng.random_bool(0.7)).collect();
    let keep = rng.random_range(0..t);
    m[keep] = true;
    m
}

// ---------------------------------------------------------------------------
// gradient suite

pub struct GradCase {
    pub name: &'static str,
    pub max_rel_error: f64,
}

type CaseFn = fn(u64) -> Result<f64>;

fn op_case(
    seed: u64,
    shapes: &[&[usize]],
    positive: bool,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut r = rng(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let mut t = random_tensor(s, &mut r);
            if positive {
                t.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.5);
            }
            t
        })
        .collect();
    let proj_seed = seed ^ 0xabcd;
    let store = ParamStore::new();
    let report = check_gradients(&store, &inputs, 200, seed, DEFAULT_STEP, |tape, _, vars| {
        let y = f(tape, vars)?;
        project(tape, y, &mut rng(proj_seed))
    })?;
    Ok(report.rel_error)
}

fn layer_case(
    seed: u64,
    shapes: &[&[usize]],
    build: impl Fn(&mut ParamStore, &mut ChaCha8Rng) -> Result<Box<dyn Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>>>,
) -> Result<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let f = build(&mut store, &mut r)?;
    // non-trivial gains and biases everywhere
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x += r.random_range(-0.2..0.2);
        }
    }
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut r)).collect();
    let proj_seed = seed ^ 0x1234;
    let report = check_gradients(&store, &inputs, 150, seed, DEFAULT_STEP, |tape, store, vars| {
        let y = f(tape, store, vars)?;
        project(tape, y, &mut rng(proj_seed))
    })?;
    Ok(report.rel_error)
}

fn g_matmul(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 4], &[4, 2]], false, |t, v| t.matmul(v[0], v[1]))
}
fn g_transpose(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 4]], false, |t, v| t.transpose(v[0]))
}
fn g_add_sub_mul(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 4], &[3, 4], &[3, 4]], false, |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.sub(a, v[2])?;
        t.mul(b, v[0])
    })
}
fn g_scale_offset(s: u64) -> Result<f64> {
    op_case(s, &[&[2, 3]], false, |t, v| {
        let a = t.scale(v[0], -1.7);
        Ok(t.offset(a, 0.3))
    })
}
fn g_add_row(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 4], &[4]], false, |t, v| t.add_row(v[0], v[1]))
}
fn g_relu(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 4]], false, |t, v| Ok(t.relu(v[0])))
}
fn g_sigmoid_exp(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 4]], false, |t, v| {
        let a = t.sigmoid(v[0]);
        let b = t.exp(v[0]);
        t.mul(a, b)
    })
}
fn g_ln(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 4]], true, |t, v| Ok(t.ln(v[0])))
}
fn g_softmax(s: u64) -> Result<f64> {
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    op_case(s, &[&[3, 4]], false, move |t, v| t.softmax_rows(v[0], Some(&mask)))
}
fn g_log_softmax(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 5]], false, |t, v| t.log_softmax_rows(v[0]))
}
fn g_layer_norm(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 5], &[5], &[5]], false, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-6)
    })
}
fn g_conv1d(s: u64) -> Result<f64> {
    op_case(s, &[&[6, 3], &[3, 3, 2]], false, |t, v| t.conv1d(v[0], v[1]))
}
fn g_slice_concat_reshape(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 5], &[3, 2]], false, |t, v| {
        let a = t.slice_cols(v[0], 1, 3)?;
        let c = t.concat_cols(&[a, v[1]])?;
        t.reshape(c, &[5, 3])
    })
}
fn g_gather(s: u64) -> Result<f64> {
    op_case(s, &[&[5, 3]], false, |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]))
}
fn g_sum_mean(s: u64) -> Result<f64> {
    op_case(s, &[&[3, 4]], false, |t, v| {
        let a = t.sum(v[0]);
        let sq = t.mul(v[0], v[0])?;
        let b = t.mean(sq);
        t.mul(a, b)
    })
}
fn g_bce(s: u64) -> Result<f64> {
    let target: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    op_case(s, &[&[3, 4]], false, move |t, v| {
        t.bce_with_logits(v[0], Arc::new(target.clone()))
    })
}
fn g_linear(s: u64) -> Result<f64> {
    layer_case(s, &[&[3, 4]], |store, r| {
        let l = Linear::new(store, "lin", 4, 3, r)?;
        Ok(Box::new(move |t, st, v| l.forward(t, st, v[0])))
    })
}
fn g_layer_norm_layer(s: u64) -> Result<f64> {
    layer_case(s, &[&[3, 4]], |store, _| {
        let l = LayerNorm::new(store, "ln", 4)?;
        Ok(Box::new(move |t, st, v| l.forward(t, st, v[0])))
    })
}
fn g_feed_forward(s: u64) -> Result<f64> {
    layer_case(s, &[&[3, 4]], |store, r| {
        let l = FeedForward::new(store, "ff", 4, 0.0, r)?;
        Ok(Box::new(move |t, st, v| l.forward(t, st, v[0])))
    })
}
fn g_attention(s: u64) -> Result<f64> {
    layer_case(s, &[&[3, 4], &[5, 6]], |store, r| {
        let att = MultiHeadAttention::new(MultiHeadConfig::new(2, 4, 6, 0.0).with_internal(4), store, "att", r)?;
        let mask = AttentionMask::padding(3, &[true, false, true, true, false]);
        Ok(Box::new(move |t, st, v| {
            att.forward(t, st, v[0], v[1], v[1], Some(&mask))
        }))
    })
}
fn g_encoder_layer(s: u64) -> Result<f64> {
    layer_case(s, &[&[4, 4], &[3, 6]], |store, r| {
        let layer = EncoderLayer::new(&toy_encoder(false), store, "enc", r)?;
        Ok(Box::new(move |t, st, v| {
            let (a, b) = layer.forward(t, st, v[0], v[1], &[true, true, true, false], &[true, false, true])?;
            let a = t_rows(t, a, 0..3)?;
            let b = t_rows(t, b, 0..3)?;
            t.concat_cols(&[a, b])
        }))
    })
}
fn g_decoder_layer(s: u64) -> Result<f64> {
    layer_case(s, &[&[3, 8], &[4, 4], &[2, 6]], |store, r| {
        let layer = DecoderLayer::new(&toy_decoder(10), store, "dec", r)?;
        Ok(Box::new(move |t, st, v| {
            let enc = BiModalFeatures {
                audio: v[1],
                visual: v[2],
                audio_mask: vec![true, true, false, true],
                visual_mask: vec![true, true],
            };
            layer.forward(t, st, v[0], &AttentionMask::causal(3), &enc)
        }))
    })
}
fn g_proposal_head(s: u64) -> Result<f64> {
    layer_case(s, &[&[6, 4]], |store, r| {
        let cfg = ProposalHeadConfig {
            kernel_size: 3,
            hidden: 5,
            d_in: 4,
            anchors: 2,
            dropout_p: 0.0,
        };
        let head = ProposalHead::new(cfg, store, "head", r)?;
        Ok(Box::new(move |t, st, v| head.forward(t, st, v[0])))
    })
}
fn g_caption_loss(s: u64) -> Result<f64> {
    layer_case(s, &[&[4, 4], &[3, 6]], |store, r| {
        let model = CaptionModel::new(toy_encoder(true), toy_decoder(9), store, r)?;
        Ok(Box::new(move |t, st, v| {
            let enc = model
                .encoder
                .forward(t, st, v[0], v[1], &[true; 4], &[true, true, false])?;
            let lp = model.log_probs(t, st, &enc, &[2, 5, 6, 1], &[true, true, true, false])?;
            Ok(caption_loss(t, lp, &[5, 6, 3, 1], &[true, true, true, false], 0.3, Some(1))?.0)
        }))
    })
}
fn g_proposal_loss(s: u64) -> Result<f64> {
    layer_case(s, &[&[6, 4], &[4, 6]], |store, r| {
        let cfg = toy_proposals();
        let model = bmt_core::model::ProposalModel::new(toy_encoder(true), cfg.clone(), store, r)?;
        let aa = assign_targets(&[(0.5, 2.7), (3.0, 5.5)], &cfg.anchor_set(Modality::Audio)?, 6);
        let av = assign_targets(&[(0.5, 2.7), (3.0, 5.5)], &cfg.anchor_set(Modality::Visual)?, 4);
        Ok(Box::new(move |t, st, v| {
            let valid_a = [true, true, true, true, true, false];
            let valid_v = [true, true, true, false];
            let enc = model.encoder.forward(t, st, v[0], v[1], &valid_a, &valid_v)?;
            let out = model.heads.forward(t, st, &enc)?;
            proposal_loss(
                t,
                &out,
                (&aa, &valid_a),
                (&av, &valid_v),
                LossCoefficients {
                    loc: 1.0,
                    obj: 1.0,
                    noobj: 3.0,
                },
            )
        }))
    })
}

fn t_rows(t: &mut Tape, x: Var, rows: std::ops::Range<usize>) -> Result<Var> {
    // a selection matmul keeps the gradient path
    let n = rows.len();
    let (m, _) = t.dims2(x)?;
    let mut sel = vec![0.0; n * m];
    for (i, r) in rows.enumerate() {
        sel[i * m + r] = 1.0;
    }
    let s = t.constant(Tensor::new(vec![n, m], sel)?);
    t.matmul(s, x)
}

pub const GRAD_CASES: &[(&str, CaseFn)] = &[
    ("matmul", g_matmul),
    ("transpose", g_transpose),
    ("add/sub/mul", g_add_sub_mul),
    ("scale/offset", g_scale_offset),
    ("add_row", g_add_row),
    ("relu", g_relu),
    ("sigmoid/exp", g_sigmoid_exp),
    ("ln", g_ln),
    ("masked softmax", g_softmax),
    ("log_softmax", g_log_softmax),
    ("layer_norm op", g_layer_norm),
    ("conv1d", g_conv1d),
    ("slice/concat/reshape", g_slice_concat_reshape),
    ("gather_rows", g_gather),
    ("sum/mean", g_sum_mean),
    ("bce_with_logits", g_bce),
    ("linear", g_linear),
    ("layer norm", g_layer_norm_layer),
    ("feed-forward", g_feed_forward),
    ("multi-head attention", g_attention),
    ("encoder layer", g_encoder_layer),
    ("decoder layer", g_decoder_layer),
    ("proposal head", g_proposal_head),
    ("caption loss through the model", g_caption_loss),
    ("proposal loss through the model", g_proposal_loss),
];

/// Worst relative error of every case over `seeds`.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Result<Vec<GradCase>> {
    GRAD_CASES
        .iter()
        .map(|(name, f)| {
            let mut worst = 0.0f64;
            for s in seeds.clone() {
                worst = worst.max(f(s)?);
            }
            Ok(GradCase {
                name,
                max_rel_error: worst,
            })
        })
        .collect()
}

/// Dropout on a training tape: same seed, same mask, so central differences apply.
pub fn dropout_gradient_error(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let x = random_tensor(&[4, 5], &mut r).with_grad(true);
    let w: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let eval = |x: &Tensor, backward: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::training(seed);
        let v = tape.leaf(x);
        let d = tape.dropout(v, 0.4)?;
        let out = tape.weighted_sum(d, Arc::new(w.clone()))?;
        let val = tape.item(out)?;
        if backward {
            tape.backward(out)?;
            return Ok((val, tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()));
        }
        Ok((val, Vec::new()))
    };
    let (_, analytic) = eval(&x, true)?;
    let (mut diff2, mut norm2) = (0.0, 0.0f64);
    for i in 0..x.len() {
        let mut hi = x.clone();
        hi.data_mut()[i] += DEFAULT_STEP;
        let mut lo = x.clone();
        lo.data_mut()[i] -= DEFAULT_STEP;
        let numeric = (eval(&hi, false)?.0 - eval(&lo, false)?.0) / (2.0 * DEFAULT_STEP);
        diff2 += (numeric - analytic[i]).powi(2);
        norm2 = norm2.max(numeric * numeric).max(analytic[i] * analytic[i]);
    }
    Ok(if norm2 == 0.0 {
        0.0
    } else {
        diff2.sqrt() / (norm2.sqrt() * (x.len() as f64).sqrt())
    })
}

// ---------------------------------------------------------------------------
// mask suite

pub struct MaskCheck {
    pub name: &'static str,
    pub max_deviation: f64,
}

fn perturb_masked(t: &Tensor, valid: &[bool], rng: &mut impl Rng) -> Tensor {
    let mut out = t.clone();
    let d = t.shape()[1];
    for (r, _) in valid.iter().enumerate().filter(|(_, &v)| !v) {
        for x in &mut out.data_mut()[r * d..(r + 1) * d] {
            *x = rng.random_range(-50.0..50.0);
        }
    }
    out
}

fn valid_rows_diff(a: &[f64], b: &[f64], d: usize, valid: &[bool]) -> f64 {
    valid
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .flat_map(|(r, _)| (r * d..(r + 1) * d).map(move |i| (a[i] - b[i]).abs()))
        .fold(0.0, f64::max)
}

fn encode(
    enc: &BiModalEncoder,
    store: &ParamStore,
    a: &Tensor,
    v: &Tensor,
    ma: &[bool],
    mv: &[bool],
) -> Result<(Tape, BiModalFeatures)> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let vv = tape.constant(v.clone());
    let f = enc.forward(&mut tape, store, av, vv, ma, mv)?;
    Ok((tape, f))
}

/// Padding and causal perturbation tests over `instances` random cases.
pub fn mask_suite(instances: u64) -> Result<Vec<MaskCheck>> {
    let mut enc_pad = 0.0f64;
    let mut dec_pad = 0.0f64;
    let mut dec_causal = 0.0f64;
    let mut dec_token_pad = 0.0f64;
    let mut head_pad = 0.0f64;
    for seed in 0..instances {
        let mut r = rng(1000 + seed);
        let mut store = ParamStore::new();
        let model = CaptionModel::new(toy_encoder(true), toy_decoder(12), &mut store, &mut r)?;
        let mut pstore = ParamStore::new();
        let pmodel = bmt_core::model::ProposalModel::new(toy_encoder(true), toy_proposals(), &mut pstore, &mut r)?;

        let (ta, tv) = (r.random_range(2..9), r.random_range(2..7));
        let a = random_tensor(&[ta, 4], &mut r);
        let v = random_tensor(&[tv, 6], &mut r);
        let (ma, mv) = (random_mask(ta, &mut r), random_mask(tv, &mut r));
        let (a2, v2) = (perturb_masked(&a, &ma, &mut r), perturb_masked(&v, &mv, &mut r));

        let (t1, f1) = encode(&model.encoder, &store, &a, &v, &ma, &mv)?;
        let (t2, f2) = encode(&model.encoder, &store, &a2, &v2, &ma, &mv)?;
        enc_pad = enc_pad
            .max(valid_rows_diff(t1.value(f1.audio), t2.value(f2.audio), 4, &ma))
            .max(valid_rows_diff(t1.value(f1.visual), t2.value(f2.visual), 6, &mv));

        // decoder output over perturbed padded encoder rows
        let len = r.random_range(2..7);
        let tokens: Vec<usize> = std::iter::once(2)
            .chain((1..len).map(|_| r.random_range(4..12)))
            .collect();
        let tv_mask = vec![true; len];
        let dec_out = |tape: &mut Tape, f: &BiModalFeatures, tokens: &[usize], valid: &[bool]| -> Result<Vec<f64>> {
            let c = model.log_probs(tape, &store, f, tokens, valid)?;
            Ok(tape.value(c).to_vec())
        };
        let (mut t1, mut t2) = (t1, t2);
        let o1 = dec_out(&mut t1, &f1, &tokens, &tv_mask)?;
        let o2 = dec_out(&mut t2, &f2, &tokens, &tv_mask)?;
        dec_pad = dec_pad.max(o1.iter().zip(&o2).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));

        // changing tokens after position p leaves rows ≤ p untouched
        let p = r.random_range(0..len);
        let mut later = tokens.clone();
        for tok in later.iter_mut().skip(p + 1) {
            *tok = r.random_range(4..12);
        }
        let o3 = dec_out(&mut t1, &f1, &later, &tv_mask)?;
        let vocab = 12;
        dec_causal = dec_causal.max(
            o1[..(p + 1) * vocab]
                .iter()
                .zip(&o3[..(p + 1) * vocab])
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        );

        // padded caption positions: their token ids do not reach valid rows
        let n_valid = r.random_range(1..=len);
        let tok_valid: Vec<bool> = (0..len).map(|i| i < n_valid).collect();
        let mut padded = tokens.clone();
        for tok in padded.iter_mut().skip(n_valid) {
            *tok = r.random_range(0..12);
        }
        let o4 = dec_out(&mut t1, &f1, &tokens, &tok_valid)?;
        let o5 = dec_out(&mut t1, &f1, &padded, &tok_valid)?;
        dec_token_pad = dec_token_pad.max(valid_rows_diff(&o4, &o5, vocab, &tok_valid));

        // proposal heads at valid positions
        let (mut p1, g1) = encode(&pmodel.encoder, &pstore, &a, &v, &ma, &mv)?;
        let (mut p2, g2) = encode(&pmodel.encoder, &pstore, &a2, &v2, &ma, &mv)?;
        let h1 = pmodel.heads.forward(&mut p1, &pstore, &g1)?;
        let h2 = pmodel.heads.forward(&mut p2, &pstore, &g2)?;
        for (x, y, m) in h1
            .audio
            .iter()
            .zip(&h2.audio)
            .map(|(x, y)| (x, y, &ma))
            .chain(h1.visual.iter().zip(&h2.visual).map(|(x, y)| (x, y, &mv)))
        {
            let w = p1.dims2(*x)?.1;
            head_pad = head_pad.max(valid_rows_diff(p1.value(*x), p2.value(*y), w, m));
        }
    }
    Ok(vec![
        MaskCheck {
            name: "encoder padding",
            max_deviation: enc_pad,
        },
        MaskCheck {
            name: "decoder over padded encoder rows",
            max_deviation: dec_pad,
        },
        MaskCheck {
            name: "decoder causal future",
            max_deviation: dec_causal,
        },
        MaskCheck {
            name: "decoder padded caption tokens",
            max_deviation: dec_token_pad,
        },
        MaskCheck {
            name: "proposal heads padding",
            max_deviation: head_pad,
        },
    ])
}

// ---------------------------------------------------------------------------
// metric and clustering oracles

pub fn oracle_tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Size of a maximum one-to-one matching over pairs with overlap `≥ threshold`, by
/// exhaustive search.
pub fn brute_force_matches(pred: &[(f64, f64)], gt: &[(f64, f64)], threshold: f64) -> usize {
    fn go(i: usize, pred: &[(f64, f64)], gt: &[(f64, f64)], th: f64, used: &mut [bool]) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, gt, th, used);
        for g in 0..gt.len() {
            if !used[g] && oracle_tiou(pred[i], gt[g]) >= th {
                used[g] = true;
                best = best.max(1 + go(i + 1, pred, gt, th, used));
                used[g] = false;
            }
        }
        best
    }
    go(0, pred, gt, threshold, &mut vec![false; gt.len()])
}

/// Disjoint, well separated ground truth with jittered or unrelated predictions: every
/// prediction clears the threshold against at most one segment.
pub fn greedy_safe_instance(r: &mut impl Rng) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let n_gt = r.random_range(1..5);
    let gt: Vec<(f64, f64)> = (0..n_gt)
        .map(|i| {
            let s = 20.0 * i as f64 + r.random_range(0.0..2.0);
            (s, s + r.random_range(3.0..8.0))
        })
        .collect();
    let n_pred = r.random_range(0..7);
    let pred = (0..n_pred)
        .map(|_| {
            if r.random_bool(0.7) {
                let g = gt[r.random_range(0..n_gt)];
                let (js, je) = (r.random_range(-1.5..1.5), r.random_range(-1.5..1.5));
                let (s, e) = (g.0 + js, g.1 + je);
                (s.min(e), s.max(e) + 0.1)
            } else {
                let s = r.random_range(0.0..90.0);
                (s, s + r.random_range(0.5..10.0))
            }
        })
        .collect();
    (pred, gt)
}

pub fn oracle_inertia(values: &[f64], centroids: &[f64]) -> f64 {
    values
        .iter()
        .map(|x| centroids.iter().map(|c| (x - c).powi(2)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Plain Lloyd from uniformly chosen distinct starting points, best of `restarts`.
pub fn lloyd_oracle(values: &[f64], k: usize, restarts: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut best = f64::INFINITY;
    for _ in 0..restarts {
        let mut pool = distinct.clone();
        let mut c: Vec<f64> = (0..k)
            .map(|_| pool.swap_remove(r.random_range(0..pool.len())))
            .collect();
        for _ in 0..500 {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for &x in values {
                let j = (0..k)
                    .min_by(|&a, &b| (x - c[a]).abs().total_cmp(&(x - c[b]).abs()))
                    .unwrap();
                sums[j] += x;
                counts[j] += 1;
            }
            let next: Vec<f64> = (0..k)
                .map(|j| {
                    if counts[j] > 0 {
                        sums[j] / counts[j] as f64
                    } else {
                        c[j]
                    }
                })
                .collect();
            if next == c {
                break;
            }
            c = next;
        }
        best = best.min(oracle_inertia(values, &c));
    }
    best
}

/// K-means test instance: up to 50 lengths with at least `k` distinct values.
pub fn kmeans_instance(r: &mut impl Rng) -> (Vec<f64>, usize) {
    loop {
        let n = r.random_range(2..=50);
        let k = r.random_range(1..=n.min(6));
        let modes: Vec<f64> = (0..r.random_range(1..5)).map(|_| r.random_range(1.0..60.0)).collect();
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let m = modes[r.random_range(0..modes.len())];
                (m + r.random_range(-3.0..3.0)).max(0.1)
            })
            .collect();
        let mut d = values.clone();
        d.sort_by(f64::total_cmp);
        d.dedup();
        if d.len() >= k {
            return (values, k);
        }
    }
}

// ---------------------------------------------------------------------------
// loss and target oracles

/// `KL(q‖p)` per valid row with `q` built by hand, averaged over valid rows.
pub fn oracle_caption_loss(logits: &[Vec<f64>], targets: &[usize], valid: &[bool], gamma: f64, pad: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for ((row, &y), &ok) in logits.iter().zip(targets).zip(valid) {
        if !ok {
            continue;
        }
        n += 1;
        let v = row.len();
        let zmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|z| (z - zmax).exp()).sum();
        for (j, z) in row.iter().enumerate() {
            let q = if j == y {
                1.0 - gamma
            } else if j == pad {
                0.0
            } else {
                gamma / (v - 2) as f64
            };
            if q > 0.0 {
                let p = (z - zmax).exp() / denom;
                total += q * (q / p).ln();
            }
        }
    }
    total / n as f64
}

fn oracle_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn oracle_bce(x: f64, y: f64) -> f64 {
    let p = oracle_sigmoid(x);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Loss of one `T×3A` head, cell by cell. Positives are `(position, anchor, ĉ, l̂)`.
pub fn oracle_head_loss(
    raw: &[Vec<f64>],
    positives: &[(usize, usize, f64, f64)],
    valid: &[bool],
    coeffs: (f64, f64, f64),
) -> f64 {
    let (loc, obj, noobj) = coeffs;
    let a = raw[0].len() / 3;
    let mut loc_sum = 0.0;
    let mut obj_sum = 0.0;
    for &(p, k, c, l) in positives {
        let row = &raw[p];
        loc_sum += (oracle_sigmoid(row[3 * k]) - c).powi(2) + (row[3 * k + 1] - l).powi(2);
        obj_sum += oracle_bce(row[3 * k + 2], 1.0);
    }
    let mut neg_sum = 0.0;
    let mut neg_n = 0;
    for (p, row) in raw.iter().enumerate() {
        if !valid[p] {
            continue;
        }
        for k in 0..a {
            if !positives.iter().any(|&(pp, kk, _, _)| pp == p && kk == k) {
                neg_sum += oracle_bce(row[3 * k + 2], 0.0);
                neg_n += 1;
            }
        }
    }
    let mut out = loc * loc_sum;
    if !positives.is_empty() {
        out += obj * obj_sum / positives.len() as f64;
    }
    if neg_n > 0 {
        out += noobj * neg_sum / neg_n as f64;
    }
    out
}

/// Targets for segments that fall in distinct (cell, anchor) slots.
pub fn oracle_assignment(
    segments: &[(f64, f64)],
    anchors: &[f64],
    cell: f64,
    t: usize,
) -> Vec<(usize, usize, f64, f64)> {
    let mut out: Vec<_> = segments
        .iter()
        .map(|&(s, e)| {
            let c = (s + e) / 2.0 / cell;
            let len = (e - s) / cell;
            let p = (c.floor() as usize).min(t - 1);
            let mut k = 0;
            for (i, a) in anchors.iter().enumerate() {
                if (len.ln() - a.ln()).abs() < (len.ln() - anchors[k].ln()).abs() {
                    k = i;
                }
            }
            (p, k, (c - p as f64).clamp(0.0, 1.0), (len / anchors[k]).ln())
        })
        .collect();
    out.sort_by_key(|a| (a.0, a.1));
    out
}

pub fn anchor_set(anchors: &[f64], cell: f64) -> AnchorSet {
    AnchorSet::new(Modality::Audio, anchors.to_vec(), cell).unwrap()
}

// ---------------------------------------------------------------------------
// pipeline fixtures

pub fn toy_config() -> bmt_core::config::Config {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let cfg = bmt_core::config::Config::load(&path).unwrap();
    cfg.validate().unwrap();
    cfg
}

/// Toy config with short training for plumbing tests.
pub fn quick_config() -> bmt_core::config::Config {
    let mut cfg = toy_config();
    cfg.train.caption_epochs = 2;
    cfg.train.proposal_epochs = 2;
    cfg
}

pub fn toy_dataset() -> bmt_core::pipeline::Dataset {
    let ds = bmt_core::data::SynthDataset::generate(&bmt_core::data::SynthSpec::default()).unwrap();
    bmt_core::pipeline::Dataset::from_synth(ds)
}
