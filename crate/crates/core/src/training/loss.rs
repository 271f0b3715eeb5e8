//! Label-smoothed caption loss and the proposal-head loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proposals::HeadOutputs;
use crate::tensor::{Tape, Var};

use super::targets::Assignment;

/// Per-row smoothed target: `1−γ` on the true token, `γ/(V_eff−1)` on every other
/// token except `pad`.
pub fn smoothed_target(vocab: usize, target: usize, gamma: f64, pad: Option<usize>) -> Vec<f64> {
    let v_eff = vocab - usize::from(pad.is_some_and(|p| p < vocab));
    let spread = if v_eff > 1 { gamma / (v_eff - 1) as f64 } else { 0.0 };
    (0..vocab)
        .map(|j| {
            if j == target {
                1.0 - gamma
            } else if Some(j) == pad {
                0.0
            } else {
                spread
            }
        })
        .collect()
}

/// Mean over valid rows of `KL(smoothed target ‖ exp(log_probs))`. Returns the loss and
/// the number of valid rows.
pub fn caption_loss(
    tape: &mut Tape,
    log_probs: Var,
    targets: &[usize],
    valid: &[bool],
    gamma: f64,
    pad: Option<usize>,
) -> Result<(Var, usize)> {
    let (t, vocab) = tape.dims2(log_probs)?;
    if targets.len() != t || valid.len() != t {
        return Err(Error::dim(format!(
            "{} targets / {} mask entries for {t} rows",
            targets.len(),
            valid.len()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config(format!("label smoothing {gamma} outside [0, 1)")));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::contract("caption target is entirely padding"));
    }
    let mut weights = vec![0.0; t * vocab];
    let mut entropy = 0.0;
    for (r, (&y, _)) in targets.iter().zip(valid).enumerate().filter(|(_, (_, &v))| v) {
        if y >= vocab || Some(y) == pad {
            return Err(Error::contract(format!("target id {y} at position {r} is not a word")));
        }
        let q = smoothed_target(vocab, y, gamma, pad);
        for (j, qj) in q.iter().enumerate() {
            if *qj > 0.0 {
                weights[r * vocab + j] = -qj / n as f64;
                entropy += qj * qj.ln();
            }
        }
    }
    let cross = tape.weighted_sum(log_probs, Arc::new(weights))?;
    Ok((tape.offset(cross, entropy / n as f64), n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub loc: f64,
    pub obj: f64,
    pub noobj: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        LossCoefficients {
            loc: 1.0,
            obj: 1.0,
            noobj: 100.0,
        }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        if [self.loc, self.obj, self.noobj]
            .iter()
            .any(|c| !(*c >= 0.0 && c.is_finite()))
        {
            return Err(Error::config("loss coefficients must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Loss of one head output `T×3|Ψ|` against its modality's assignment:
/// `loc·Σ_pos[(σ(c)−ĉ)² + (l−l̂)²] + obj·mean_pos BCE(o, 1) + noobj·mean_neg BCE(o, 0)`.
/// Negatives are the valid positions not assigned to any segment.
pub fn head_loss(
    tape: &mut Tape,
    raw: Var,
    assignment: &Assignment,
    valid: &[bool],
    coeffs: LossCoefficients,
) -> Result<Var> {
    let (t, w) = tape.dims2(raw)?;
    let a = assignment.anchors;
    if w != 3 * a || t != assignment.positions || valid.len() != t {
        return Err(Error::dim(format!(
            "head output {:?} does not fit an assignment over {} positions × {a} anchors",
            tape.shape(raw),
            assignment.positions
        )));
    }
    let mut c_target = vec![0.0; t * w];
    let mut l_target = vec![0.0; t * w];
    let mut c_weight = vec![0.0; t * w];
    let mut l_weight = vec![0.0; t * w];
    let mut o_target = vec![0.0; t * w];
    let mut o_weight = vec![0.0; t * w];

    let n_pos = assignment.positives.len();
    for pos in &assignment.positives {
        let base = pos.position * w + 3 * pos.anchor;
        c_target[base] = pos.c_target;
        c_weight[base] = coeffs.loc;
        l_target[base + 1] = pos.l_target;
        l_weight[base + 1] = coeffs.loc;
        o_target[base + 2] = 1.0;
        o_weight[base + 2] = coeffs.obj / n_pos as f64;
    }
    let negatives: Vec<usize> = (0..t)
        .filter(|&p| valid[p])
        .flat_map(|p| (0..a).map(move |ai| p * w + 3 * ai + 2))
        .filter(|&i| o_target[i] == 0.0)
        .collect();
    for &i in &negatives {
        o_weight[i] = coeffs.noobj / negatives.len() as f64;
    }

    let mut terms = Vec::with_capacity(3);
    if n_pos > 0 {
        let sig = tape.sigmoid(raw);
        let ct = tape.constant(crate::tensor::Tensor::new(vec![t, w], c_target)?);
        let dc = tape.sub(sig, ct)?;
        let dc2 = tape.mul(dc, dc)?;
        terms.push(tape.weighted_sum(dc2, Arc::new(c_weight))?);

        let lt = tape.constant(crate::tensor::Tensor::new(vec![t, w], l_target)?);
        let dl = tape.sub(raw, lt)?;
        let dl2 = tape.mul(dl, dl)?;
        terms.push(tape.weighted_sum(dl2, Arc::new(l_weight))?);
    }
    let bce = tape.bce_with_logits(raw, Arc::new(o_target))?;
    terms.push(tape.weighted_sum(bce, Arc::new(o_weight))?);

    let mut total = terms[0];
    for &term in &terms[1..] {
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Sum of [`head_loss`] over every head of both modalities.
pub fn proposal_loss(
    tape: &mut Tape,
    outputs: &HeadOutputs,
    audio: (&Assignment, &[bool]),
    visual: (&Assignment, &[bool]),
    coeffs: LossCoefficients,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (heads, (assignment, valid)) in [(&outputs.audio, audio), (&outputs.visual, visual)] {
        for &raw in heads {
            let l = head_loss(tape, raw, assignment, valid, coeffs)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
    }
    total.ok_or_else(|| Error::config("no proposal heads"))
}
