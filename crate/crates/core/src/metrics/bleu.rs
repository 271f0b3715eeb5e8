//! Corpus BLEU with clipped n-gram counts and the brevity penalty.

use std::collections::HashMap;

use crate::error::{Error, Result};

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// `(clipped matches, candidate n-gram count)` for one candidate.
pub fn modified_precision(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped = cand
        .iter()
        .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    let total = candidate.len().saturating_sub(n - 1);
    (clipped, total)
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU-`max_n` with uniform weights. Any zero n-gram precision gives 0.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], max_n: usize) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::config(format!("BLEU order {max_n} outside 1..=4")));
    }
    if candidates.is_empty() {
        return Err(Error::data("empty candidate corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::data(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut clipped = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
        for n in 1..=max_n {
            let (m, t) = modified_precision(cand, refs, n);
            clipped[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if c_len == 0 || clipped.iter().zip(&totals).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = clipped
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    #[test]
    fn textbook_clipped_unigrams() {
        let cand = tokenize("the the the the the the the");
        let refs = vec![tokenize("the cat is on the mat")];
        assert_eq!(modified_precision(&cand, &refs, 1), (2, 7));
    }

    #[test]
    fn identical_is_one_disjoint_is_zero() {
        let c = tokenize("a man is riding a horse");
        assert!((bleu(std::slice::from_ref(&c), &[vec![c.clone()]], 4).unwrap() - 1.0).abs() < 1e-12);
        let other = tokenize("dogs bark loudly outside today");
        assert_eq!(bleu(&[c], &[vec![other]], 4).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let c = tokenize("a b c d");
        let r = tokenize("a b c d e f g h");
        let b = bleu(&[c], &[vec![r]], 1).unwrap();
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        assert!(matches!(bleu(&[], &[], 4), Err(Error::Data(_))));
    }
}
