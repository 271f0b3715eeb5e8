//! Caption vocabulary and tokenization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::write_atomic;

pub const UNK: usize = 0;
pub const PAD: usize = 1;
pub const START: usize = 2;
pub const END: usize = 3;

const SPECIALS: [&str; 4] = ["<unk>", "<pad>", "<s>", "</s>"];

/// Lowercases and splits on whitespace; every ASCII punctuation mark is its own token.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in sentence.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if ch.is_ascii_punctuation() {
                out.push(ch.to_string());
            }
        } else {
            word.push(ch);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ids: the four specials, then tokens seen at least `min_count` times ordered by
    /// count (descending) and then lexicographically.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for s in sentences {
            any = true;
            for tok in tokenize(s) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let entries = SPECIALS.iter().map(|s| (s.to_string(), 0)).chain(kept);
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: impl IntoIterator<Item = (String, usize)>) -> Self {
        let (tokens, counts): (Vec<String>, Vec<usize>) = entries.into_iter().unzip();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, counts, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Ids without start/end markers.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        tokenize(sentence).iter().map(|t| self.id(t)).collect()
    }

    /// `<s> w1 … wn </s>`
    pub fn encode_caption(&self, sentence: &str) -> Vec<usize> {
        let mut ids = vec![START];
        ids.extend(self.encode(sentence));
        ids.push(END);
        ids
    }

    /// Joins tokens with spaces, skipping specials other than unknown.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | START | END))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One `token\tid\tcount` line per entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(out, "{t}\t{i}\t{c}").expect("write to string");
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::data(format!("vocabulary line {}: {line:?}", line_no + 1));
            let mut parts = line.split('\t');
            let (Some(tok), Some(id), Some(count), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let id: usize = id.parse().map_err(|_| bad())?;
            let count: usize = count.parse().map_err(|_| bad())?;
            if id != entries.len() {
                return Err(Error::data(format!(
                    "vocabulary ids must be dense, got {id} at line {}",
                    line_no + 1
                )));
            }
            entries.push((tok.to_string(), count));
        }
        if entries.len() < SPECIALS.len() || entries.iter().zip(SPECIALS).any(|(e, s)| e.0 != s) {
            return Err(Error::data("vocabulary dump must start with the special tokens"));
        }
        Ok(Self::from_entries(entries))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.dump().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_dump(&std::fs::read_to_string(path)?)
    }
}

/// Builds a `vocab×d` embedding table from text word vectors (`word v1 … vd` per line).
/// Tokens without a vector get the mean of all vectors found for the vocabulary.
pub fn load_word_vectors(text: &str, vocab: &Vocabulary, d: usize) -> Result<Tensor> {
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (line_no, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let Some(&id) = vocab.index.get(word) else { continue };
        let vals = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::data(format!("word vectors line {}: {e}", line_no + 1)))?;
        if vals.len() != d {
            return Err(Error::data(format!(
                "word vectors line {}: {} values, expected {d}",
                line_no + 1,
                vals.len()
            )));
        }
        rows[id] = Some(vals);
    }
    let found: Vec<&Vec<f64>> = rows.iter().flatten().collect();
    if found.is_empty() {
        return Err(Error::data("no vocabulary token has a word vector"));
    }
    let mut mean = vec![0.0; d];
    for r in &found {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / found.len() as f64;
        }
    }
    let data = rows
        .into_iter()
        .flat_map(|r| r.unwrap_or_else(|| mean.clone()))
        .collect();
    Tensor::new(vec![vocab.len(), d], data)
}
