use std::collections::BTreeSet;

use super::LangMatrix;
use crate::corpus::{MultiwayCorpus, SubwordModel};
use crate::error::{Error, Result};
use crate::translit::SignalKind;

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapResult {
    pub matrix: LangMatrix,
    /// Mean over unordered language pairs.
    pub mean: f64,
    /// Mean subword count over every variant of the kind.
    pub avg_len: f64,
}

/// |A ∩ B| / |A ∪ B|; two empty sets count as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn token_overlap(
    corpus: &MultiwayCorpus,
    kind: SignalKind,
    model: &SubwordModel,
) -> Result<OverlapResult> {
    corpus.check_multiway(kind)?;
    let langs = corpus.languages();
    if langs.len() < 2 {
        return Err(Error::Invalid(
            "token overlap needs at least two languages".into(),
        ));
    }
    if corpus.is_empty() {
        return Err(Error::Invalid("token overlap over an empty corpus".into()));
    }
    // encoded[l][r]
    let encoded: Vec<Vec<Vec<u32>>> = langs
        .iter()
        .map(|l| {
            corpus
                .records()
                .iter()
                .map(|r| model.encode(r.variant(l, kind).expect("checked multiway")))
                .collect()
        })
        .collect();
    let sets: Vec<Vec<BTreeSet<u32>>> = encoded
        .iter()
        .map(|per| per.iter().map(|s| s.iter().copied().collect()).collect())
        .collect();

    let mut matrix = LangMatrix::new(langs.to_vec());
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..langs.len() {
        for j in i + 1..langs.len() {
            let total: f64 = sets[i]
                .iter()
                .zip(&sets[j])
                .map(|(a, b)| jaccard(a, b))
                .sum();
            let score = total / corpus.len() as f64;
            matrix.set(i, j, score);
            matrix.set(j, i, score);
            sum += score;
            pairs += 1;
        }
    }
    let tokens: usize = encoded.iter().flatten().map(Vec::len).sum();
    let avg_len = tokens as f64 / (langs.len() * corpus.len()) as f64;
    Ok(OverlapResult {
        matrix,
        mean: sum / pairs as f64,
        avg_len,
    })
}
