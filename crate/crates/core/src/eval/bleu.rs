use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use super::LangMatrix;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
const SMOOTHING_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuOptions {
    /// Replace zero higher-order match counts by 0.1.
    pub smoothing: bool,
}

/// Sufficient statistics for corpus BLEU.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn add<T: Eq + Hash>(&mut self, hyp: &[T], reference: &[T]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    /// BLEU in [0, 100]. Orders for which the hypotheses contain no n-grams
    /// at all are left out of the geometric mean.
    pub fn score(&self, options: BleuOptions) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            let mut m = self.matches[n] as f64;
            if m == 0.0 {
                if options.smoothing && n > 0 {
                    m = SMOOTHING_FLOOR;
                } else {
                    return 0.0;
                }
            }
            log_sum += (m / self.totals[n] as f64).ln();
            orders += 1;
        }
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64)
            .min(0.0)
            .exp();
        (100.0 * bp * (log_sum / orders as f64).exp()).clamp(0.0, 100.0)
    }
}

/// Corpus-level 4-gram BLEU over token sequences.
pub fn bleu<T: Eq + Hash>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    options: BleuOptions,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Invalid("BLEU needs at least one sentence".into()));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h, r);
    }
    Ok(stats.score(options))
}

/// Consistency BLEU: for each ordered pair (m, n), m != n, the BLEU of
/// language n's outputs against language m's as reference. Returns the grid
/// (row = reference language) and the mean of its N(N-1) entries.
pub fn c_bleu<T: Eq + Hash>(
    outputs: &BTreeMap<String, Vec<Vec<T>>>,
    options: BleuOptions,
) -> Result<(LangMatrix, f64)> {
    if outputs.len() < 2 {
        return Err(Error::Invalid("C-BLEU needs at least two languages".into()));
    }
    let languages: Vec<String> = outputs.keys().cloned().collect();
    let len = outputs.values().next().map(Vec::len).unwrap_or(0);
    if let Some((lang, v)) = outputs.iter().find(|(_, v)| v.len() != len) {
        return Err(Error::Shape(format!(
            "outputs for `{lang}` have {} sentences, expected {len}",
            v.len()
        )));
    }
    let mut matrix = LangMatrix::new(languages.clone());
    let mut sum = 0.0;
    let mut count = 0;
    for (i, m) in languages.iter().enumerate() {
        for (j, n) in languages.iter().enumerate() {
            if i == j {
                continue;
            }
            let score = bleu(&outputs[n], &outputs[m], options)?;
            matrix.set(i, j, score);
            sum += score;
            count += 1;
        }
    }
    debug_assert_eq!(count, languages.len() * (languages.len() - 1));
    Ok((matrix, sum / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let x = vec![toks("a b c d e"), toks("f g"), toks("h")];
        assert_eq!(bleu(&x, &x, BleuOptions::default()).unwrap(), 100.0);
    }

    #[test]
    fn brevity_penalty_example() {
        let s = bleu(
            &[toks("a b c d e")],
            &[toks("a b c d e f")],
            BleuOptions::default(),
        )
        .unwrap();
        // exp(1 - 6/5) = 0.818730...
        assert!((s - 81.873).abs() < 0.01, "{s}");
    }

    #[test]
    fn disjoint_scores_zero() {
        let s = bleu(
            &[toks("x y z w")],
            &[toks("a b c d")],
            BleuOptions::default(),
        )
        .unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn smoothing_rescues_missing_higher_orders() {
        let h = [toks("a b x c d")];
        let r = [toks("a b y c d")];
        assert_eq!(bleu(&h, &r, BleuOptions::default()).unwrap(), 0.0);
        assert!(bleu(&h, &r, BleuOptions { smoothing: true }).unwrap() > 0.0);
    }

    #[test]
    fn mismatch_is_error() {
        assert!(bleu(&[toks("a")], &[], BleuOptions::default()).is_err());
    }

    #[test]
    fn c_bleu_identical_outputs() {
        let out: BTreeMap<String, Vec<Vec<String>>> = ["a", "b", "c"]
            .iter()
            .map(|l| {
                (
                    l.to_string(),
                    vec![toks("one two three four"), toks("five")],
                )
            })
            .collect();
        let (m, mean) = c_bleu(&out, BleuOptions::default()).unwrap();
        assert_eq!(mean, 100.0);
        assert_eq!(m.entries().count(), 6);
    }
}
