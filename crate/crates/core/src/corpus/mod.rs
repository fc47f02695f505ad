//! Multi-way corpora, subword models, sampling and synthetic data.

mod bpe;
mod mixture;
mod sampling;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bpe::{reserved_tokens, train_bpe, SubwordModel, BOS, END_OF_WORD, EOS, PAD, SEP, UNK};
pub use mixture::{build_examples, build_training_mixture, tagged_source, Example, InputLayout};
pub use sampling::{temperature_schedule, DirectionSampler, SamplingSchedule};
pub use synth::{
    generate_synthetic_family, glyph_set, FamilyRules, SyntheticFamily, SyntheticFamilyConfig,
};

use crate::error::{Error, Result};
use crate::translit::SignalKind;

pub const CORPUS_FORMAT: &str = "#corpus v1";
pub const TARGETS_FORMAT: &str = "#targets v1";

/// One aligned record: every source variant translates to `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: usize,
    pub variants: BTreeMap<(String, SignalKind), String>,
    pub target: String,
}

impl Record {
    pub fn variant(&self, language: &str, kind: SignalKind) -> Option<&str> {
        self.variants
            .get(&(language.to_string(), kind))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiwayCorpus {
    languages: Vec<String>,
    records: Vec<Record>,
}

impl MultiwayCorpus {
    /// Checks that ids are dense from zero, targets are non-empty and every
    /// variant names a declared language.
    pub fn new(languages: Vec<String>, records: Vec<Record>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for lang in &languages {
            if !seen.insert(lang) {
                return Err(Error::Validation(format!(
                    "language `{lang}` declared twice"
                )));
            }
        }
        for (i, record) in records.iter().enumerate() {
            if record.id != i {
                return Err(Error::Validation(format!(
                    "record ids must be dense from 0; position {i} holds id {}",
                    record.id
                )));
            }
            if record.target.trim().is_empty() {
                return Err(Error::Validation(format!("record {i} has an empty target")));
            }
            if let Some((lang, _)) = record.variants.keys().find(|(l, _)| !seen.contains(l)) {
                return Err(Error::Validation(format!(
                    "record {i} uses undeclared language `{lang}`"
                )));
            }
        }
        Ok(MultiwayCorpus { languages, records })
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub(crate) fn records_mut(&mut self) -> &mut [Record] {
        &mut self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn kinds(&self) -> BTreeSet<SignalKind> {
        self.records
            .iter()
            .flat_map(|r| r.variants.keys().map(|(_, k)| *k))
            .collect()
    }

    /// Every record carries a `kind` variant for every declared language.
    pub fn check_multiway(&self, kind: SignalKind) -> Result<()> {
        for record in &self.records {
            for lang in &self.languages {
                if record.variant(lang, kind).is_none() {
                    return Err(Error::MissingVariant {
                        record: record.id,
                        language: lang.clone(),
                        kind: kind.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Records `ids` (in the given order), renumbered densely from 0.
    pub fn select(&self, ids: &[usize]) -> MultiwayCorpus {
        let records = ids
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let mut r = self.records[old].clone();
                r.id = new_id;
                r
            })
            .collect();
        MultiwayCorpus {
            languages: self.languages.clone(),
            records,
        }
    }

    /// Keeps only language `i mod N` in record `i`, so every language sees
    /// its own disjoint set of sentences.
    pub fn partition_languages(&self) -> MultiwayCorpus {
        let n = self.languages.len().max(1);
        let records = self
            .records
            .iter()
            .map(|r| {
                let keep = &self.languages[r.id % n];
                Record {
                    id: r.id,
                    variants: r
                        .variants
                        .iter()
                        .filter(|((l, _), _)| l == keep)
                        .map(|(k, v)| (k.clone(), v.clone()))
                        .collect(),
                    target: r.target.clone(),
                }
            })
            .collect();
        MultiwayCorpus {
            languages: self.languages.clone(),
            records,
        }
    }

    /// Languages with at least one variant in `record`.
    pub fn present_languages(&self, record: usize) -> Vec<&String> {
        let r = &self.records[record];
        self.languages
            .iter()
            .filter(|l| r.variants.keys().any(|(vl, _)| vl == *l))
            .collect()
    }

    /// Contiguous split into (first `n` records, the rest).
    pub fn split_at(&self, n: usize) -> (MultiwayCorpus, MultiwayCorpus) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    /// Every source text plus every target, in corpus order.
    pub fn all_texts(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for r in &self.records {
            out.extend(r.variants.values().map(String::as_str));
            out.push(r.target.as_str());
        }
        out
    }

    /// Sources as TSV: `id language signal text`.
    pub fn sources_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(CORPUS_FORMAT);
        out.push('\n');
        let _ = writeln!(out, "#languages\t{}", self.languages.join("\t"));
        for r in &self.records {
            for ((lang, kind), text) in &r.variants {
                let _ = writeln!(out, "{}\t{}\t{}\t{}", r.id, lang, kind, text);
            }
        }
        out
    }

    pub fn targets_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(TARGETS_FORMAT);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}", r.id, r.target);
        }
        out
    }

    pub fn save(&self, sources: &Path, targets: &Path) -> Result<()> {
        std::fs::write(sources, self.sources_tsv()).map_err(|e| Error::io(sources, e))?;
        std::fs::write(targets, self.targets_tsv()).map_err(|e| Error::io(targets, e))
    }

    pub fn load(sources: &Path, targets: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(sources).map_err(|e| Error::io(sources, e))?;
        let tgt = std::fs::read_to_string(targets).map_err(|e| Error::io(targets, e))?;
        Self::parse(
            &src,
            &tgt,
            &sources.display().to_string(),
            &targets.display().to_string(),
        )
    }

    pub fn parse(sources: &str, targets: &str, src_name: &str, tgt_name: &str) -> Result<Self> {
        let mut target_lines = targets.lines().enumerate();
        match target_lines.next() {
            Some((_, l)) if l.trim() == TARGETS_FORMAT => {}
            _ => {
                return Err(Error::parse(
                    tgt_name,
                    1,
                    format!("expected `{TARGETS_FORMAT}`"),
                ))
            }
        }
        let mut records: Vec<Record> = Vec::new();
        for (i, line) in target_lines {
            if line.is_empty() {
                continue;
            }
            let (id, text) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(tgt_name, i + 1, "expected `id<TAB>text`"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(tgt_name, i + 1, format!("bad id `{id}`")))?;
            if id != records.len() {
                return Err(Error::parse(
                    tgt_name,
                    i + 1,
                    "ids must be dense and ascending",
                ));
            }
            records.push(Record {
                id,
                variants: BTreeMap::new(),
                target: text.to_string(),
            });
        }

        let mut lines = sources.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == CORPUS_FORMAT => {}
            _ => {
                return Err(Error::parse(
                    src_name,
                    1,
                    format!("expected `{CORPUS_FORMAT}`"),
                ))
            }
        }
        let mut languages = Vec::new();
        for (i, line) in lines {
            if let Some(rest) = line.strip_prefix("#languages") {
                languages = rest
                    .split('\t')
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
                continue;
            }
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.splitn(4, '\t').collect();
            if cols.len() != 4 {
                return Err(Error::parse(
                    src_name,
                    i + 1,
                    "expected 4 tab-separated columns",
                ));
            }
            let id: usize = cols[0]
                .parse()
                .map_err(|_| Error::parse(src_name, i + 1, format!("bad id `{}`", cols[0])))?;
            let kind: SignalKind = cols[2]
                .parse()
                .map_err(|e: Error| Error::parse(src_name, i + 1, e.to_string()))?;
            let record = records
                .get_mut(id)
                .ok_or_else(|| Error::parse(src_name, i + 1, format!("id {id} has no target")))?;
            if !languages.iter().any(|l| l == cols[1]) {
                languages.push(cols[1].to_string());
            }
            record
                .variants
                .insert((cols[1].to_string(), kind), cols[3].to_string());
        }
        MultiwayCorpus::new(languages, records)
    }
}

/// Keeps `ceil(fraction * n)` records chosen uniformly without replacement,
/// with all of each chosen record's variants. Chosen records keep their
/// relative order and are renumbered from 0.
pub fn subset(corpus: &MultiwayCorpus, fraction: f64, seed: u64) -> Result<MultiwayCorpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(corpus.clone());
    }
    let n = corpus.len();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = sample(&mut rng, n, keep).into_vec();
    ids.sort_unstable();
    Ok(corpus.select(&ids))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy(n: usize, langs: &[&str]) -> MultiwayCorpus {
        let records = (0..n)
            .map(|i| Record {
                id: i,
                variants: langs
                    .iter()
                    .map(|l| ((l.to_string(), SignalKind::Base), format!("{l} word{i}")))
                    .collect(),
                target: format!("target {i}"),
            })
            .collect();
        MultiwayCorpus::new(langs.iter().map(|s| s.to_string()).collect(), records).unwrap()
    }

    #[test]
    fn rejects_sparse_ids() {
        let mut c = toy(2, &["aa"]);
        c.records[1].id = 5;
        let err = MultiwayCorpus::new(c.languages.clone(), c.records.clone()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_empty_target() {
        let mut c = toy(1, &["aa"]);
        c.records[0].target = " ".into();
        assert!(MultiwayCorpus::new(c.languages.clone(), c.records.clone()).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let c = toy(3, &["aa", "bb"]);
        let back = MultiwayCorpus::parse(&c.sources_tsv(), &c.targets_tsv(), "s", "t").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn subset_full_fraction_is_identity() {
        let c = toy(10, &["aa"]);
        assert_eq!(subset(&c, 1.0, 3).unwrap(), c);
    }

    #[test]
    fn subset_counts_and_seeds() {
        let c = toy(100, &["aa", "bb"]);
        let a = subset(&c, 0.05, 11).unwrap();
        let b = subset(&c, 0.05, 11).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        let targets = |x: &MultiwayCorpus| -> Vec<String> {
            x.records().iter().map(|r| r.target.clone()).collect()
        };
        let differ = (12..20).any(|s| targets(&subset(&c, 0.05, s).unwrap()) != targets(&a));
        assert!(differ);
        // variants of a record stay together
        for r in a.records() {
            assert_eq!(r.variants.len(), 2);
            let n = r.target.strip_prefix("target ").unwrap();
            assert_eq!(
                r.variant("bb", SignalKind::Base).unwrap(),
                format!("bb word{n}")
            );
        }
        assert!(subset(&c, 0.0, 1).is_err());
        assert!(subset(&c, 1.5, 1).is_err());
    }

    #[test]
    fn multiway_check_names_gap() {
        let mut c = toy(2, &["aa", "bb"]);
        c.records[1]
            .variants
            .remove(&("bb".to_string(), SignalKind::Base));
        match c.check_multiway(SignalKind::Base).unwrap_err() {
            Error::MissingVariant {
                record, language, ..
            } => {
                assert_eq!(record, 1);
                assert_eq!(language, "bb");
            }
            other => panic!("{other}"),
        }
    }
}
