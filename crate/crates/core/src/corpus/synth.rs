//! Synthetic language families: one shared phonology rendered in pairwise
//! disjoint scripts.
//!
//! Every language pronounces a shared lexicon identically except where a
//! per-language lexical substitution applies, so phonetic renderings overlap
//! heavily while native-script renderings share no glyph at all.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{MultiwayCorpus, Record};
use crate::error::{Error, Result};
use crate::translit::{RuleTable, SignalKind};

const CONSONANTS: &[(char, &str)] = &[
    ('p', "p"),
    ('t', "t"),
    ('k', "k"),
    ('b', "b"),
    ('d', "d"),
    ('g', "g"),
    ('m', "m"),
    ('n', "n"),
    ('s', "s"),
    ('l', "l"),
    ('r', "r"),
    ('ʃ', "sh"),
    ('j', "y"),
    ('w', "w"),
    ('h', "h"),
    ('f', "f"),
];
const VOWELS: &[(char, &str)] = &[
    ('a', "a"),
    ('e', "e"),
    ('i', "i"),
    ('o', "o"),
    ('u', "u"),
    ('ə', "e"),
];

// First code point of each language's glyph block; every block has at least
// 32 consecutive assigned letters.
const SCRIPT_BLOCKS: &[(u32, &str)] = &[
    (0x0430, "cyrl"),
    (0x10D0, "geor"),
    (0x3041, "hira"),
    (0x30A1, "kana"),
    (0x0905, "deva"),
    (0x4E00, "hani"),
    (0xAC00, "hang"),
    (0xA000, "yiii"),
];

const ENTITY_TYPES: &[&str] = &["PER", "LOC", "ORG", "TIME"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFamilyConfig {
    pub num_languages: usize,
    pub lexicon_size: usize,
    /// Inclusive sentence length range in words.
    pub sentence_len: (usize, usize),
    /// Number of multi-way records.
    pub corpus_size: usize,
    /// Probability that a language replaces a shared lexeme with its own.
    pub divergence_rate: f64,
    /// Leading lexicon entries that are named entities.
    pub num_entities: usize,
    pub seed: u64,
}

impl Default for SyntheticFamilyConfig {
    fn default() -> Self {
        SyntheticFamilyConfig {
            num_languages: 2,
            lexicon_size: 200,
            sentence_len: (3, 7),
            corpus_size: 1000,
            divergence_rate: 0.3,
            num_entities: 20,
            seed: 1,
        }
    }
}

impl SyntheticFamilyConfig {
    pub fn languages(&self) -> Vec<String> {
        (0..self.num_languages).map(|i| format!("l{i}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.num_languages == 0 || self.num_languages > SCRIPT_BLOCKS.len() {
            return bad(format!(
                "num_languages must be in 1..={}, got {}",
                SCRIPT_BLOCKS.len(),
                self.num_languages
            ));
        }
        if self.lexicon_size == 0 {
            return bad("lexicon_size must be positive".into());
        }
        let (lo, hi) = self.sentence_len;
        if lo == 0 || lo > hi {
            return bad(format!("bad sentence length range ({lo}, {hi})"));
        }
        if !(0.0..=1.0).contains(&self.divergence_rate) {
            return bad(format!(
                "divergence_rate {} outside [0, 1]",
                self.divergence_rate
            ));
        }
        if self.num_entities > self.lexicon_size {
            return bad("num_entities exceeds lexicon_size".into());
        }
        if self.lexicon_size * (self.num_languages + 1) > 20_000 {
            return bad("lexicon too large for the phoneme word space".into());
        }
        Ok(())
    }
}

/// Gold rule tables per language and signal kind.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyRules {
    pub tables: BTreeMap<String, BTreeMap<SignalKind, RuleTable>>,
}

impl FamilyRules {
    /// Tables of one kind keyed by language, the shape `augment_corpus` takes.
    pub fn for_kind(&self, kind: SignalKind) -> BTreeMap<String, RuleTable> {
        self.tables
            .iter()
            .filter_map(|(lang, by_kind)| by_kind.get(&kind).map(|t| (lang.clone(), t.clone())))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFamily {
    pub corpus: MultiwayCorpus,
    pub rules: FamilyRules,
    /// Target-side surface form -> entity type.
    pub gazetteer: BTreeMap<String, String>,
}

fn phoneme_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(1..=2);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS.choose(rng).unwrap().0);
        w.push(VOWELS.choose(rng).unwrap().0);
        if rng.gen_bool(0.3) {
            w.push(CONSONANTS.choose(rng).unwrap().0);
        }
    }
    w
}

fn gloss_word(rng: &mut ChaCha8Rng) -> String {
    const C: &[u8] = b"bcdfghklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllables = rng.gen_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*C.choose(rng).unwrap() as char);
        w.push(*V.choose(rng).unwrap() as char);
    }
    w
}

fn fresh(used: &mut HashSet<String>, mut make: impl FnMut() -> String) -> String {
    loop {
        let w = make();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn phonemes() -> Vec<(char, &'static str)> {
    CONSONANTS.iter().chain(VOWELS).copied().collect()
}

fn glyph(lang: usize, phoneme_index: usize) -> char {
    char::from_u32(SCRIPT_BLOCKS[lang].0 + phoneme_index as u32).expect("valid code point")
}

/// Deterministic in `config`.
pub fn generate_synthetic_family(config: &SyntheticFamilyConfig) -> Result<SyntheticFamily> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let inventory = phonemes();
    let languages = config.languages();

    let mut used_phon = HashSet::new();
    let mut used_gloss = HashSet::new();
    let shared: Vec<String> = (0..config.lexicon_size)
        .map(|_| fresh(&mut used_phon, || phoneme_word(&mut rng)))
        .collect();
    let mut gazetteer = BTreeMap::new();
    let glosses: Vec<String> = (0..config.lexicon_size)
        .map(|i| {
            let g = fresh(&mut used_gloss, || gloss_word(&mut rng));
            if i < config.num_entities {
                let mut cs = g.chars();
                let cap: String = cs.next().unwrap().to_uppercase().chain(cs).collect();
                gazetteer.insert(
                    cap.clone(),
                    ENTITY_TYPES[i % ENTITY_TYPES.len()].to_string(),
                );
                cap
            } else {
                g
            }
        })
        .collect();
    // lexicon[lang][concept] = phoneme string
    let lexicon: Vec<Vec<String>> = (0..config.num_languages)
        .map(|_| {
            shared
                .iter()
                .map(|w| {
                    if rng.gen_bool(config.divergence_rate) {
                        fresh(&mut used_phon, || phoneme_word(&mut rng))
                    } else {
                        w.clone()
                    }
                })
                .collect()
        })
        .collect();

    let index_of: BTreeMap<char, usize> = inventory
        .iter()
        .enumerate()
        .map(|(i, (p, _))| (*p, i))
        .collect();
    let render = |lang: usize, phon: &str| -> String {
        phon.chars().map(|p| glyph(lang, index_of[&p])).collect()
    };

    let (lo, hi) = config.sentence_len;
    let mut records = Vec::with_capacity(config.corpus_size);
    for id in 0..config.corpus_size {
        let len = rng.gen_range(lo..=hi);
        let concepts: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(0..config.lexicon_size))
            .collect();
        let target = concepts
            .iter()
            .map(|&c| glosses[c].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let mut variants = BTreeMap::new();
        for (li, lang) in languages.iter().enumerate() {
            let text = concepts
                .iter()
                .map(|&c| render(li, &lexicon[li][c]))
                .collect::<Vec<_>>()
                .join(" ");
            variants.insert((lang.clone(), SignalKind::Base), text);
        }
        records.push(Record {
            id,
            variants,
            target,
        });
    }
    let corpus = MultiwayCorpus::new(languages.clone(), records)?;

    let mut tables = BTreeMap::new();
    for (li, lang) in languages.iter().enumerate() {
        let script = SCRIPT_BLOCKS[li].1;
        let mut by_kind = BTreeMap::new();
        let ipa = inventory
            .iter()
            .enumerate()
            .map(|(i, (p, _))| (glyph(li, i).to_string(), p.to_string()));
        by_kind.insert(
            SignalKind::Ipa,
            RuleTable::new(ipa, script, "ipa", SignalKind::Ipa)?,
        );
        let romani = inventory
            .iter()
            .enumerate()
            .map(|(i, (_, r))| (glyph(li, i).to_string(), r.to_string()));
        by_kind.insert(
            SignalKind::Romani,
            RuleTable::new(romani, script, "latn", SignalKind::Romani)?,
        );
        let transl: Vec<(String, String)> = if li == 0 {
            Vec::new()
        } else {
            (0..inventory.len())
                .map(|i| (glyph(li, i).to_string(), glyph(0, i).to_string()))
                .collect()
        };
        by_kind.insert(
            SignalKind::Transl,
            RuleTable::new(transl, script, SCRIPT_BLOCKS[0].1, SignalKind::Transl)?,
        );
        tables.insert(lang.clone(), by_kind);
    }
    Ok(SyntheticFamily {
        corpus,
        rules: FamilyRules { tables },
        gazetteer,
    })
}

/// Distinct glyphs used by a language's base texts.
pub fn glyph_set(corpus: &MultiwayCorpus, language: &str) -> BTreeSet<char> {
    corpus
        .records()
        .iter()
        .filter_map(|r| r.variant(language, SignalKind::Base))
        .flat_map(|t| t.chars().filter(|c| !c.is_whitespace()))
        .collect()
}
