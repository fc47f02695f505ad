//! Byte-pair-encoding subword model over whitespace-delimited words.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::translit::{signal_tag, SignalKind};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;

/// Appended to the last symbol of every word.
pub const END_OF_WORD: &str = "</w>";

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<sep>"];
const FORMAT: &str = "#subword-model v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordModel {
    reserved: Vec<String>,
    inventory: Vec<String>,
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    // (left id, right id) -> (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn inventory_of<S: AsRef<str>>(texts: &[S]) -> Vec<String> {
    let mut chars: Vec<char> = texts
        .iter()
        .flat_map(|t| {
            t.as_ref()
                .chars()
                .filter(|c| !c.is_whitespace())
                .collect::<Vec<_>>()
        })
        .collect();
    chars.sort_unstable();
    chars.dedup();
    let mut inv: Vec<String> = chars
        .iter()
        .flat_map(|c| [c.to_string(), format!("{c}{END_OF_WORD}")])
        .collect();
    inv.sort();
    inv
}

/// Reserved token list: the five specials followed by the given tags.
pub fn reserved_tokens(tags: &[String]) -> Vec<String> {
    let mut out: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    for tag in tags {
        if !out.contains(tag) {
            out.push(tag.clone());
        }
    }
    out
}

/// Learns merges until the vocabulary holds `vocab_size` tokens or no
/// adjacent pair remains. Ties in pair frequency go to the lexicographically
/// smallest pair.
pub fn train_bpe<S: AsRef<str>>(
    texts: &[S],
    vocab_size: usize,
    tags: &[String],
) -> Result<SubwordModel> {
    let reserved = reserved_tokens(tags);
    let inventory = inventory_of(texts);
    let floor = reserved.len() + inventory.len();
    if vocab_size < floor {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is below reserved + inventory = {floor}"
        )));
    }

    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for t in texts {
        for w in t.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }

    let mut symbols: Vec<String> = inventory.clone();
    let mut symbol_ids: HashMap<String, u32> = symbols
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();
    let mut words: Vec<(Vec<u32>, usize)> = word_freq
        .iter()
        .map(|(w, &f)| (word_symbols(w).iter().map(|s| symbol_ids[s]).collect(), f))
        .collect();

    let mut merges = Vec::new();
    let mut vocab_len = floor;
    while vocab_len < vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (syms, f) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += f;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                // smaller pair wins, so compare reversed
                let ka = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                let kb = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((left, right), _)) = best else {
            break;
        };
        let merged = format!("{}{}", symbols[left as usize], symbols[right as usize]);
        let merged_id = match symbol_ids.get(&merged) {
            Some(&id) => id,
            None => {
                let id = symbols.len() as u32;
                symbols.push(merged.clone());
                symbol_ids.insert(merged, id);
                vocab_len += 1;
                id
            }
        };
        merges.push((
            symbols[left as usize].clone(),
            symbols[right as usize].clone(),
        ));
        for (syms, _) in &mut words {
            apply_merge(syms, left, right, merged_id);
        }
    }
    Ok(SubwordModel::from_parts(reserved, inventory, merges))
}

fn apply_merge(syms: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut i = 0;
    let mut out = Vec::with_capacity(syms.len());
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

impl SubwordModel {
    fn from_parts(
        reserved: Vec<String>,
        inventory: Vec<String>,
        merges: Vec<(String, String)>,
    ) -> Self {
        let mut vocab: Vec<String> = Vec::new();
        let mut ids: HashMap<String, u32> = HashMap::new();
        let push = |tok: &str, vocab: &mut Vec<String>, ids: &mut HashMap<String, u32>| {
            if !ids.contains_key(tok) {
                ids.insert(tok.to_string(), vocab.len() as u32);
                vocab.push(tok.to_string());
            }
        };
        for t in reserved.iter().chain(&inventory) {
            push(t, &mut vocab, &mut ids);
        }
        let mut ranks = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let merged = format!("{l}{r}");
            push(&merged, &mut vocab, &mut ids);
            ranks
                .entry((ids[l], ids[r]))
                .or_insert((rank, ids[&merged]));
        }
        SubwordModel {
            reserved,
            inventory,
            merges,
            vocab,
            ids,
            ranks,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_reserved(&self) -> usize {
        self.reserved.len()
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < self.reserved.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Id of the `__lang[_kind]__` tag.
    pub fn tag_id(&self, language: &str, kind: SignalKind) -> Result<u32> {
        let tag = signal_tag(language, kind);
        match self.ids.get(&tag) {
            Some(&id) if self.is_reserved(id) => Ok(id),
            _ => Err(Error::Config(format!("tag `{tag}` not in subword model"))),
        }
    }

    /// Stable digest of the vocabulary, used to check that ensemble
    /// components share a target vocabulary.
    pub fn vocab_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.vocab {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word_symbols(word)
            .iter()
            .map(|s| self.ids.get(s).copied().unwrap_or(UNK))
            .collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| {
                    self.ranks
                        .get(&(p[0], p[1]))
                        .map(|&(rank, m)| (rank, p[0], p[1], m))
                })
                .min();
            let Some((_, l, r, m)) = best else { break };
            apply_merge(&mut syms, l, r, m);
        }
        out.extend(syms);
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange(id))?;
            if self.is_reserved(id) {
                continue;
            }
            match tok.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    out.push_str(stem);
                    out.push(' ');
                }
                None => out.push_str(tok),
            }
        }
        Ok(out.trim_end().to_string())
    }

    /// Subword strings for `ids`, dropping reserved tokens.
    pub fn pieces(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !self.is_reserved(id))
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(FORMAT);
        out.push('\n');
        for t in &self.reserved {
            let _ = writeln!(out, "reserved\t{t}");
        }
        for t in &self.inventory {
            let _ = writeln!(out, "symbol\t{t}");
        }
        for (l, r) in &self.merges {
            let _ = writeln!(out, "merge\t{l}\t{r}");
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == FORMAT => {}
            _ => return Err(Error::parse(origin, 1, format!("expected `{FORMAT}`"))),
        }
        let (mut reserved, mut inventory, mut merges) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            match (cols[0], cols.len()) {
                ("reserved", 2) => reserved.push(cols[1].to_string()),
                ("symbol", 2) => inventory.push(cols[1].to_string()),
                ("merge", 3) => merges.push((cols[1].to_string(), cols[2].to_string())),
                _ => return Err(Error::parse(origin, i + 1, "malformed subword model line")),
            }
        }
        if reserved.len() < SPECIALS.len() || reserved[..SPECIALS.len()] != SPECIALS {
            return Err(Error::parse(
                origin,
                2,
                "reserved tokens must start with the specials",
            ));
        }
        Ok(SubwordModel::from_parts(reserved, inventory, merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(texts: &[&str], extra: usize) -> SubwordModel {
        let floor = reserved_tokens(&[]).len() + inventory_of(texts).len();
        train_bpe(texts, floor + extra, &[]).unwrap()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let m = model(&["ab ab ab c"], 1);
        assert_eq!(m.merges()[0], ("a".to_string(), "b</w>".to_string()));
    }

    #[test]
    fn repeated_letter_word() {
        let m = model(&["aaaa"], 1);
        assert_eq!(m.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn floor_vocab_means_no_merges() {
        let m = model(&["ab ab ab c"], 0);
        assert!(m.merges().is_empty());
        assert_eq!(
            m.encode("ab"),
            vec![m.id("a").unwrap(), m.id("b</w>").unwrap()]
        );
    }

    #[test]
    fn too_small_vocab_is_config_error() {
        let err = train_bpe(&["abc"], 3, &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn merged_word_encodes_to_one_token() {
        let m = model(&["ab ab ab c"], 1);
        let ids = m.encode("ab");
        assert_eq!(ids.len(), 1);
        assert_eq!(m.token(ids[0]), Some("ab</w>"));
    }

    #[test]
    fn encode_edge_cases() {
        let m = model(&["ab ab ab c"], 1);
        assert!(m.encode("").is_empty());
        assert_eq!(m.encode("c").len(), 1);
        assert_eq!(m.encode("z"), vec![UNK]);
    }

    #[test]
    fn decode_drops_reserved_and_checks_range() {
        let m = model(&["ab ab ab c"], 1);
        let c = m.encode("c")[0];
        assert_eq!(m.decode(&[PAD, c, EOS]).unwrap(), "c");
        assert_eq!(m.decode(&[]).unwrap(), "");
        assert!(matches!(
            m.decode(&[9999]),
            Err(Error::TokenOutOfRange(9999))
        ));
    }

    #[test]
    fn reserved_tokens_take_lowest_ids() {
        let tags = vec!["__aa__".to_string(), "__aa_ipa__".to_string()];
        let m = train_bpe(&["x y"], 40, &tags).unwrap();
        assert_eq!(m.id("<pad>"), Some(PAD));
        assert_eq!(m.id("<sep>"), Some(SEP));
        assert_eq!(m.tag_id("aa", SignalKind::Ipa).unwrap(), 6);
        assert!(m.is_reserved(6) && !m.is_reserved(7));
        // merges never reproduce a reserved token
        for id in 7..m.vocab_size() as u32 {
            assert!(!SPECIALS.contains(&m.token(id).unwrap()));
        }
    }

    #[test]
    fn file_round_trip() {
        let m = model(&["the cat sat on the mat", "ще щось"], 12);
        let back = SubwordModel::parse(&m.to_text(), "mem").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.vocab_hash(), m.vocab_hash());
    }

    proptest! {
        #[test]
        fn round_trip_over_inventory(words in proptest::collection::vec("[abcдеж]{1,6}", 0..8)) {
            let m = model(&["abc abc дежа ажд bca"], 10);
            let text = words.join(" ");
            prop_assert_eq!(m.decode(&m.encode(&text)).unwrap(), text);
        }
    }
}
