//! Rule-table transliteration.
//!
//! A [`RuleTable`] is an ordered list of grapheme rewrites. Application is a
//! greedy left-to-right scan that replaces the longest rule source matching
//! at the current position and passes unmatched characters through. The same
//! engine produces phonetic (`ipa`), romanized (`romani`) and in-family
//! script (`transl`) renderings; only the table differs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::MultiwayCorpus;
use crate::error::{Error, Result};

/// The kind of input signal a source variant carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SignalKind {
    Base,
    Ipa,
    Romani,
    Transl,
}

impl SignalKind {
    pub const ALL: [SignalKind; 4] = [
        SignalKind::Base,
        SignalKind::Ipa,
        SignalKind::Romani,
        SignalKind::Transl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::Base => "base",
            SignalKind::Ipa => "ipa",
            SignalKind::Romani => "romani",
            SignalKind::Transl => "transl",
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "base" => Ok(SignalKind::Base),
            "ipa" => Ok(SignalKind::Ipa),
            "romani" => Ok(SignalKind::Romani),
            "transl" => Ok(SignalKind::Transl),
            other => Err(Error::Invalid(format!("unknown signal kind `{other}`"))),
        }
    }
}

/// The special source token announcing language and signal, e.g. `__bn__`
/// or `__bn_ipa__`.
pub fn signal_tag(language: &str, kind: SignalKind) -> String {
    match kind {
        SignalKind::Base => format!("__{language}__"),
        other => format!("__{language}_{other}__"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub source: String,
    pub target: String,
}

/// Ordered grapheme rewrite rules from one script to another.
///
/// Rules are kept sorted by descending source length (in characters), ties
/// broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTable {
    rules: Vec<Rule>,
    source_script: String,
    target_script: String,
    kind: SignalKind,
    // first char -> indices into `rules`, preserving rule order
    index: HashMap<char, Vec<usize>>,
}

fn rule_order(a: &Rule, b: &Rule) -> std::cmp::Ordering {
    b.source
        .chars()
        .count()
        .cmp(&a.source.chars().count())
        .then_with(|| a.source.cmp(&b.source))
}

impl RuleTable {
    /// Builds a table, normalizing rule order and rejecting empty or
    /// duplicate sources.
    pub fn new(
        rules: impl IntoIterator<Item = (String, String)>,
        source_script: impl Into<String>,
        target_script: impl Into<String>,
        kind: SignalKind,
    ) -> Result<Self> {
        let mut rules: Vec<Rule> = rules
            .into_iter()
            .map(|(source, target)| Rule { source, target })
            .collect();
        if rules.iter().any(|r| r.source.is_empty()) {
            return Err(Error::Validation("empty source side".into()));
        }
        rules.sort_by(rule_order);
        if let Some(w) = rules.windows(2).find(|w| w[0].source == w[1].source) {
            return Err(Error::Validation(format!(
                "duplicate source sequence `{}`",
                w[0].source
            )));
        }
        let mut index: HashMap<char, Vec<usize>> = HashMap::new();
        for (i, rule) in rules.iter().enumerate() {
            let first = rule.source.chars().next().expect("non-empty source");
            index.entry(first).or_default().push(i);
        }
        Ok(RuleTable {
            rules,
            source_script: source_script.into(),
            target_script: target_script.into(),
            kind,
            index,
        })
    }

    pub fn empty(kind: SignalKind) -> Self {
        RuleTable::new(Vec::new(), "", "", kind).expect("empty table is valid")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn kind(&self) -> SignalKind {
        self.kind
    }

    pub fn source_script(&self) -> &str {
        &self.source_script
    }

    pub fn target_script(&self) -> &str {
        &self.target_script
    }

    /// True if stored rules respect the length-then-lexicographic order.
    pub fn is_sorted(&self) -> bool {
        self.rules
            .windows(2)
            .all(|w| rule_order(&w[0], &w[1]) == std::cmp::Ordering::Less)
    }

    /// Parses the rule-table text format. `origin` names the source in errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut source_script = String::new();
        let mut target_script = String::new();
        let mut kind = None;
        let mut rules = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((key, value)) = comment.split_once(':') {
                    let value = value.trim();
                    match key.trim() {
                        "source_script" => source_script = value.to_string(),
                        "target_script" => target_script = value.to_string(),
                        "kind" => {
                            kind = Some(
                                value
                                    .parse::<SignalKind>()
                                    .map_err(|e| Error::parse(origin, lineno, e.to_string()))?,
                            )
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("expected 2 tab-separated columns, found {}", cols.len()),
                ));
            }
            if cols[0].is_empty() {
                return Err(Error::parse(origin, lineno, "empty source side"));
            }
            rules.push((cols[0].to_string(), cols[1].to_string()));
        }
        let kind = kind.unwrap_or(SignalKind::Transl);
        RuleTable::new(rules, source_script, target_script, kind).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{origin}: {msg}")),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# rule-table v1\n");
        out.push_str(&format!("# source_script: {}\n", self.source_script));
        out.push_str(&format!("# target_script: {}\n", self.target_script));
        out.push_str(&format!("# kind: {}\n", self.kind));
        for rule in &self.rules {
            out.push_str(&rule.source);
            out.push('\t');
            out.push_str(&rule.target);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Rewrites `text` by greedy longest match.
    pub fn apply(&self, text: &str) -> String {
        let chars: Vec<char> = text.chars().collect();
        let mut out = String::with_capacity(text.len());
        let mut pos = 0;
        while pos < chars.len() {
            match self.match_at(&chars, pos) {
                Some((rule, consumed)) => {
                    out.push_str(&rule.target);
                    pos += consumed;
                }
                None => {
                    out.push(chars[pos]);
                    pos += 1;
                }
            }
        }
        out
    }

    fn match_at(&self, chars: &[char], pos: usize) -> Option<(&Rule, usize)> {
        let candidates = self.index.get(&chars[pos])?;
        candidates.iter().find_map(|&i| {
            let rule = &self.rules[i];
            let mut n = 0;
            for c in rule.source.chars() {
                if chars.get(pos + n) != Some(&c) {
                    return None;
                }
                n += 1;
            }
            Some((rule, n))
        })
    }
}

pub fn load_rule_table(path: &Path) -> Result<RuleTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RuleTable::parse(&text, &path.display().to_string())
}

pub fn transliterate(text: &str, table: &RuleTable) -> String {
    table.apply(text)
}

/// Adds a `kind` variant to every record by transliterating its base text.
///
/// Languages listed in `exempt` receive a verbatim copy of their base text
/// (e.g. a language already written in the in-family target script).
pub fn augment_corpus(
    corpus: &MultiwayCorpus,
    tables: &BTreeMap<String, RuleTable>,
    kind: SignalKind,
    exempt: &[String],
) -> Result<MultiwayCorpus> {
    if kind == SignalKind::Base {
        return Ok(corpus.clone());
    }
    for lang in corpus.languages() {
        if exempt.contains(lang) {
            continue;
        }
        match tables.get(lang) {
            None => {
                return Err(Error::Config(format!(
                    "no {kind} rule table for language `{lang}`"
                )))
            }
            Some(t) if t.kind() != kind => {
                return Err(Error::Config(format!(
                    "rule table for `{lang}` has kind {}, expected {kind}",
                    t.kind()
                )))
            }
            Some(_) => {}
        }
    }
    let mut out = corpus.clone();
    for record in out.records_mut() {
        let mut added = Vec::new();
        for ((lang, k), text) in &record.variants {
            if *k != SignalKind::Base {
                continue;
            }
            let rendered = if exempt.contains(lang) {
                text.clone()
            } else {
                tables[lang].apply(text)
            };
            added.push(((lang.clone(), kind), rendered));
        }
        record.variants.extend(added);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rules: &[(&str, &str)]) -> RuleTable {
        RuleTable::new(
            rules.iter().map(|(a, b)| (a.to_string(), b.to_string())),
            "latn",
            "cyrl",
            SignalKind::Transl,
        )
        .unwrap()
    }

    #[test]
    fn longer_sources_sort_first() {
        let t = RuleTable::parse("s\tс\nsh\tш\n", "mem").unwrap();
        assert_eq!(t.rules()[0].source, "sh");
        assert_eq!(t.rules()[1].source, "s");
        assert!(t.is_sorted());
    }

    #[test]
    fn empty_file_is_identity() {
        let t = RuleTable::parse("", "mem").unwrap();
        assert!(t.is_empty());
        assert_eq!(t.apply("anything at all"), "anything at all");
    }

    #[test]
    fn empty_source_rejected() {
        let err = RuleTable::parse("\tx\n", "mem").unwrap_err();
        assert!(err.to_string().contains("empty source side"), "{err}");
    }

    #[test]
    fn wrong_column_count_names_line() {
        let err = RuleTable::parse("# kind: ipa\na\tb\nc\n", "t.tsv").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_source_rejected() {
        let err = RuleTable::parse("a\tb\na\tc\n", "mem").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn greedy_longest_match() {
        let t = table(&[("sh", "ш"), ("s", "с"), ("h", "х")]);
        assert_eq!(transliterate("shs", &t), "шс");
        assert_eq!(transliterate("", &t), "");
        // unmapped characters pass through
        assert_eq!(transliterate("s1h!", &t), "с1х!");
    }

    #[test]
    fn header_round_trip() {
        let t = RuleTable::parse(
            "# source_script: beng\n# target_script: latn\n# kind: romani\nক\tka\n",
            "mem",
        )
        .unwrap();
        assert_eq!(t.kind(), SignalKind::Romani);
        assert_eq!(t.source_script(), "beng");
        let again = RuleTable::parse(&t.to_text(), "mem").unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn tags() {
        assert_eq!(signal_tag("bn", SignalKind::Base), "__bn__");
        assert_eq!(signal_tag("bn", SignalKind::Ipa), "__bn_ipa__");
    }
}
