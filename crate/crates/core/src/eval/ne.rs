use std::collections::BTreeMap;

use crate::error::Result;

/// Extracts (surface, type) entities from a sentence.
pub trait NeTagger {
    fn extract(&self, text: &str) -> Vec<(String, String)>;
}

/// Exact-match gazetteer over whitespace tokens, longest span first.
#[derive(Debug, Clone, Default)]
pub struct GazetteerTagger {
    entries: BTreeMap<Vec<String>, String>,
    max_span: usize,
}

impl GazetteerTagger {
    pub fn new(gazetteer: &BTreeMap<String, String>) -> Self {
        let entries: BTreeMap<Vec<String>, String> = gazetteer
            .iter()
            .map(|(surface, ty)| {
                (
                    surface.split_whitespace().map(String::from).collect(),
                    ty.clone(),
                )
            })
            .filter(|(k, _): &(Vec<String>, String)| !k.is_empty())
            .collect();
        let max_span = entries.keys().map(Vec::len).max().unwrap_or(0);
        GazetteerTagger { entries, max_span }
    }
}

impl NeTagger for GazetteerTagger {
    fn extract(&self, text: &str) -> Vec<(String, String)> {
        let words: Vec<String> = text.split_whitespace().map(String::from).collect();
        let mut found = Vec::new();
        let mut i = 0;
        'outer: while i < words.len() {
            for span in (1..=self.max_span.min(words.len() - i)).rev() {
                if let Some(ty) = self.entries.get(&words[i..i + span]) {
                    found.push((words[i..i + span].join(" "), ty.clone()));
                    i += span;
                    continue 'outer;
                }
            }
            i += 1;
        }
        found
    }
}

/// Tagger choice: the built-in gazetteer or any external implementation.
pub enum NeTaggerSpec {
    Gazetteer(GazetteerTagger),
    External(Box<dyn NeTagger>),
}

impl NeTaggerSpec {
    pub fn gazetteer(entries: &BTreeMap<String, String>) -> Self {
        NeTaggerSpec::Gazetteer(GazetteerTagger::new(entries))
    }

    fn tagger(&self) -> &dyn NeTagger {
        match self {
            NeTaggerSpec::Gazetteer(g) => g,
            NeTaggerSpec::External(t) => t.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntityCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl EntityCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeScores {
    pub micro: EntityCounts,
    pub per_type: BTreeMap<String, EntityCounts>,
    /// Neither side contained any entity; F1 is reported as 0.
    pub no_entities: bool,
}

impl NeScores {
    pub fn precision(&self) -> f64 {
        self.micro.precision()
    }

    pub fn recall(&self) -> f64 {
        self.micro.recall()
    }

    pub fn f1(&self) -> f64 {
        self.micro.f1()
    }
}

/// Per-type TP/FP/FN for one sentence under multiset matching.
pub fn count_entities(
    hyp: &[(String, String)],
    reference: &[(String, String)],
) -> BTreeMap<String, EntityCounts> {
    let mut h: BTreeMap<&(String, String), usize> = BTreeMap::new();
    let mut r: BTreeMap<&(String, String), usize> = BTreeMap::new();
    for e in hyp {
        *h.entry(e).or_default() += 1;
    }
    for e in reference {
        *r.entry(e).or_default() += 1;
    }
    let mut out: BTreeMap<String, EntityCounts> = BTreeMap::new();
    for (e, &c) in &h {
        let m = c.min(r.get(e).copied().unwrap_or(0));
        let slot = out.entry(e.1.clone()).or_default();
        slot.tp += m;
        slot.fp += c - m;
    }
    for (e, &c) in &r {
        let m = c.min(h.get(e).copied().unwrap_or(0));
        out.entry(e.1.clone()).or_default().fn_ += c - m;
    }
    out
}

pub fn ne_f1(
    hypotheses: &[String],
    references: &[String],
    tagger: &NeTaggerSpec,
) -> Result<NeScores> {
    if hypotheses.len() != references.len() {
        return Err(crate::Error::Shape(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let tagger = tagger.tagger();
    let mut per_type: BTreeMap<String, EntityCounts> = BTreeMap::new();
    for (h, r) in hypotheses.iter().zip(references) {
        for (ty, c) in count_entities(&tagger.extract(h), &tagger.extract(r)) {
            let slot = per_type.entry(ty).or_default();
            slot.tp += c.tp;
            slot.fp += c.fp;
            slot.fn_ += c.fn_;
        }
    }
    let mut micro = EntityCounts::default();
    for c in per_type.values() {
        micro.tp += c.tp;
        micro.fp += c.fp;
        micro.fn_ += c.fn_;
    }
    let no_entities = micro.tp + micro.fp + micro.fn_ == 0;
    Ok(NeScores {
        micro,
        per_type,
        no_entities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaz() -> NeTaggerSpec {
        let g: BTreeMap<String, String> = [
            ("Modi", "PER"),
            ("Delhi", "LOC"),
            ("Mumbai", "LOC"),
            ("New Delhi", "LOC"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        NeTaggerSpec::gazetteer(&g)
    }

    #[test]
    fn half_match_example() {
        let s = ne_f1(
            &["Modi visited Delhi".into()],
            &["Modi visited Mumbai".into()],
            &gaz(),
        )
        .unwrap();
        assert_eq!(
            s.micro,
            EntityCounts {
                tp: 1,
                fp: 1,
                fn_: 1
            }
        );
        assert_eq!((s.precision(), s.recall(), s.f1()), (0.5, 0.5, 0.5));
        assert_eq!(s.per_type["PER"].f1(), 1.0);
        assert_eq!(s.per_type["LOC"].f1(), 0.0);
    }

    #[test]
    fn longest_span_wins() {
        let t = GazetteerTagger::new(
            &[
                ("Delhi".to_string(), "LOC".to_string()),
                ("New Delhi".into(), "LOC".into()),
            ]
            .into_iter()
            .collect(),
        );
        assert_eq!(
            t.extract("to New Delhi now"),
            vec![("New Delhi".to_string(), "LOC".to_string())]
        );
    }

    #[test]
    fn empty_both_sides_flagged() {
        let s = ne_f1(&["nothing here".into()], &["none".into()], &gaz()).unwrap();
        assert!(s.no_entities);
        assert_eq!(s.f1(), 0.0);
    }

    #[test]
    fn identical_is_perfect() {
        let x = vec!["Modi in Delhi".to_string(), "Mumbai".to_string()];
        let s = ne_f1(&x, &x, &gaz()).unwrap();
        assert_eq!(s.f1(), 1.0);
        assert!(!s.no_entities);
    }
}
