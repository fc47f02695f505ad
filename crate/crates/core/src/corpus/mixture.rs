use std::collections::BTreeSet;

use crate::corpus::{MultiwayCorpus, SubwordModel};
use crate::decode::concat_with_sep;
use crate::error::{Error, Result};
use crate::translit::SignalKind;

/// How a record's signals are presented to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputLayout {
    /// One example per signal kind, each with its own tag (single encoder).
    Mixture(Vec<SignalKind>),
    /// All signals in one sequence, tag-prefixed and separated by SEP.
    Concat(Vec<SignalKind>),
    /// One tag-prefixed sequence per encoder.
    MultiEncoder(Vec<SignalKind>),
}

impl InputLayout {
    pub fn kinds(&self) -> &[SignalKind] {
        match self {
            InputLayout::Mixture(k) | InputLayout::Concat(k) | InputLayout::MultiEncoder(k) => k,
        }
    }

    pub fn num_encoders(&self) -> usize {
        match self {
            InputLayout::MultiEncoder(k) => k.len(),
            _ => 1,
        }
    }
}

/// A tokenized training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub record: usize,
    /// Source language; the translation direction is `language -> target`.
    pub language: String,
    /// Signal kinds feeding this example, in input order.
    pub kinds: Vec<SignalKind>,
    /// One sequence per encoder.
    pub sources: Vec<Vec<u32>>,
    /// Target subwords without BOS/EOS.
    pub target: Vec<u32>,
}

impl Example {
    pub fn num_tokens(&self) -> usize {
        self.sources.iter().map(Vec::len).sum::<usize>() + self.target.len() + 1
    }
}

/// `[tag] + subwords` for one variant of one record.
pub fn tagged_source(
    corpus: &MultiwayCorpus,
    record: usize,
    language: &str,
    kind: SignalKind,
    model: &SubwordModel,
) -> Result<Vec<u32>> {
    let text = corpus.records()[record]
        .variant(language, kind)
        .ok_or_else(|| Error::MissingVariant {
            record,
            language: language.to_string(),
            kind: kind.to_string(),
        })?;
    let mut ids = vec![model.tag_id(language, kind)?];
    ids.extend(model.encode(text));
    Ok(ids)
}

/// Tokenizes `corpus` under `layout`; examples are ordered by record, then
/// language, then kind. Languages a record has no text for are skipped.
pub fn build_examples(
    corpus: &MultiwayCorpus,
    layout: &InputLayout,
    model: &SubwordModel,
) -> Result<Vec<Example>> {
    if layout.kinds().is_empty() {
        return Err(Error::Config("input layout names no signal kinds".into()));
    }
    let mut out = Vec::new();
    for record in corpus.records() {
        let target = model.encode(&record.target);
        for lang in corpus.present_languages(record.id) {
            let tagged = |k: SignalKind| tagged_source(corpus, record.id, lang, k, model);
            match layout {
                InputLayout::Mixture(kinds) => {
                    for &k in kinds {
                        out.push(Example {
                            record: record.id,
                            language: lang.clone(),
                            kinds: vec![k],
                            sources: vec![tagged(k)?],
                            target: target.clone(),
                        });
                    }
                }
                InputLayout::Concat(kinds) => {
                    let parts = kinds
                        .iter()
                        .map(|&k| tagged(k))
                        .collect::<Result<Vec<_>>>()?;
                    out.push(Example {
                        record: record.id,
                        language: lang.clone(),
                        kinds: kinds.clone(),
                        sources: vec![concat_with_sep(&parts)],
                        target: target.clone(),
                    });
                }
                InputLayout::MultiEncoder(kinds) => {
                    let parts = kinds
                        .iter()
                        .map(|&k| tagged(k))
                        .collect::<Result<Vec<_>>>()?;
                    out.push(Example {
                        record: record.id,
                        language: lang.clone(),
                        kinds: kinds.clone(),
                        sources: parts,
                        target: target.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// One example per (record, language, kind); all kinds of a record share the
/// same target sequence.
pub fn build_training_mixture(
    corpus: &MultiwayCorpus,
    kinds: &BTreeSet<SignalKind>,
    model: &SubwordModel,
) -> Result<Vec<Example>> {
    build_examples(
        corpus,
        &InputLayout::Mixture(kinds.iter().copied().collect()),
        model,
    )
}
