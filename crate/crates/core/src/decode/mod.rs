//! Beam search over one model or an ensemble of (model, input signal)
//! components whose next-token log-probabilities are averaged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::corpus::{tagged_source, MultiwayCorpus, SubwordModel, EOS, SEP};
use crate::error::{Error, Result};
use crate::model::{encode_sources, next_token_logprobs, EncoderOutput, Model};
use crate::translit::SignalKind;

pub const DECODE_FORMAT: &str = "#decode v1";

/// Elementwise mean of log-probability vectors. Not renormalized.
///
/// Computed as a running mean so that `k` identical inputs return that input
/// exactly for any `k`.
pub fn ensemble_scores(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Invalid("no score vectors to average".into()))?;
    if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
        return Err(Error::Shape(format!(
            "score vectors differ in length: {} vs {}",
            first.len(),
            bad.len()
        )));
    }
    let mut mean = first.clone();
    for (i, v) in vectors.iter().enumerate().skip(1) {
        let n = (i + 1) as f64;
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += (x - *m) / n;
        }
    }
    Ok(mean)
}

/// Joins signals with a SEP token between neighbours.
pub fn concat_with_sep(signals: &[Vec<u32>]) -> Vec<u32> {
    let mut out = Vec::with_capacity(signals.iter().map(Vec::len).sum::<usize>() + signals.len());
    for (i, s) in signals.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(s);
    }
    out
}

/// What a component feeds its encoder(s).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ComponentInput {
    Signal(SignalKind),
    Concat(Vec<SignalKind>),
    /// One signal per encoder of a multi-encoder model.
    MultiEncoder(Vec<SignalKind>),
}

impl ComponentInput {
    pub fn kinds(&self) -> Vec<SignalKind> {
        match self {
            ComponentInput::Signal(k) => vec![*k],
            ComponentInput::Concat(k) | ComponentInput::MultiEncoder(k) => k.clone(),
        }
    }

    /// Encoder inputs built from tag-prefixed per-kind sequences.
    pub fn encoder_inputs(
        &self,
        sources: &BTreeMap<SignalKind, Vec<u32>>,
    ) -> Result<Vec<Vec<u32>>> {
        let get = |k: &SignalKind| -> Result<Vec<u32>> {
            let s = sources
                .get(k)
                .ok_or_else(|| Error::Invalid(format!("no `{k}` source supplied")))?;
            if s.is_empty() {
                return Err(Error::Invalid(format!("empty `{k}` source")));
            }
            Ok(s.clone())
        };
        Ok(match self {
            ComponentInput::Signal(k) => vec![get(k)?],
            ComponentInput::Concat(kinds) => {
                vec![concat_with_sep(
                    &kinds.iter().map(get).collect::<Result<Vec<_>>>()?,
                )]
            }
            ComponentInput::MultiEncoder(kinds) => {
                kinds.iter().map(get).collect::<Result<Vec<_>>>()?
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct Component {
    pub model: Arc<Model>,
    pub input: ComponentInput,
}

/// Components decoded together by averaging their log-probabilities.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    components: Vec<Component>,
    vocab_hash: String,
    system_id: String,
}

impl EnsembleSpec {
    /// All components must share one target vocabulary. A multi-encoder
    /// component is decoded on its own (one forward, no ensembling).
    pub fn new(system_id: impl Into<String>, components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("ensemble needs at least one component".into()))?;
        let vocab_hash = first.model.vocab_hash.clone();
        if components.iter().any(|c| c.model.vocab_hash != vocab_hash) {
            return Err(Error::Config(
                "ensemble components use different target vocabularies".into(),
            ));
        }
        if components.len() > 1
            && components
                .iter()
                .any(|c| matches!(c.input, ComponentInput::MultiEncoder(_)))
        {
            return Err(Error::Config(
                "multi-encoder models are not ensembled".into(),
            ));
        }
        for c in &components {
            let want = match &c.input {
                ComponentInput::MultiEncoder(k) => k.len(),
                _ => 1,
            };
            if c.model.config.num_encoders != want {
                return Err(Error::Config(format!(
                    "component input needs {want} encoder(s), model has {}",
                    c.model.config.num_encoders
                )));
            }
        }
        Ok(EnsembleSpec {
            components,
            vocab_hash,
            system_id: system_id.into(),
        })
    }

    /// `k` copies of one component.
    pub fn replicated(
        system_id: impl Into<String>,
        component: Component,
        k: usize,
    ) -> Result<Self> {
        Self::new(system_id, vec![component; k])
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn system_id(&self) -> &str {
        &self.system_id
    }

    /// True when every component shares one parameter set.
    pub fn is_self_ensemble(&self) -> bool {
        let first = &self.components[0].model;
        self.components.iter().all(|c| Arc::ptr_eq(&c.model, first))
    }

    /// Every signal kind some component needs.
    pub fn required_kinds(&self) -> Vec<SignalKind> {
        let mut kinds: Vec<SignalKind> = self
            .components
            .iter()
            .flat_map(|c| c.input.kinds())
            .collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamParams {
    pub beam: usize,
    /// Maximum hypothesis length in tokens, EOS included.
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for BeamParams {
    fn default() -> Self {
        BeamParams {
            beam: 5,
            max_len: 64,
            length_penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens; a finished hypothesis ends with EOS.
    pub tokens: Vec<u32>,
    /// Sum of per-step averaged log-probabilities.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn normalized_score(&self, length_penalty: f64) -> f64 {
        self.score / (self.tokens.len().max(1) as f64).powf(length_penalty)
    }

    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// All final hypotheses, best first.
    pub nbest: Vec<Hypothesis>,
}

/// Next-token log-probabilities given a prefix.
pub trait StepScorer {
    fn next_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

struct ModelScorer<'a> {
    model: &'a Model,
    encoded: Vec<EncoderOutput>,
}

impl StepScorer for ModelScorer<'_> {
    fn next_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        next_token_logprobs(
            &self.model.params,
            &self.model.config,
            &self.encoded,
            prefix,
        )
    }
}

/// Beam search where each step's score vector is the mean of all scorers'
/// log-probabilities. Hypotheses end at `eos` or at `max_len` tokens and are
/// ranked by `score / len^length_penalty`. Candidate ties go to the earlier
/// hypothesis, then the lower token id.
pub fn beam_search_scorers(
    scorers: &[&dyn StepScorer],
    eos: u32,
    params: BeamParams,
) -> Result<BeamOutput> {
    if params.beam == 0 || params.max_len == 0 {
        return Err(Error::Invalid("beam and max_len must be positive".into()));
    }
    if scorers.is_empty() {
        return Err(Error::Invalid("no scorers".into()));
    }
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..params.max_len {
        let last_step = step + 1 == params.max_len;
        // (score, hypothesis index, token)
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (h, hyp) in active.iter().enumerate() {
            let per_scorer = scorers
                .iter()
                .map(|s| s.next_logprobs(&hyp.tokens))
                .collect::<Result<Vec<_>>>()?;
            let avg = ensemble_scores(&per_scorer)?;
            candidates.extend(
                avg.iter()
                    .enumerate()
                    .map(|(t, &lp)| (hyp.score + lp, h, t as u32)),
            );
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(params.beam);
        for (score, h, tok) in candidates {
            if next.len() >= params.beam {
                break;
            }
            let mut tokens = active[h].tokens.clone();
            tokens.push(tok);
            let done = tok == eos || last_step;
            let hyp = Hypothesis {
                tokens,
                score,
                finished: done,
            };
            if done {
                finished.push(hyp);
                if last_step {
                    // the final step only ranks completions; no beam to fill
                    continue;
                }
            } else {
                next.push(hyp);
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
    }
    let lp = params.length_penalty;
    finished.sort_by(|a, b| {
        b.normalized_score(lp)
            .total_cmp(&a.normalized_score(lp))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let best = finished
        .first()
        .cloned()
        .ok_or_else(|| Error::Invalid("no hypothesis finished".into()))?;
    Ok(BeamOutput {
        best,
        nbest: finished,
    })
}

/// Decodes one sentence. `sources` maps each signal kind to its
/// tag-prefixed token sequence; every component encodes its own input.
pub fn beam_search(
    spec: &EnsembleSpec,
    sources: &BTreeMap<SignalKind, Vec<u32>>,
    params: BeamParams,
) -> Result<BeamOutput> {
    let mut scorers = Vec::with_capacity(spec.components.len());
    for c in &spec.components {
        let inputs = c.input.encoder_inputs(sources)?;
        let encoded = encode_sources(&c.model.params, &c.model.config, &inputs)?;
        scorers.push(ModelScorer {
            model: &c.model,
            encoded,
        });
    }
    let refs: Vec<&dyn StepScorer> = scorers.iter().map(|s| s as &dyn StepScorer).collect();
    beam_search_scorers(&refs, EOS, params)
}

/// Decodes with one model from explicit encoder inputs.
pub fn beam_search_inputs(
    model: &Model,
    inputs: &[Vec<u32>],
    params: BeamParams,
) -> Result<BeamOutput> {
    let encoded = encode_sources(&model.params, &model.config, inputs)?;
    let scorer = ModelScorer { model, encoded };
    beam_search_scorers(&[&scorer], EOS, params)
}

/// Decodes every (record, language) of `corpus` and detokenizes the result.
pub fn translate_corpus(
    spec: &EnsembleSpec,
    corpus: &MultiwayCorpus,
    subwords: &SubwordModel,
    params: BeamParams,
) -> Result<BTreeMap<(usize, String), String>> {
    if subwords.vocab_hash() != spec.vocab_hash() {
        return Err(Error::Config(
            "subword model does not match the ensemble vocabulary".into(),
        ));
    }
    let kinds = spec.required_kinds();
    let mut out = BTreeMap::new();
    for record in corpus.records() {
        for lang in corpus.languages() {
            let mut sources = BTreeMap::new();
            for &k in &kinds {
                sources.insert(k, tagged_source(corpus, record.id, lang, k, subwords)?);
            }
            let result = beam_search(spec, &sources, params)?;
            out.insert(
                (record.id, lang.clone()),
                subwords.decode(result.best.output())?,
            );
        }
    }
    Ok(out)
}

/// Decode output as TSV: `id language system text`.
pub fn decode_tsv(system_id: &str, outputs: &BTreeMap<(usize, String), String>) -> String {
    let mut s = String::new();
    s.push_str(DECODE_FORMAT);
    s.push('\n');
    for ((id, lang), text) in outputs {
        let _ = writeln!(s, "{id}\t{lang}\t{system_id}\t{text}");
    }
    s
}

/// Parses [`decode_tsv`] output back into `(system id, outputs)`.
pub fn parse_decode_tsv(
    text: &str,
    origin: &str,
) -> Result<(String, BTreeMap<(usize, String), String>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == DECODE_FORMAT => {}
        _ => {
            return Err(Error::parse(
                origin,
                1,
                format!("expected `{DECODE_FORMAT}`"),
            ))
        }
    }
    let mut system = String::new();
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.splitn(4, '\t').collect();
        if cols.len() != 4 {
            return Err(Error::parse(
                origin,
                i + 1,
                "expected 4 tab-separated columns",
            ));
        }
        let id = cols[0]
            .parse()
            .map_err(|_| Error::parse(origin, i + 1, format!("bad id `{}`", cols[0])))?;
        system = cols[2].to_string();
        out.insert((id, cols[1].to_string()), cols[3].to_string());
    }
    Ok((system, out))
}
