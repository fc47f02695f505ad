//! Fixtures shared by the criterion benches in `benches/`.

use std::sync::Arc;

use scriptmix_core::corpus::{
    build_training_mixture, generate_synthetic_family, train_bpe, Example, SyntheticFamilyConfig,
};
use scriptmix_core::model::{init_params, Model, ModelConfig};
use scriptmix_core::translit::{augment_corpus, signal_tag};
use scriptmix_core::{MultiwayCorpus, RuleTable, SignalKind, SubwordModel};

pub struct Fixture {
    pub corpus: MultiwayCorpus,
    pub ipa_table: RuleTable,
    pub subwords: SubwordModel,
    pub examples: Vec<Example>,
    pub model: Arc<Model>,
}

/// A 200-record synthetic family with ipa variants, a 600-token subword
/// model and an untrained model of the given width.
pub fn fixture(dim: usize, layers: usize) -> Fixture {
    let family = generate_synthetic_family(&SyntheticFamilyConfig {
        corpus_size: 200,
        ..Default::default()
    })
    .expect("valid synthetic config");
    let tables = family.rules.for_kind(SignalKind::Ipa);
    let corpus = augment_corpus(&family.corpus, &tables, SignalKind::Ipa, &[])
        .expect("tables cover every language");
    let tags: Vec<String> = corpus
        .languages()
        .iter()
        .flat_map(|l| SignalKind::ALL.map(|k| signal_tag(l, k)))
        .collect();
    let subwords = train_bpe(&corpus.all_texts(), 600, &tags).expect("vocab fits");
    let examples = build_training_mixture(&corpus, &[SignalKind::Base].into(), &subwords)
        .expect("base variants present");
    let config = ModelConfig::tiny(subwords.vocab_size(), layers, dim, 2 * dim, 4);
    let model = Arc::new(Model {
        params: init_params(&config, 1).expect("valid model config"),
        config,
        vocab_hash: subwords.vocab_hash(),
    });
    Fixture {
        ipa_table: tables["l0"].clone(),
        corpus,
        subwords,
        examples,
        model,
    }
}
