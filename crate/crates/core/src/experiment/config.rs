use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::system::SystemSpec;
use crate::corpus::{SyntheticFamilyConfig, CORPUS_FORMAT};
use crate::decode::BeamParams;
use crate::error::{Error, Result};
use crate::eval::BleuOptions;
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::translit::SignalKind;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "SCRIPTMIX_OUTPUT_ROOT";

/// A problem with a configuration, tied to the field that causes it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    Synthetic(SyntheticFamilyConfig),
    Files {
        sources: PathBuf,
        targets: PathBuf,
        gazetteer: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// sha256 of the configuration file bytes.
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub corpus: CorpusSource,
    /// External rule tables keyed by (language, kind).
    pub rules: BTreeMap<(String, SignalKind), PathBuf>,
    /// Languages copied verbatim instead of transliterated.
    pub exempt: Vec<String>,
    pub dev_size: usize,
    pub test_size: usize,
    /// Give each training record to a single language (round robin) so the
    /// languages see different sentences. Dev and test stay multi-way.
    pub partition_train: bool,
    pub bpe_vocab_size: usize,
    /// `vocab_size` is replaced by the trained subword vocabulary size.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub systems: Vec<SystemSpec>,
    pub fractions: Vec<f64>,
    pub curve_baseline: SystemSpec,
    pub curve_system: SystemSpec,
    /// Lower bound on optimizer steps per signal kind for each learning-curve
    /// run; a two-kind mixture gets twice as many.
    pub curve_min_steps: usize,
    pub seeds: Vec<u64>,
    pub beam: BeamParams,
    pub bleu: BleuOptions,
    /// Field-level problems found while reading the file.
    pub diagnostics: Vec<Diagnostic>,
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("bad list item `{s}`")))
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::parse(path.display().to_string(), 0, "config is not UTF-8"))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Parses `key=value` lines. Lines without `=` are a parse error; bad
    /// values and unknown keys become diagnostics. Relative paths resolve
    /// against `base_dir`.
    pub fn parse(text: &str, origin: &str, base_dir: &Path) -> Result<Self> {
        let resolve = |p: &str| {
            let p = Path::new(p.trim());
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let mut diags = Vec::new();
        let mut synth = SyntheticFamilyConfig::default();
        let mut synthetic = true;
        let mut sources = None;
        let mut targets = None;
        let mut gazetteer = None;
        let mut model = ModelConfig::tiny(0, 2, 64, 128, 4);
        let mut cfg = ExperimentConfig {
            config_hash: hex::encode(Sha256::digest(text.as_bytes())),
            output_dir: base_dir.join("out"),
            corpus: CorpusSource::Synthetic(synth.clone()),
            rules: BTreeMap::new(),
            exempt: Vec::new(),
            dev_size: 100,
            partition_train: false,
            test_size: 100,
            bpe_vocab_size: 1000,
            model: model.clone(),
            train: TrainConfig::default(),
            systems: vec![SystemSpec::Single(SignalKind::Base)],
            fractions: Vec::new(),
            curve_baseline: SystemSpec::Single(SignalKind::Base),
            curve_system: SystemSpec::SelfEnsemble(vec![SignalKind::Base, SignalKind::Ipa]),
            curve_min_steps: 0,
            seeds: vec![1],
            beam: BeamParams::default(),
            bleu: BleuOptions::default(),
            diagnostics: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(origin, i + 1, format!("expected key=value, got `{line}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let mut bad =
                |m: String| diags.push(Diagnostic::new(key, format!("line {}: {m}", i + 1)));
            macro_rules! num {
                ($slot:expr) => {
                    match value.parse() {
                        Ok(v) => $slot = v,
                        Err(_) => bad(format!("bad value `{value}`")),
                    }
                };
            }
            match key {
                "output_dir" => cfg.output_dir = resolve(value),
                "corpus" => match value {
                    "synthetic" => synthetic = true,
                    "files" => synthetic = false,
                    _ => bad(format!("expected `synthetic` or `files`, got `{value}`")),
                },
                "corpus.sources" => sources = Some(resolve(value)),
                "corpus.targets" => targets = Some(resolve(value)),
                "corpus.gazetteer" => gazetteer = Some(resolve(value)),
                "synth.num_languages" => num!(synth.num_languages),
                "synth.lexicon_size" => num!(synth.lexicon_size),
                "synth.corpus_size" => num!(synth.corpus_size),
                "synth.divergence_rate" => num!(synth.divergence_rate),
                "synth.num_entities" => num!(synth.num_entities),
                "synth.seed" => num!(synth.seed),
                "synth.sentence_len" => match list::<usize>(value).as_deref() {
                    Ok([lo, hi]) => synth.sentence_len = (*lo, *hi),
                    _ => bad(format!("expected `min,max`, got `{value}`")),
                },
                "translit.exempt" => {
                    cfg.exempt = value
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect()
                }
                "split.dev" => num!(cfg.dev_size),
                "split.test" => num!(cfg.test_size),
                "split.partition_train" => num!(cfg.partition_train),
                "bpe.vocab_size" => num!(cfg.bpe_vocab_size),
                "systems" => match list::<SystemSpec>(value) {
                    Ok(v) => cfg.systems = v,
                    Err(_) => {
                        for item in value.split(',').filter(|s| !s.trim().is_empty()) {
                            if let Err(e) = item.parse::<SystemSpec>() {
                                bad(e.to_string());
                            }
                        }
                    }
                },
                "fractions" => match list::<f64>(value) {
                    Ok(v) => cfg.fractions = v,
                    Err(m) => bad(m),
                },
                "seeds" => match list::<u64>(value) {
                    Ok(v) => cfg.seeds = v,
                    Err(m) => bad(m),
                },
                "curve.baseline" => match value.parse() {
                    Ok(v) => cfg.curve_baseline = v,
                    Err(e) => bad(format!("{e}")),
                },
                "curve.system" => match value.parse() {
                    Ok(v) => cfg.curve_system = v,
                    Err(e) => bad(format!("{e}")),
                },
                "curve.min_steps" => num!(cfg.curve_min_steps),
                "decode.beam" => num!(cfg.beam.beam),
                "decode.max_len" => num!(cfg.beam.max_len),
                "decode.length_penalty" => num!(cfg.beam.length_penalty),
                "eval.smoothing" => num!(cfg.bleu.smoothing),
                k => {
                    if let Some(k) = k.strip_prefix("model.") {
                        if let Err(e) = model.set(k, value) {
                            bad(e.to_string());
                        }
                    } else if let Some(k) = k.strip_prefix("train.") {
                        if let Err(e) = cfg.train.set(k, value) {
                            bad(e.to_string());
                        }
                    } else if let Some(rest) = k.strip_prefix("rules.") {
                        match rest
                            .rsplit_once('.')
                            .map(|(l, kind)| (l, kind.parse::<SignalKind>()))
                        {
                            Some((lang, Ok(kind))) if !lang.is_empty() => {
                                cfg.rules.insert((lang.to_string(), kind), resolve(value));
                            }
                            _ => bad("expected rules.<language>.<kind>".into()),
                        }
                    } else {
                        bad("unknown key".into());
                    }
                }
            }
        }
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                cfg.output_dir = PathBuf::from(root);
            }
        }
        cfg.corpus = if synthetic {
            CorpusSource::Synthetic(synth)
        } else {
            match (sources, targets) {
                (Some(sources), Some(targets)) => CorpusSource::Files {
                    sources,
                    targets,
                    gazetteer,
                },
                _ => {
                    diags.push(Diagnostic::new(
                        "corpus",
                        "file corpus needs corpus.sources and corpus.targets",
                    ));
                    CorpusSource::Files {
                        sources: PathBuf::new(),
                        targets: PathBuf::new(),
                        gazetteer,
                    }
                }
            }
        };
        model.vocab_size = model.vocab_size.max(1);
        cfg.model = model;
        cfg.diagnostics = diags;
        Ok(cfg)
    }

    /// Every signal kind some configured system needs.
    pub fn kinds(&self) -> BTreeSet<SignalKind> {
        self.systems
            .iter()
            .chain(if self.fractions.is_empty() {
                None
            } else {
                Some(&self.curve_baseline)
            })
            .chain(if self.fractions.is_empty() {
                None
            } else {
                Some(&self.curve_system)
            })
            .flat_map(|s| s.kinds())
            .collect()
    }

    /// Source languages, read from the corpus header for file corpora.
    pub fn languages(&self) -> Result<Vec<String>> {
        match &self.corpus {
            CorpusSource::Synthetic(s) => Ok(s.languages()),
            CorpusSource::Files { sources, .. } => {
                let text = std::fs::read_to_string(sources).map_err(|e| Error::io(sources, e))?;
                let origin = sources.display().to_string();
                let mut lines = text.lines();
                if lines.next() != Some(CORPUS_FORMAT) {
                    return Err(Error::parse(
                        origin,
                        1,
                        format!("expected `{CORPUS_FORMAT}`"),
                    ));
                }
                let langs = lines
                    .next()
                    .and_then(|l| l.strip_prefix("#languages\t"))
                    .ok_or_else(|| Error::parse(origin, 2, "expected `#languages` line"))?;
                Ok(langs.split('\t').map(String::from).collect())
            }
        }
    }

    pub fn corpus_size(&self) -> Option<usize> {
        match &self.corpus {
            CorpusSource::Synthetic(s) => Some(s.corpus_size),
            CorpusSource::Files { .. } => None,
        }
    }
}

/// All problems that would stop the configuration from running; empty
/// means runnable. Reads nothing but file headers.
pub fn validate(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = cfg.diagnostics.clone();
    let mut push = |f: &str, m: String| out.push(Diagnostic::new(f, m));

    match &cfg.corpus {
        CorpusSource::Synthetic(s) => {
            if let Err(e) = s.validate() {
                push("synth", e.to_string());
            }
            if s.corpus_size <= cfg.dev_size + cfg.test_size {
                push(
                    "split",
                    format!(
                        "dev ({}) + test ({}) leave no training records out of {}",
                        cfg.dev_size, cfg.test_size, s.corpus_size
                    ),
                );
            }
        }
        CorpusSource::Files {
            sources,
            targets,
            gazetteer,
        } => {
            for (field, p) in [
                ("corpus.sources", Some(sources)),
                ("corpus.targets", Some(targets)),
                ("corpus.gazetteer", gazetteer.as_ref()),
            ] {
                if let Some(p) = p {
                    if !p.as_os_str().is_empty() && !p.exists() {
                        push(field, format!("path {} does not exist", p.display()));
                    }
                }
            }
        }
    }
    for ((lang, kind), p) in &cfg.rules {
        if !p.exists() {
            push(
                &format!("rules.{lang}.{kind}"),
                format!("path {} does not exist", p.display()),
            );
        }
    }
    if cfg.dev_size == 0 || cfg.test_size == 0 {
        push("split", "dev and test sizes must be positive".into());
    }
    if cfg.systems.is_empty() && cfg.fractions.is_empty() {
        push("systems", "no systems or curve fractions configured".into());
    }
    if cfg.seeds.is_empty() {
        push("seeds", "no seeds configured".into());
    }
    for f in &cfg.fractions {
        if !(*f > 0.0 && *f <= 1.0) {
            push("fractions", format!("fraction {f} is outside (0, 1]"));
        }
    }
    if cfg.bpe_vocab_size == 0 {
        push("bpe.vocab_size", "must be positive".into());
    }
    if cfg.beam.beam == 0 || cfg.beam.max_len == 0 {
        push("decode", "beam and max_len must be positive".into());
    }
    let mut model = cfg.model.clone();
    model.vocab_size = model.vocab_size.max(1);
    if let Err(e) = model.validate() {
        push("model", e.to_string());
    }
    if let Err(e) = cfg.train.validate() {
        push("train", e.to_string());
    }

    // Every non-base kind needs a table for every non-exempt language.
    if let CorpusSource::Files { sources, .. } = &cfg.corpus {
        if sources.exists() {
            match cfg.languages() {
                Ok(langs) => {
                    for kind in cfg.kinds().into_iter().filter(|k| *k != SignalKind::Base) {
                        for lang in langs.iter().filter(|l| !cfg.exempt.contains(l)) {
                            if !cfg.rules.contains_key(&(lang.clone(), kind)) {
                                push(
                                    &format!("rules.{lang}.{kind}"),
                                    format!("signal `{kind}` is used but language `{lang}` has no {kind} rule table"),
                                );
                            }
                        }
                    }
                }
                Err(e) => push("corpus.sources", e.to_string()),
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> ExperimentConfig {
        ExperimentConfig::parse(text, "test.conf", Path::new("/tmp")).unwrap()
    }

    #[test]
    fn defaults_validate() {
        let cfg = parse("synth.corpus_size=400\nsplit.dev=50\nsplit.test=50\n");
        assert_eq!(validate(&cfg), vec![]);
    }

    #[test]
    fn parse_error_names_line() {
        let err =
            ExperimentConfig::parse("seeds=1\nnot a pair\n", "x.conf", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("x.conf:2"), "{err}");
    }

    #[test]
    fn fraction_out_of_range() {
        let cfg = parse("fractions=0.05,1.5\n");
        let d = validate(&cfg);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].field, "fractions");
    }

    #[test]
    fn bad_values_are_diagnostics() {
        let cfg = parse("model.heads=abc\nwhatever=1\nsystems=single(base),SE(base)\n");
        let fields: Vec<String> = validate(&cfg).into_iter().map(|d| d.field).collect();
        assert!(fields.contains(&"model.heads".to_string()));
        assert!(fields.contains(&"whatever".to_string()));
        assert!(fields.contains(&"systems".to_string()));
    }

    #[test]
    fn hash_tracks_bytes() {
        assert_ne!(
            parse("seeds=1\n").config_hash,
            parse("seeds=2\n").config_hash
        );
        assert_eq!(
            parse("seeds=1\n").config_hash,
            parse("seeds=1\n").config_hash
        );
    }
}
