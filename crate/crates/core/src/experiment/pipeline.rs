use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::config::{CorpusSource, ExperimentConfig};
use super::system::{KeyLayout, ModelKey, SystemSpec};
use crate::corpus::{
    build_examples, generate_synthetic_family, tagged_source, train_bpe, Example, MultiwayCorpus,
    SubwordModel, CORPUS_FORMAT, TARGETS_FORMAT,
};
use crate::decode::{
    beam_search, beam_search_inputs, decode_tsv, parse_decode_tsv, BeamParams, Component,
    EnsembleSpec, DECODE_FORMAT,
};
use crate::error::{Error, Result};
use crate::eval::{
    bleu, c_bleu, corrupt_input, latent_distance, ne_f1, token_overlap, LatentDistanceSpec,
    MetricReport, NeTaggerSpec, Segment, REPORT_FORMAT,
};
use crate::model::{
    encode_sources, init_params, load_checkpoint, save_checkpoint, scale_encoder_dim,
    CheckpointFile, Model, ModelConfig, CHECKPOINT_FORMAT,
};
use crate::train::{
    learning_curve, select_best, total_steps, train_from, LearningCurve, CURVE_REFERENCE,
};
use crate::translit::{load_rule_table, signal_tag, RuleTable, SignalKind};

pub const MANIFEST_FORMAT: &str = "#manifest v1";
const SUBWORD_FORMAT: &str = "#subword-model v1";
const GAZETTEER_FORMAT: &str = "#gazetteer v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenSynth,
    Translit,
    Bpe,
    Train,
    Decode,
    Eval,
    Curve,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenSynth,
        Stage::Translit,
        Stage::Bpe,
        Stage::Train,
        Stage::Decode,
        Stage::Eval,
        Stage::Curve,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenSynth => "gen-synth",
            Stage::Translit => "translit",
            Stage::Bpe => "bpe",
            Stage::Train => "train",
            Stage::Decode => "decode",
            Stage::Eval => "eval",
            Stage::Curve => "curve",
            Stage::Report => "report",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Stage::GenSynth => "corpus",
            other => other.as_str(),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown stage `{s}`")))
    }
}

/// What a stage did.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// The manifest showed the stage complete for this configuration.
    pub skipped: bool,
    pub dir: PathBuf,
}

/// Mean BLEU per (fraction, system) over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSummary {
    pub baseline: String,
    pub system: String,
    /// (fraction, system) -> per-seed BLEU.
    pub scores: Vec<(f64, String, Vec<f64>)>,
}

impl CurveSummary {
    pub fn mean(&self, fraction: f64, system: &str) -> Option<f64> {
        self.scores
            .iter()
            .find(|(f, s, _)| *f == fraction && s == system)
            .map(|(_, _, v)| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean system BLEU minus mean baseline BLEU.
    pub fn gap(&self, fraction: f64) -> Option<f64> {
        Some(self.mean(fraction, &self.system)? - self.mean(fraction, &self.baseline)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# {CURVE_REFERENCE}\nfraction\tsystem\tbleu_mean\tbleu_per_seed\n");
        for (f, s, v) in &self.scores {
            let per: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
            writeln!(
                out,
                "{f}\t{s}\t{:.4}\t{}",
                self.mean(*f, s).unwrap_or(0.0),
                per.join(",")
            )
            .unwrap();
        }
        let mut fractions: Vec<f64> = self.scores.iter().map(|(f, _, _)| *f).collect();
        fractions.dedup();
        for f in fractions {
            if let Some(g) = self.gap(f) {
                writeln!(out, "{f}\tgap\t{g:.4}\t-").unwrap();
            }
        }
        out
    }
}

/// Runs pipeline stages for one configuration.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub force: bool,
    models: HashMap<(u64, ModelKey), Arc<Model>>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn missing(path: &Path, stage: Stage) -> Error {
    Error::Invalid(format!(
        "{} not found; run the `{}` stage first",
        path.display(),
        stage.as_str()
    ))
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let seeds = cfg.seeds.clone();
        Pipeline {
            cfg,
            seeds,
            workers: 1,
            force: false,
            models: HashMap::new(),
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.cfg.output_dir.join(stage.dir())
    }

    fn manifest_text(&self, stage: Stage, extra: &str) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = String::new();
        writeln!(out, "{MANIFEST_FORMAT}").unwrap();
        writeln!(out, "stage={}", stage.as_str()).unwrap();
        writeln!(out, "config_hash={}", self.cfg.config_hash).unwrap();
        writeln!(out, "seeds={}", seeds.join(",")).unwrap();
        for (name, v) in [
            ("corpus", CORPUS_FORMAT),
            ("targets", TARGETS_FORMAT),
            ("subword", SUBWORD_FORMAT),
            ("checkpoint", CHECKPOINT_FORMAT),
            ("decode", DECODE_FORMAT),
            ("report", REPORT_FORMAT),
        ] {
            writeln!(out, "format.{name}={v}").unwrap();
        }
        out.push_str(extra);
        out.push_str("status=complete\n");
        out
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("manifest.txt")
    }

    fn is_complete(&self, stage: Stage, extra: &str) -> bool {
        !self.force
            && std::fs::read_to_string(self.manifest_path(stage))
                .ok()
                .as_deref()
                == Some(self.manifest_text(stage, extra).as_str())
    }

    /// Runs one stage. `only` restricts decode/eval to a single system.
    pub fn run_stage(&mut self, stage: Stage, only: Option<&SystemSpec>) -> Result<StageOutcome> {
        let systems: Vec<SystemSpec> = match only {
            Some(s) => vec![s.clone()],
            None => self.cfg.systems.clone(),
        };
        let extra = match stage {
            Stage::Train | Stage::Decode | Stage::Eval => {
                let ids: Vec<String> = systems.iter().map(ToString::to_string).collect();
                format!("systems={}\n", ids.join(","))
            }
            _ => String::new(),
        };
        let dir = self.stage_dir(stage);
        if self.is_complete(stage, &extra) {
            return Ok(StageOutcome {
                stage,
                skipped: true,
                dir,
            });
        }
        let _ = std::fs::remove_file(self.manifest_path(stage));
        match stage {
            Stage::GenSynth => self.gen_corpus()?,
            Stage::Translit => self.translit()?,
            Stage::Bpe => self.bpe()?,
            Stage::Train => self.train_stage(&systems)?,
            Stage::Decode => self.decode_stage(&systems)?,
            Stage::Eval => self.eval_stage(&systems)?,
            Stage::Curve => {
                self.curve()?;
            }
            Stage::Report => self.report()?,
        }
        write(
            &self.manifest_path(stage),
            &self.manifest_text(stage, &extra),
        )?;
        Ok(StageOutcome {
            stage,
            skipped: false,
            dir,
        })
    }

    /// Every stage in order; the curve stage only when fractions are set.
    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            if stage == Stage::Curve && self.cfg.fractions.is_empty() {
                continue;
            }
            out.push(self.run_stage(stage, None)?);
        }
        Ok(out)
    }

    // ---- corpus ----

    fn gen_corpus(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::GenSynth);
        match &self.cfg.corpus {
            CorpusSource::Synthetic(s) => {
                let family = generate_synthetic_family(s)?;
                family
                    .corpus
                    .save(&dir_file(&dir, "sources.tsv")?, &dir.join("targets.tsv"))?;
                for (lang, by_kind) in &family.rules.tables {
                    for (kind, table) in by_kind {
                        write(
                            &dir.join("rules").join(format!("{lang}.{kind}.tsv")),
                            &table.to_text(),
                        )?;
                    }
                }
                write(
                    &dir.join("gazetteer.tsv"),
                    &gazetteer_tsv(&family.gazetteer),
                )?;
            }
            CorpusSource::Files {
                sources,
                targets,
                gazetteer,
            } => {
                let corpus = MultiwayCorpus::load(sources, targets)?;
                corpus.save(&dir_file(&dir, "sources.tsv")?, &dir.join("targets.tsv"))?;
                if let Some(g) = gazetteer {
                    let parsed = parse_gazetteer(&read(g)?, &g.display().to_string())?;
                    write(&dir.join("gazetteer.tsv"), &gazetteer_tsv(&parsed))?;
                }
            }
        }
        Ok(())
    }

    fn rule_tables(
        &self,
        kind: SignalKind,
        languages: &[String],
    ) -> Result<BTreeMap<String, RuleTable>> {
        let mut out = BTreeMap::new();
        for lang in languages {
            if self.cfg.exempt.contains(lang) {
                continue;
            }
            let path = match self.cfg.rules.get(&(lang.clone(), kind)) {
                Some(p) => p.clone(),
                None => self
                    .stage_dir(Stage::GenSynth)
                    .join("rules")
                    .join(format!("{lang}.{kind}.tsv")),
            };
            if !path.exists() {
                return Err(Error::Config(format!(
                    "no {kind} rule table for language `{lang}`"
                )));
            }
            out.insert(lang.clone(), load_rule_table(&path)?);
        }
        Ok(out)
    }

    fn translit(&self) -> Result<()> {
        let src = self.stage_dir(Stage::GenSynth);
        let sources = src.join("sources.tsv");
        if !sources.exists() {
            return Err(missing(&sources, Stage::GenSynth));
        }
        let mut corpus = MultiwayCorpus::load(&sources, &src.join("targets.tsv"))?;
        corpus.check_multiway(SignalKind::Base)?;
        for kind in self.cfg.kinds() {
            if kind == SignalKind::Base || corpus.kinds().contains(&kind) {
                continue;
            }
            let tables = self.rule_tables(kind, corpus.languages())?;
            corpus = crate::translit::augment_corpus(&corpus, &tables, kind, &self.cfg.exempt)?;
        }
        let held = self.cfg.dev_size + self.cfg.test_size;
        if corpus.len() <= held {
            return Err(Error::Config(format!(
                "corpus has {} records; dev + test need {held} plus training data",
                corpus.len()
            )));
        }
        let (train, rest) = corpus.split_at(corpus.len() - held);
        let (dev, test) = rest.split_at(self.cfg.dev_size);
        let train = if self.cfg.partition_train {
            train.partition_languages()
        } else {
            train
        };
        let dir = self.stage_dir(Stage::Translit);
        for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
            part.save(
                &dir_file(&dir, &format!("{name}.sources.tsv"))?,
                &dir.join(format!("{name}.targets.tsv")),
            )?;
        }
        Ok(())
    }

    pub fn load_split(&self, name: &str) -> Result<MultiwayCorpus> {
        let dir = self.stage_dir(Stage::Translit);
        let sources = dir.join(format!("{name}.sources.tsv"));
        if !sources.exists() {
            return Err(missing(&sources, Stage::Translit));
        }
        MultiwayCorpus::load(&sources, &dir.join(format!("{name}.targets.tsv")))
    }

    fn bpe(&self) -> Result<()> {
        let train = self.load_split("train")?;
        let mut tags = Vec::new();
        for lang in train.languages() {
            for kind in SignalKind::ALL {
                tags.push(signal_tag(lang, kind));
            }
        }
        let model = train_bpe(&train.all_texts(), self.cfg.bpe_vocab_size, &tags)?;
        let path = dir_file(&self.stage_dir(Stage::Bpe), "subword.model")?;
        model.save(&path)
    }

    pub fn load_subwords(&self) -> Result<SubwordModel> {
        let path = self.stage_dir(Stage::Bpe).join("subword.model");
        if !path.exists() {
            return Err(missing(&path, Stage::Bpe));
        }
        SubwordModel::load(&path)
    }

    fn load_gazetteer(&self) -> Result<Option<BTreeMap<String, String>>> {
        let path = self.stage_dir(Stage::GenSynth).join("gazetteer.tsv");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(parse_gazetteer(
            &read(&path)?,
            &path.display().to_string(),
        )?))
    }

    // ---- training ----

    /// Model configuration for one trained model.
    pub fn model_config(&self, key: &ModelKey, vocab_size: usize) -> ModelConfig {
        let mut m = self.cfg.model.clone();
        m.vocab_size = vocab_size;
        match key.layout {
            KeyLayout::MultiEncoder(mode) => {
                m.num_encoders = key.kinds.len();
                m.cross_attention_mode = mode;
            }
            _ => m.num_encoders = 1,
        }
        if key.scale > 1 {
            m = scale_encoder_dim(&m, key.scale);
        }
        m
    }

    fn model_dir(&self, seed: u64, key: &ModelKey) -> PathBuf {
        self.stage_dir(Stage::Train)
            .join(format!("seed{seed}"))
            .join(key.name())
    }

    /// Trains one model and returns its best checkpoint with the dev-loss
    /// history. `min_steps` (per mixture kind) lengthens short runs.
    pub fn train_model(
        &self,
        key: &ModelKey,
        seed: u64,
        train: &MultiwayCorpus,
        dev: &MultiwayCorpus,
        subwords: &SubwordModel,
        min_steps: usize,
    ) -> Result<(CheckpointFile, Vec<(usize, f64)>)> {
        let mc = self.model_config(key, subwords.vocab_size());
        let layout = key.input_layout();
        let fits = |e: &Example| {
            e.sources.iter().all(|s| s.len() <= mc.max_positions)
                && e.target.len() < mc.max_positions
        };
        let examples: Vec<Example> = build_examples(train, &layout, subwords)?
            .into_iter()
            .filter(fits)
            .collect();
        let dev_examples: Vec<Example> = build_examples(dev, &layout, subwords)?
            .into_iter()
            .filter(fits)
            .collect();
        let mut tc = self.cfg.train.clone();
        tc.seed = seed.wrapping_mul(1000).wrapping_add(key.seed_offset);
        let per_kind = match key.layout {
            KeyLayout::Mixture => key.kinds.len(),
            _ => 1,
        };
        let steps = total_steps(&tc, &examples).max(min_steps * per_kind);
        let params = init_params(&mc, tc.seed)?;
        let checkpoints = train_from(
            &mc,
            &tc,
            params,
            &examples,
            &dev_examples,
            &subwords.vocab_hash(),
            steps,
        )?;
        let history = checkpoints.iter().map(|c| (c.step, c.dev_loss)).collect();
        Ok((select_best(&checkpoints)?.clone(), history))
    }

    /// Loads a trained model, training and saving it first when absent.
    fn ensure_model(&mut self, seed: u64, key: &ModelKey, retrain: bool) -> Result<Arc<Model>> {
        if !retrain {
            if let Some(m) = self.models.get(&(seed, key.clone())) {
                return Ok(m.clone());
            }
        }
        let dir = self.model_dir(seed, key);
        let path = dir.join("best.ckpt");
        let ckpt = if path.exists() && !retrain {
            load_checkpoint(&path)?
        } else {
            let subwords = self.load_subwords()?;
            let train = self.load_split("train")?;
            let dev = self.load_split("dev")?;
            let (best, history) = self.train_model(key, seed, &train, &dev, &subwords, 0)?;
            let mut log = String::from("step\tdev_loss\n");
            for (s, l) in history {
                writeln!(log, "{s}\t{l:?}").unwrap();
            }
            write(&dir.join("dev_loss.tsv"), &log)?;
            save_checkpoint(&path, &best)?;
            best
        };
        let model = Arc::new(Model::from(ckpt));
        self.models.insert((seed, key.clone()), model.clone());
        Ok(model)
    }

    fn train_stage(&mut self, systems: &[SystemSpec]) -> Result<()> {
        let keys: BTreeSet<ModelKey> = systems
            .iter()
            .flat_map(|s| s.components())
            .map(|(k, _)| k)
            .collect();
        for seed in self.seeds.clone() {
            for key in &keys {
                self.ensure_model(seed, key, true)?;
            }
        }
        Ok(())
    }

    // ---- decoding ----

    pub fn ensemble(&mut self, system: &SystemSpec, seed: u64) -> Result<EnsembleSpec> {
        let mut components = Vec::new();
        for (key, input) in system.components() {
            components.push(Component {
                model: self.ensure_model(seed, &key, false)?,
                input,
            });
        }
        EnsembleSpec::new(system.to_string(), components)
    }

    fn decode_path(&self, seed: u64, system: &SystemSpec) -> PathBuf {
        self.stage_dir(Stage::Decode)
            .join(format!("seed{seed}"))
            .join(format!("{}.tsv", system.file_stem()))
    }

    fn decode_stage(&mut self, systems: &[SystemSpec]) -> Result<()> {
        let test = self.load_split("test")?;
        let subwords = self.load_subwords()?;
        for seed in self.seeds.clone() {
            for system in systems {
                let spec = self.ensemble(system, seed)?;
                let out = translate_parallel(&spec, &test, &subwords, self.cfg.beam, self.workers)?;
                write(
                    &self.decode_path(seed, system),
                    &decode_tsv(spec.system_id(), &out),
                )?;
            }
        }
        Ok(())
    }

    // ---- evaluation ----

    fn eval_path(&self, seed: u64, system: &SystemSpec) -> PathBuf {
        self.stage_dir(Stage::Eval)
            .join(format!("seed{seed}"))
            .join(format!("{}.report", system.file_stem()))
    }

    fn eval_stage(&mut self, systems: &[SystemSpec]) -> Result<()> {
        let test = self.load_split("test")?;
        let subwords = self.load_subwords()?;
        let gazetteer = self.load_gazetteer()?;
        for seed in self.seeds.clone() {
            for system in systems {
                let path = self.decode_path(seed, system);
                if !path.exists() {
                    return Err(missing(&path, Stage::Decode));
                }
                let (id, outputs) = parse_decode_tsv(&read(&path)?, &path.display().to_string())?;
                let mut report =
                    self.score_outputs(&outputs, &test, &subwords, gazetteer.as_ref())?;
                report
                    .meta("system", id)
                    .meta("row", system.row_label())
                    .meta("seed", seed.to_string());
                self.latent_metrics(system, seed, &test, &subwords, &mut report)?;
                if let SystemSpec::Concat(kinds) = system {
                    if kinds.len() == 2 {
                        self.corruption_metrics(system, seed, &test, &subwords, &mut report)?;
                    }
                }
                write(&self.eval_path(seed, system), &report.to_tsv())?;
            }
        }
        let mut overlap = MetricReport::default();
        if test.languages().len() >= 2 {
            for kind in self.cfg.kinds() {
                let r = token_overlap(&test, kind, &subwords)?;
                overlap.scalar(format!("overlap.{kind}"), r.mean);
                overlap.scalar(format!("avg_len.{kind}"), r.avg_len);
                overlap.matrices.insert(format!("overlap.{kind}"), r.matrix);
            }
        } else {
            overlap.meta("note", "token overlap needs at least two languages");
        }
        write(
            &self.stage_dir(Stage::Eval).join("overlap.report"),
            &overlap.to_tsv(),
        )
    }

    /// BLEU, C-BLEU and entity F1 of decoded outputs against `corpus`.
    pub fn score_outputs(
        &self,
        outputs: &BTreeMap<(usize, String), String>,
        corpus: &MultiwayCorpus,
        subwords: &SubwordModel,
        gazetteer: Option<&BTreeMap<String, String>>,
    ) -> Result<MetricReport> {
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        let mut texts_h = Vec::new();
        let mut texts_r = Vec::new();
        let mut by_lang: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
        for record in corpus.records() {
            for lang in corpus.languages() {
                let h = outputs.get(&(record.id, lang.clone())).ok_or_else(|| {
                    Error::Invalid(format!("no output for record {} / {lang}", record.id))
                })?;
                let toks = subwords.encode(h);
                by_lang.entry(lang.clone()).or_default().push(toks.clone());
                hyps.push(toks);
                refs.push(subwords.encode(&record.target));
                texts_h.push(h.clone());
                texts_r.push(record.target.clone());
            }
        }
        let mut report = MetricReport::default();
        report.scalar("bleu", bleu(&hyps, &refs, self.cfg.bleu)?);
        if by_lang.len() >= 2 {
            let (m, mean) = c_bleu(&by_lang, self.cfg.bleu)?;
            report.scalar("c_bleu", mean);
            report.matrices.insert("c_bleu".into(), m);
        }
        if let Some(g) = gazetteer {
            let ne = ne_f1(&texts_h, &texts_r, &NeTaggerSpec::gazetteer(g))?;
            report.scalar("ne_f1", ne.f1());
            report.scalar("ne_precision", ne.precision());
            report.scalar("ne_recall", ne.recall());
            for (ty, c) in &ne.per_type {
                report.scalar(format!("ne_f1.{ty}"), c.f1());
            }
            report.meta("ne_no_entities", ne.no_entities.to_string());
        }
        report
            .meta("beam", self.cfg.beam.beam.to_string())
            .meta("max_len", self.cfg.beam.max_len.to_string())
            .meta("length_penalty", self.cfg.beam.length_penalty.to_string())
            .meta("bleu_smoothing", self.cfg.bleu.smoothing.to_string());
        Ok(report)
    }

    /// Encoder-output distances between languages for single-encoder
    /// systems, one scalar per signal kind.
    fn latent_metrics(
        &mut self,
        system: &SystemSpec,
        seed: u64,
        test: &MultiwayCorpus,
        subwords: &SubwordModel,
        report: &mut MetricReport,
    ) -> Result<()> {
        if test.languages().len() < 2
            || !matches!(
                system,
                SystemSpec::Single(_)
                    | SystemSpec::SelfEnsemble(_)
                    | SystemSpec::ScaledSelfEnsemble(_)
            )
        {
            return Ok(());
        }
        let (key, _) = system.components().remove(0);
        let model = self.ensure_model(seed, &key, false)?;
        for kind in system.kinds() {
            let spec = latent_spec(&model, test, kind, subwords)?;
            let (m, mean) = latent_distance(&spec)?;
            report.scalar(format!("latent.{kind}"), mean);
            report.matrices.insert(format!("latent.{kind}"), m);
        }
        Ok(())
    }

    fn corruption_metrics(
        &mut self,
        system: &SystemSpec,
        seed: u64,
        test: &MultiwayCorpus,
        subwords: &SubwordModel,
        report: &mut MetricReport,
    ) -> Result<()> {
        let (key, _) = system.components().remove(0);
        let model = self.ensure_model(seed, &key, false)?;
        for (name, segment) in [("first", Segment::First), ("second", Segment::Second)] {
            let out = corrupted_outputs(
                &model,
                test,
                &key.kinds,
                segment,
                seed,
                subwords,
                self.cfg.beam,
            )?;
            let r = self.score_outputs(&out, test, subwords, None)?;
            report.scalar(format!("bleu.corrupt_{name}"), r.scalars["bleu"]);
        }
        Ok(())
    }

    // ---- learning curve ----

    /// Trains and scores the curve baseline and system on every fraction for
    /// every seed.
    pub fn curve(&mut self) -> Result<CurveSummary> {
        if self.cfg.fractions.is_empty() {
            return Err(Error::Config("no fractions configured".into()));
        }
        let train = self.load_split("train")?;
        let dev = self.load_split("dev")?;
        let test = self.load_split("test")?;
        let subwords = self.load_subwords()?;
        let systems = [
            self.cfg.curve_baseline.clone(),
            self.cfg.curve_system.clone(),
        ];
        let mut curves: Vec<LearningCurve> = Vec::new();
        for seed in self.seeds.clone() {
            let curve = learning_curve(&train, &self.cfg.fractions, seed, |_, part| {
                let mut out = BTreeMap::new();
                let mut trained: BTreeMap<ModelKey, Arc<Model>> = BTreeMap::new();
                for system in &systems {
                    let mut components = Vec::new();
                    for (key, input) in system.components() {
                        let model = match trained.get(&key) {
                            Some(m) => m.clone(),
                            None => {
                                let (best, _) = self.train_model(
                                    &key,
                                    seed,
                                    part,
                                    &dev,
                                    &subwords,
                                    self.cfg.curve_min_steps,
                                )?;
                                let m = Arc::new(Model::from(best));
                                trained.insert(key.clone(), m.clone());
                                m
                            }
                        };
                        components.push(Component { model, input });
                    }
                    let spec = EnsembleSpec::new(system.to_string(), components)?;
                    let outputs =
                        translate_parallel(&spec, &test, &subwords, self.cfg.beam, self.workers)?;
                    let mut report = self.score_outputs(&outputs, &test, &subwords, None)?;
                    report.meta("seed", seed.to_string());
                    out.insert(system.to_string(), report);
                }
                Ok(out)
            })?;
            curves.push(curve);
        }
        let mut scores: Vec<(f64, String, Vec<f64>)> = Vec::new();
        for &f in &self.cfg.fractions {
            for s in &systems {
                let per_seed = curves
                    .iter()
                    .filter_map(|c| {
                        c.get(f, &s.to_string())
                            .and_then(|r| r.scalars.get("bleu").copied())
                    })
                    .collect();
                scores.push((f, s.to_string(), per_seed));
            }
        }
        let summary = CurveSummary {
            baseline: self.cfg.curve_baseline.to_string(),
            system: self.cfg.curve_system.to_string(),
            scores,
        };
        let dir = self.stage_dir(Stage::Curve);
        write(&dir.join("curve.tsv"), &summary.to_tsv())?;
        for (seed, c) in self.seeds.iter().zip(&curves) {
            write(&dir.join(format!("seed{seed}.tsv")), &c.to_tsv())?;
        }
        Ok(summary)
    }

    // ---- report ----

    fn report(&self) -> Result<()> {
        let mut md = String::from("# Results\n\n");
        let _ = writeln!(
            md,
            "Test-set means over seeds {}; beam {}, length penalty {}.\n",
            self.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(", "),
            self.cfg.beam.beam,
            self.cfg.beam.length_penalty
        );
        md.push_str(
            "## Systems\n\n| Row | System | BLEU | C-BLEU | NE-F1 |\n|---|---|---|---|---|\n",
        );
        let mut summary = String::from("system\trow\tmetric\tmean\n");
        for system in &self.cfg.systems {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for &seed in &self.seeds {
                let path = self.eval_path(seed, system);
                if !path.exists() {
                    return Err(missing(&path, Stage::Eval));
                }
                let text = read(&path)?;
                let kv: String = text
                    .lines()
                    .take_while(|l| !l.is_empty())
                    .collect::<Vec<_>>()
                    .join("\n");
                let report = MetricReport::parse_kv(&kv)?;
                for (k, v) in report.scalars {
                    let e = sums.entry(k).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            }
            let mean = |k: &str| sums.get(k).map(|(s, n)| s / *n as f64);
            let cell = |k: &str| mean(k).map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                system.row_label(),
                system,
                cell("bleu"),
                cell("c_bleu"),
                mean("ne_f1").map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v)),
            );
            for (k, (s, n)) in &sums {
                let _ = writeln!(
                    summary,
                    "{system}\t{}\t{k}\t{:.6}",
                    system.row_label(),
                    s / *n as f64
                );
            }
        }
        let overlap_path = self.stage_dir(Stage::Eval).join("overlap.report");
        if overlap_path.exists() {
            let text = read(&overlap_path)?;
            let kv: String = text
                .lines()
                .take_while(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join("\n");
            let r = MetricReport::parse_kv(&kv)?;
            md.push_str(
                "\n## Token overlap\n\n| Signal | Overlap | Sentence length |\n|---|---|---|\n",
            );
            for kind in self.cfg.kinds() {
                if let (Some(o), Some(l)) = (
                    r.scalars.get(&format!("overlap.{kind}")),
                    r.scalars.get(&format!("avg_len.{kind}")),
                ) {
                    let _ = writeln!(md, "| {kind} | {o:.2} | {l:.1} |");
                }
            }
        }
        let curve_path = self.stage_dir(Stage::Curve).join("curve.tsv");
        if curve_path.exists() {
            md.push_str("\n## Learning curve\n\n```\n");
            md.push_str(&read(&curve_path)?);
            md.push_str("```\n");
        }
        let dir = self.stage_dir(Stage::Report);
        write(&dir.join("report.md"), &md)?;
        write(&dir.join("summary.tsv"), &summary)
    }
}

fn dir_file(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.join(name))
}

fn gazetteer_tsv(g: &BTreeMap<String, String>) -> String {
    let mut out = format!("{GAZETTEER_FORMAT}\n");
    for (surface, ty) in g {
        writeln!(out, "{surface}\t{ty}").unwrap();
    }
    out
}

pub fn parse_gazetteer(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (surface, ty) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(origin, i + 1, "expected `surface<TAB>type`"))?;
        out.insert(surface.to_string(), ty.to_string());
    }
    Ok(out)
}

/// Encoder states for every (language, record) of one signal, without the
/// leading tag position.
pub fn latent_spec(
    model: &Model,
    corpus: &MultiwayCorpus,
    kind: SignalKind,
    subwords: &SubwordModel,
) -> Result<LatentDistanceSpec> {
    let mut spec = LatentDistanceSpec::default();
    for lang in corpus.languages() {
        let mut per = Vec::with_capacity(corpus.len());
        for record in corpus.records() {
            let src = tagged_source(corpus, record.id, lang, kind, subwords)?;
            let enc = encode_sources(&model.params, &model.config, &[src])?.remove(0);
            let start = if enc.nrows() > 1 { 1 } else { 0 };
            per.push(enc.slice(ndarray::s![start.., ..]).to_owned());
        }
        spec.outputs.insert(lang.clone(), per);
    }
    Ok(spec)
}

/// Decodes a concatenated-input model with one segment shuffled.
pub fn corrupted_outputs(
    model: &Model,
    corpus: &MultiwayCorpus,
    kinds: &[SignalKind],
    segment: Segment,
    seed: u64,
    subwords: &SubwordModel,
    params: BeamParams,
) -> Result<BTreeMap<(usize, String), String>> {
    let mut out = BTreeMap::new();
    for record in corpus.records() {
        for lang in corpus.languages() {
            let parts = kinds
                .iter()
                .map(|&k| tagged_source(corpus, record.id, lang, k, subwords))
                .collect::<Result<Vec<_>>>()?;
            let joined = crate::decode::concat_with_sep(&parts);
            let item_seed = seed ^ ((record.id as u64) << 16) ^ lang.len() as u64;
            let corrupted =
                corrupt_input(&joined, segment, item_seed, |t| subwords.is_reserved(t))?;
            let result = beam_search_inputs(model, &[corrupted], params)?;
            out.insert(
                (record.id, lang.clone()),
                subwords.decode(result.best.output())?,
            );
        }
    }
    Ok(out)
}

/// `translate_corpus` split over `workers` threads; the result does not
/// depend on the worker count.
pub fn translate_parallel(
    spec: &EnsembleSpec,
    corpus: &MultiwayCorpus,
    subwords: &SubwordModel,
    params: BeamParams,
    workers: usize,
) -> Result<BTreeMap<(usize, String), String>> {
    if subwords.vocab_hash() != spec.vocab_hash() {
        return Err(Error::Config(
            "subword model does not match the ensemble vocabulary".into(),
        ));
    }
    let items: Vec<(usize, &String)> = corpus
        .records()
        .iter()
        .flat_map(|r| corpus.languages().iter().map(move |l| (r.id, l)))
        .collect();
    let kinds = spec.required_kinds();
    let one = |&(id, lang): &(usize, &String)| -> Result<((usize, String), String)> {
        let mut sources = BTreeMap::new();
        for &k in &kinds {
            sources.insert(k, tagged_source(corpus, id, lang, k, subwords)?);
        }
        let result = beam_search(spec, &sources, params)?;
        Ok(((id, lang.clone()), subwords.decode(result.best.output())?))
    };
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(one).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let results: Vec<Result<Vec<((usize, String), String)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode worker panicked"))
            .collect()
    });
    let mut out = BTreeMap::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
