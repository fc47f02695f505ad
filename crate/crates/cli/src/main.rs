use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scriptmix_core::eval::{bleu, ne_f1, BleuOptions, NeTaggerSpec};
use scriptmix_core::experiment::{
    parse_gazetteer, validate, ExperimentConfig, Pipeline, Stage, SystemSpec,
};
use scriptmix_core::SubwordModel;

#[derive(Parser)]
#[command(
    name = "scriptmix",
    version,
    about = "Transliteration-augmented multilingual translation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Decoding threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Rerun stages even when their manifest says they are complete.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate (or import) the corpus.
    GenSynth(Common),
    /// Add transliterated signals and split train/dev/test.
    Translit(Common),
    /// Train the subword model.
    Bpe(Common),
    /// Train every model the configured systems need.
    Train(Common),
    /// Decode the test split.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Decode only this system, e.g. `SE(base+ipa)`.
        #[arg(long)]
        system: Option<String>,
    },
    /// Score decodes, or compare two text files with --hyp/--ref.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        system: Option<String>,
        /// Metric for file comparison: bleu or ne-f1.
        #[arg(long, default_value = "bleu")]
        metric: String,
        #[arg(long)]
        hyp: Option<PathBuf>,
        #[arg(long)]
        r#ref: Option<PathBuf>,
        /// Subword model for BLEU tokenization; whitespace tokens otherwise.
        #[arg(long)]
        subwords: Option<PathBuf>,
        /// `surface<TAB>type` lines for ne-f1.
        #[arg(long)]
        gazetteer: Option<PathBuf>,
        /// Add-epsilon smoothing of zero higher-order precisions.
        #[arg(long)]
        smoothing: bool,
    },
    /// Learning-curve sweep over the configured fractions.
    Curve(Common),
    /// Aggregate metric reports into report/report.md.
    Report(Common),
    /// Every stage in order.
    Run(Common),
}

fn pipeline(common: &Common) -> Result<Option<Pipeline>> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let diags = validate(&cfg);
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("error: {d}");
        }
        return Ok(None);
    }
    let mut p = Pipeline::new(cfg);
    if let Some(seed) = common.seed {
        p.seeds = vec![seed];
    }
    p.workers = common.workers;
    p.force = common.force;
    Ok(Some(p))
}

fn run_stages(common: &Common, stages: &[Stage], only: Option<&str>) -> Result<bool> {
    let Some(mut p) = pipeline(common)? else {
        return Ok(false);
    };
    let only: Option<SystemSpec> = only.map(str::parse).transpose()?;
    for &stage in stages {
        if stage == Stage::Curve && p.cfg.fractions.is_empty() && stages.len() > 1 {
            continue;
        }
        let outcome = p.run_stage(stage, only.as_ref())?;
        let state = if outcome.skipped {
            "up to date"
        } else {
            "done"
        };
        println!("{}: {state} ({})", stage.as_str(), outcome.dir.display());
    }
    Ok(true)
}

fn read_lines(path: &PathBuf) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn eval_files(
    metric: &str,
    hyp: &PathBuf,
    reference: &PathBuf,
    subwords: Option<&PathBuf>,
    gazetteer: Option<&PathBuf>,
    smoothing: bool,
) -> Result<()> {
    let hyps = read_lines(hyp)?;
    let refs = read_lines(reference)?;
    match metric {
        "bleu" => {
            let (h, r): (Vec<Vec<String>>, Vec<Vec<String>>) = match subwords {
                Some(path) => {
                    let m = SubwordModel::load(path)?;
                    let seg = |t: &String| m.pieces(&m.encode(t));
                    (
                        hyps.iter().map(seg).collect(),
                        refs.iter().map(seg).collect(),
                    )
                }
                None => {
                    let seg =
                        |t: &String| t.split_whitespace().map(str::to_string).collect::<Vec<_>>();
                    (
                        hyps.iter().map(seg).collect(),
                        refs.iter().map(seg).collect(),
                    )
                }
            };
            println!("{:.2}", bleu(&h, &r, BleuOptions { smoothing })?);
        }
        "ne-f1" => {
            let path = gazetteer.context("ne-f1 needs --gazetteer")?;
            let g = parse_gazetteer(&std::fs::read_to_string(path)?, &path.display().to_string())?;
            let s = ne_f1(&hyps, &refs, &NeTaggerSpec::gazetteer(&g))?;
            println!(
                "precision={:.4} recall={:.4} f1={:.4}",
                s.precision(),
                s.recall(),
                s.f1()
            );
            if s.no_entities {
                println!("note: no entities on either side");
            }
        }
        other => bail!("metric `{other}` needs --config; file mode supports bleu and ne-f1"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result =
        match cli.command {
            Command::Validate { config } => ExperimentConfig::load(&config)
                .map_err(Into::into)
                .map(|cfg| {
                    let diags = validate(&cfg);
                    for d in &diags {
                        println!("{d}");
                    }
                    if diags.is_empty() {
                        println!("ok");
                    }
                    diags.is_empty()
                }),
            Command::GenSynth(c) => run_stages(&c, &[Stage::GenSynth], None),
            Command::Translit(c) => run_stages(&c, &[Stage::Translit], None),
            Command::Bpe(c) => run_stages(&c, &[Stage::Bpe], None),
            Command::Train(c) => run_stages(&c, &[Stage::Train], None),
            Command::Decode { common, system } => {
                run_stages(&common, &[Stage::Decode], system.as_deref())
            }
            Command::Eval {
                config,
                seed,
                workers,
                force,
                system,
                metric,
                hyp,
                r#ref,
                subwords,
                gazetteer,
                smoothing,
            } => match (config, hyp, r#ref) {
                (_, Some(h), Some(r)) => eval_files(
                    &metric,
                    &h,
                    &r,
                    subwords.as_ref(),
                    gazetteer.as_ref(),
                    smoothing,
                )
                .map(|_| true),
                (Some(config), None, None) => run_stages(
                    &Common {
                        config,
                        seed,
                        workers,
                        force,
                    },
                    &[Stage::Eval],
                    system.as_deref(),
                ),
                _ => Err(anyhow::anyhow!(
                    "eval needs --config, or both --hyp and --ref"
                )),
            },
            Command::Curve(c) => run_stages(&c, &[Stage::Curve], None),
            Command::Report(c) => run_stages(&c, &[Stage::Report], None),
            Command::Run(c) => run_stages(&c, &Stage::ALL, None),
        };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
