use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scriptmix"));
    c.env_remove("SCRIPTMIX_OUTPUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn repo(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(path)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const TINY: &str = "\
corpus=synthetic
synth.lexicon_size=20
synth.corpus_size=60
split.dev=10
split.test=6
bpe.vocab_size=200
model.layers=1
model.embed_dim=8
model.hidden_dim=16
model.heads=2
train.max_epochs=0
train.max_steps=4
train.warmup_steps=2
train.batch_tokens=200
train.dev_eval_interval=2
systems=single(base),SE(base+transl)
decode.beam=2
decode.max_len=6
";

#[test]
fn shipped_configs_validate() {
    for name in ["configs/demo.conf", "configs/curve.conf"] {
        let o = run(&["validate", "--config", repo(name).to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stdout(&o));
        assert_eq!(stdout(&o).trim(), "ok");
    }
}

#[test]
fn ipa_without_tables_names_language() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "src.tsv",
        "#corpus v1\n#languages\tbn\thi\n0\tbn\tbase\tক\n0\thi\tbase\tक\n",
    );
    write(dir.path(), "tgt.tsv", "#targets v1\n0\tx\n");
    let rules = repo("data/rules/bn.romani.tsv");
    let cfg = write(
        dir.path(),
        "c.conf",
        &format!(
            "corpus=files\ncorpus.sources=src.tsv\ncorpus.targets=tgt.tsv\nrules.bn.ipa={}\nsystems=SE(base+ipa)\n",
            rules.display()
        ),
    );
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let lines: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.contains("ipa"))
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 1, "{}", stdout(&o));
    assert!(lines[0].contains("hi"), "{}", lines[0]);
}

#[test]
fn fraction_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", &format!("{TINY}fractions=0.5,1.5\n"));
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("fractions"), "{}", stdout(&o));
    assert!(stdout(&o).contains("1.5"));
}

#[test]
fn parse_error_has_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.conf",
        "corpus=synthetic\nthis line has no equals sign\n",
    );
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(":2"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn file_bleu_identical_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let h = write(
        dir.path(),
        "h.txt",
        "the cat sat on the mat\nhello there world\n",
    );
    let o = run(&[
        "eval",
        "--metric",
        "bleu",
        "--hyp",
        h.to_str().unwrap(),
        "--ref",
        h.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "100.00");
}

#[test]
fn file_ne_f1() {
    let dir = tempfile::tempdir().unwrap();
    let h = write(dir.path(), "h.txt", "Modi visited Delhi\n");
    let r = write(dir.path(), "r.txt", "Modi visited Mumbai\n");
    let g = write(
        dir.path(),
        "g.tsv",
        "#gazetteer v1\nModi\tPER\nDelhi\tLOC\nMumbai\tLOC\n",
    );
    let o = run(&[
        "eval",
        "--metric",
        "ne-f1",
        "--hyp",
        h.to_str().unwrap(),
        "--ref",
        r.to_str().unwrap(),
        "--gazetteer",
        g.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o).trim(),
        "precision=0.5000 recall=0.5000 f1=0.5000"
    );
}

fn stages_through_train(cfg: &str) {
    for stage in ["gen-synth", "translit", "bpe", "train"] {
        let o = run(&[stage, "--config", cfg]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
}

#[test]
fn decode_single_system_writes_its_id() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", TINY);
    let cfg = cfg.to_str().unwrap();
    stages_through_train(cfg);
    let o = run(&["decode", "--config", cfg, "--system", "SE(base+transl)"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/decode/seed1/SE-base+transl.tsv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("#decode v1"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6 * 2);
    assert!(rows
        .iter()
        .all(|l| l.split('\t').nth(2) == Some("SE(base+transl)")));
    assert!(!dir.path().join("out/decode/seed1/single-base.tsv").exists());
}

#[test]
fn manifests_and_idempotent_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "c.conf", TINY);
    let cfg = cfg_path.to_str().unwrap();
    let o = run(&["run", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hash = hex::encode(Sha256::digest(fs::read(&cfg_path).unwrap()));
    let out = dir.path().join("out");
    for stage in [
        "corpus", "translit", "bpe", "train", "decode", "eval", "report",
    ] {
        let m = fs::read_to_string(out.join(stage).join("manifest.txt")).unwrap();
        assert!(m.contains(&format!("config_hash={hash}")), "{stage}");
        assert!(m.contains("seeds=1"));
        assert!(m.lines().any(|l| l.starts_with("format.")));
        assert!(m.ends_with("status=complete\n"));
    }
    let report = fs::read_to_string(out.join("report/report.md")).unwrap();
    assert!(report.contains("| Single-input Original | single(base) |"));
    assert!(report.contains("| Multi-Source Self-Ensemble | SE(base+transl) |"));

    let before = fs::read(out.join("decode/seed1/single-base.tsv")).unwrap();
    let modified = fs::metadata(out.join("train/seed1"))
        .unwrap()
        .modified()
        .unwrap();
    let again = run(&["run", "--config", cfg]);
    assert!(again.status.success());
    assert_eq!(
        stdout(&again).matches("up to date").count(),
        7,
        "{}",
        stdout(&again)
    );
    assert_eq!(
        fs::metadata(out.join("train/seed1"))
            .unwrap()
            .modified()
            .unwrap(),
        modified
    );

    let forced = run(&["decode", "--config", cfg, "--force"]);
    assert!(stdout(&forced).contains("decode: done"));
    assert_eq!(
        fs::read(out.join("decode/seed1/single-base.tsv")).unwrap(),
        before
    );
}

#[test]
fn changed_config_invalidates_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "c.conf", TINY);
    let cfg = cfg_path.to_str().unwrap();
    assert!(run(&["gen-synth", "--config", cfg]).status.success());
    assert!(stdout(&run(&["gen-synth", "--config", cfg])).contains("up to date"));
    fs::write(&cfg_path, format!("{TINY}synth.seed=9\n")).unwrap();
    assert!(stdout(&run(&["gen-synth", "--config", cfg])).contains("gen-synth: done"));
}

#[test]
fn missing_earlier_stage_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", TINY);
    let o = run(&["bpe", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("translit"), "{}", stderr(&o));
}

#[test]
fn output_root_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", TINY);
    let root = dir.path().join("elsewhere");
    let o = bin()
        .args(["gen-synth", "--config", cfg.to_str().unwrap()])
        .env("SCRIPTMIX_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(root.join("corpus/sources.tsv").exists());
    assert!(!dir.path().join("out").exists());
}
