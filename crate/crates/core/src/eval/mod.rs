//! Metrics: BLEU, C-BLEU, entity F1, token overlap, latent distance, and
//! input corruption.

mod bleu;
mod corrupt;
mod latent;
mod ne;
mod overlap;

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub use bleu::{bleu, c_bleu, BleuOptions, BleuStats, MAX_ORDER};
pub use corrupt::{corrupt_input, Segment};
pub use latent::{latent_distance, sentence_distance, LatentDistanceSpec};
pub use ne::{
    count_entities, ne_f1, EntityCounts, GazetteerTagger, NeScores, NeTagger, NeTaggerSpec,
};
pub use overlap::{jaccard, token_overlap, OverlapResult};

use crate::corpus::SubwordModel;

pub const REPORT_FORMAT: &str = "#metric-report v1";

/// Language-by-language grid. The diagonal is usually left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LangMatrix {
    pub languages: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl LangMatrix {
    pub fn new(languages: Vec<String>) -> Self {
        let n = languages.len();
        LangMatrix {
            languages,
            values: vec![vec![None; n]; n],
        }
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.values[i][j] = Some(value);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i][j]
    }

    /// Filled cells as (row, column, value).
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values.iter().enumerate().flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(j, v)| v.map(|v| (i, j, v)))
        })
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.languages.len();
        (0..n).all(|i| {
            (0..n).all(|j| match (self.values[i][j], self.values[j][i]) {
                (Some(a), Some(b)) => (a - b).abs() <= tol,
                (None, None) => true,
                _ => false,
            })
        })
    }

    pub fn to_tsv(&self, decimals: usize) -> String {
        let mut out = String::new();
        for l in &self.languages {
            out.push('\t');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.languages.iter().zip(&self.values) {
            out.push_str(l);
            for v in row {
                match v {
                    Some(v) => write!(out, "\t{v:.decimals$}").unwrap(),
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Named scalars and grids plus free-form metadata (system id, settings).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub scalars: BTreeMap<String, f64>,
    pub matrices: BTreeMap<String, LangMatrix>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn scalar(&mut self, name: impl Into<String>, value: f64) -> &mut Self {
        self.scalars.insert(name.into(), value);
        self
    }

    pub fn meta(&mut self, key: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn merge(&mut self, other: MetricReport) {
        self.scalars.extend(other.scalars);
        self.matrices.extend(other.matrices);
        self.metadata.extend(other.metadata);
    }

    /// Flat `key=value` block of metadata and scalars.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            writeln!(out, "meta.{k}={v}").unwrap();
        }
        for (k, v) in &self.scalars {
            writeln!(out, "{k}={v:.6}").unwrap();
        }
        out
    }

    pub fn parse_kv(text: &str) -> crate::Result<Self> {
        let mut report = MetricReport::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| crate::Error::parse("report", i + 1, "expected key=value"))?;
            if let Some(k) = k.strip_prefix("meta.") {
                report.metadata.insert(k.to_string(), v.to_string());
            } else {
                let v = v.parse().map_err(|_| {
                    crate::Error::parse("report", i + 1, format!("bad number `{v}`"))
                })?;
                report.scalars.insert(k.to_string(), v);
            }
        }
        Ok(report)
    }

    /// Full serialization: header, key=value block, then one grid per matrix.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(REPORT_FORMAT);
        out.push('\n');
        out.push_str(&self.to_kv());
        for (name, m) in &self.matrices {
            writeln!(out, "\n[{name}]").unwrap();
            out.push_str(&m.to_tsv(4));
        }
        out
    }
}

/// Subword pieces of each text, the unit BLEU is computed on.
pub fn subword_tokens(texts: &[String], model: &SubwordModel) -> Vec<Vec<u32>> {
    texts.iter().map(|t| model.encode(t)).collect()
}

/// BLEU over subword-segmented texts.
pub fn bleu_text(
    hypotheses: &[String],
    references: &[String],
    model: &SubwordModel,
    options: BleuOptions,
) -> crate::Result<f64> {
    bleu(
        &subword_tokens(hypotheses, model),
        &subword_tokens(references, model),
        options,
    )
}
