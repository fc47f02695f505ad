use std::fmt;
use std::str::FromStr;

use crate::corpus::InputLayout;
use crate::decode::ComponentInput;
use crate::error::{Error, Result};
use crate::model::CrossAttentionMode;
use crate::translit::SignalKind;

/// A decodable system, written as e.g. `SE(base+ipa)` or
/// `multienc-flat(base+ipa)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SystemSpec {
    /// One model trained and decoded on one signal.
    Single(SignalKind),
    /// One model trained on a mixture of signals, ensembled over them.
    SelfEnsemble(Vec<SignalKind>),
    /// Self-ensemble with the encoder widened to n times the parameters.
    ScaledSelfEnsemble(Vec<SignalKind>),
    /// Separately trained models on the same signal, differing by seed.
    Ensemble(Vec<SignalKind>),
    /// Separately trained models, one per signal.
    MultiSourceEnsemble(Vec<SignalKind>),
    /// Signals joined with SEP into one source sequence.
    Concat(Vec<SignalKind>),
    /// One encoder per signal.
    MultiEncoder(CrossAttentionMode, Vec<SignalKind>),
}

/// How one trained model is built.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModelKey {
    pub layout: KeyLayout,
    pub kinds: Vec<SignalKind>,
    /// Encoder parameter multiplier (1 = unscaled).
    pub scale: usize,
    /// Added to the run seed; separates ensemble members.
    pub seed_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyLayout {
    Mixture,
    Concat,
    MultiEncoder(CrossAttentionMode),
}

impl ModelKey {
    fn mixture(kinds: Vec<SignalKind>, scale: usize, seed_offset: u64) -> Self {
        let mut kinds = kinds;
        kinds.sort();
        kinds.dedup();
        ModelKey {
            layout: KeyLayout::Mixture,
            kinds,
            scale,
            seed_offset,
        }
    }

    pub fn input_layout(&self) -> InputLayout {
        match self.layout {
            KeyLayout::Mixture => InputLayout::Mixture(self.kinds.clone()),
            KeyLayout::Concat => InputLayout::Concat(self.kinds.clone()),
            KeyLayout::MultiEncoder(_) => InputLayout::MultiEncoder(self.kinds.clone()),
        }
    }

    /// File-system friendly name, e.g. `mix-base-ipa.x2.s0`.
    pub fn name(&self) -> String {
        let layout = match self.layout {
            KeyLayout::Mixture => "mix".to_string(),
            KeyLayout::Concat => "concat".to_string(),
            KeyLayout::MultiEncoder(m) => format!("multienc-{m}"),
        };
        let kinds: Vec<&str> = self.kinds.iter().map(|k| k.as_str()).collect();
        format!(
            "{layout}-{}.x{}.s{}",
            kinds.join("-"),
            self.scale,
            self.seed_offset
        )
    }
}

fn join(kinds: &[SignalKind]) -> String {
    kinds
        .iter()
        .map(|k| k.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

impl SystemSpec {
    pub fn kinds(&self) -> Vec<SignalKind> {
        match self {
            SystemSpec::Single(k) => vec![*k],
            SystemSpec::SelfEnsemble(k)
            | SystemSpec::ScaledSelfEnsemble(k)
            | SystemSpec::Ensemble(k)
            | SystemSpec::MultiSourceEnsemble(k)
            | SystemSpec::Concat(k)
            | SystemSpec::MultiEncoder(_, k) => k.clone(),
        }
    }

    /// The models this system decodes with, paired with each component's
    /// input.
    pub fn components(&self) -> Vec<(ModelKey, ComponentInput)> {
        match self {
            SystemSpec::Single(k) => vec![(
                ModelKey::mixture(vec![*k], 1, 0),
                ComponentInput::Signal(*k),
            )],
            SystemSpec::SelfEnsemble(ks) | SystemSpec::ScaledSelfEnsemble(ks) => {
                let scale = if matches!(self, SystemSpec::ScaledSelfEnsemble(_)) {
                    ks.len()
                } else {
                    1
                };
                let key = ModelKey::mixture(ks.clone(), scale, 0);
                ks.iter()
                    .map(|&k| (key.clone(), ComponentInput::Signal(k)))
                    .collect()
            }
            SystemSpec::Ensemble(ks) | SystemSpec::MultiSourceEnsemble(ks) => ks
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    (
                        ModelKey::mixture(vec![k], 1, i as u64),
                        ComponentInput::Signal(k),
                    )
                })
                .collect(),
            SystemSpec::Concat(ks) => vec![(
                ModelKey {
                    layout: KeyLayout::Concat,
                    kinds: ks.clone(),
                    scale: 1,
                    seed_offset: 0,
                },
                ComponentInput::Concat(ks.clone()),
            )],
            SystemSpec::MultiEncoder(mode, ks) => vec![(
                ModelKey {
                    layout: KeyLayout::MultiEncoder(*mode),
                    kinds: ks.clone(),
                    scale: 1,
                    seed_offset: 0,
                },
                ComponentInput::MultiEncoder(ks.clone()),
            )],
        }
    }

    /// Row label in the main results table.
    pub fn row_label(&self) -> &'static str {
        match self {
            SystemSpec::Single(SignalKind::Base) => "Single-input Original",
            SystemSpec::Single(_) => "Single-input Alternative",
            SystemSpec::SelfEnsemble(_) | SystemSpec::ScaledSelfEnsemble(_) => {
                "Multi-Source Self-Ensemble"
            }
            SystemSpec::Ensemble(_) => "Standard Ensemble",
            SystemSpec::MultiSourceEnsemble(_) => "Multi-Source Ensemble",
            SystemSpec::Concat(_) => "Straight Concatenation",
            SystemSpec::MultiEncoder(..) => "Multi-Encoder",
        }
    }

    /// Name usable as a file stem.
    pub fn file_stem(&self) -> String {
        self.to_string().replace('(', "-").replace(')', "")
    }
}

impl fmt::Display for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemSpec::Single(k) => write!(f, "single({k})"),
            SystemSpec::SelfEnsemble(k) => write!(f, "SE({})", join(k)),
            SystemSpec::ScaledSelfEnsemble(k) => write!(f, "SSE({})", join(k)),
            SystemSpec::Ensemble(k) => write!(f, "ENS({})", join(k)),
            SystemSpec::MultiSourceEnsemble(k) => write!(f, "MSE({})", join(k)),
            SystemSpec::Concat(k) => write!(f, "concat({})", join(k)),
            SystemSpec::MultiEncoder(m, k) => write!(f, "multienc-{m}({})", join(k)),
        }
    }
}

impl FromStr for SystemSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("system `{s}`: {m}"));
        let s = s.trim();
        let (head, rest) = s
            .split_once('(')
            .ok_or_else(|| bad("expected name(kind+kind)"))?;
        let inner = rest
            .strip_suffix(')')
            .ok_or_else(|| bad("missing closing parenthesis"))?;
        let kinds = inner
            .split('+')
            .map(|k| k.trim().parse::<SignalKind>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| bad(&e.to_string()))?;
        let distinct = |n: usize| -> Result<Vec<SignalKind>> {
            let mut seen = kinds.clone();
            seen.sort();
            seen.dedup();
            if kinds.len() < n || seen.len() != kinds.len() {
                return Err(bad(&format!("needs at least {n} distinct signal kinds")));
            }
            Ok(kinds.clone())
        };
        match head {
            "single" => match kinds.as_slice() {
                [k] => Ok(SystemSpec::Single(*k)),
                _ => Err(bad("takes exactly one signal kind")),
            },
            "SE" => Ok(SystemSpec::SelfEnsemble(distinct(2)?)),
            "SSE" => Ok(SystemSpec::ScaledSelfEnsemble(distinct(2)?)),
            "MSE" => Ok(SystemSpec::MultiSourceEnsemble(distinct(2)?)),
            "concat" => Ok(SystemSpec::Concat(distinct(2)?)),
            "ENS" => {
                if kinds.len() < 2 || kinds.iter().any(|k| *k != kinds[0]) {
                    return Err(bad("needs two or more copies of one signal kind"));
                }
                Ok(SystemSpec::Ensemble(kinds))
            }
            h => match h.strip_prefix("multienc-") {
                Some(mode) => Ok(SystemSpec::MultiEncoder(
                    mode.parse().map_err(|e: Error| bad(&e.to_string()))?,
                    distinct(2)?,
                )),
                None => Err(bad("unknown system type")),
            },
        }
    }
}
