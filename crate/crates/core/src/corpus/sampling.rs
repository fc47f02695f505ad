use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Per-direction sampling probabilities produced by temperature scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSchedule {
    pub probabilities: BTreeMap<String, f64>,
    pub temperature: f64,
}

/// `p_i ∝ (n_i / Σ n)^(1/T)`.
pub fn temperature_schedule(
    sizes: &BTreeMap<String, usize>,
    temperature: f64,
) -> Result<SamplingSchedule> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let total: usize = sizes.values().sum();
    if total == 0 {
        return Err(Error::Invalid("all direction sizes are zero".into()));
    }
    let weights: BTreeMap<String, f64> = sizes
        .iter()
        .map(|(k, &n)| (k.clone(), (n as f64 / total as f64).powf(1.0 / temperature)))
        .collect();
    let z: f64 = weights.values().sum();
    Ok(SamplingSchedule {
        probabilities: weights.into_iter().map(|(k, w)| (k, w / z)).collect(),
        temperature,
    })
}

/// Draws directions according to a schedule.
#[derive(Debug, Clone)]
pub struct DirectionSampler {
    names: Vec<String>,
    cumulative: Vec<f64>,
}

impl DirectionSampler {
    pub fn new(schedule: &SamplingSchedule) -> Self {
        let mut acc = 0.0;
        let mut names = Vec::new();
        let mut cumulative = Vec::new();
        for (name, &p) in &schedule.probabilities {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            names.push(name.clone());
            cumulative.push(acc);
        }
        DirectionSampler { names, cumulative }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        let total = *self.cumulative.last().expect("at least one direction");
        let u = rng.gen::<f64>() * total;
        let i = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.names.len() - 1);
        &self.names[i]
    }
}
