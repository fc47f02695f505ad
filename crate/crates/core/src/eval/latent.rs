use std::collections::BTreeMap;

use super::LangMatrix;
use crate::error::{Error, Result};
use crate::model::EncoderOutput;

/// Encoder states per language, one matrix (tokens × d) per aligned sentence.
#[derive(Debug, Clone, Default)]
pub struct LatentDistanceSpec {
    pub outputs: BTreeMap<String, Vec<EncoderOutput>>,
}

fn euclid(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Symmetrized mean nearest-neighbour distance between two token-vector
/// sequences, divided by √d.
pub fn sentence_distance(a: &EncoderOutput, b: &EncoderOutput) -> Result<f64> {
    let d = a.ncols();
    if b.ncols() != d {
        return Err(Error::Shape(format!(
            "vector dimension {d} vs {}",
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Shape("empty token-vector sequence".into()));
    }
    let one_way = |x: &EncoderOutput, y: &EncoderOutput| -> f64 {
        let total: f64 = x
            .rows()
            .into_iter()
            .map(|u| {
                y.rows()
                    .into_iter()
                    .map(|v| euclid(u, v))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / x.nrows() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)) / (d as f64).sqrt())
}

/// Pairwise grid (mean over sentences) and the mean over unordered pairs.
pub fn latent_distance(spec: &LatentDistanceSpec) -> Result<(LangMatrix, f64)> {
    let langs: Vec<String> = spec.outputs.keys().cloned().collect();
    if langs.len() < 2 {
        return Err(Error::Invalid(
            "latent distance needs at least two languages".into(),
        ));
    }
    let n = spec.outputs[&langs[0]].len();
    if n == 0 || spec.outputs.values().any(|v| v.len() != n) {
        return Err(Error::Shape("encoder outputs are not id-aligned".into()));
    }
    let mut matrix = LangMatrix::new(langs.clone());
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..langs.len() {
        for j in i + 1..langs.len() {
            let (a, b) = (&spec.outputs[&langs[i]], &spec.outputs[&langs[j]]);
            let mut total = 0.0;
            for (x, y) in a.iter().zip(b) {
                total += sentence_distance(x, y)?;
            }
            let score = total / n as f64;
            matrix.set(i, j, score);
            matrix.set(j, i, score);
            sum += score;
            pairs += 1;
        }
    }
    Ok((matrix, sum / pairs as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn worked_example() {
        let d = sentence_distance(&array![[0.0, 0.0, 0.0, 0.0]], &array![[2.0, 2.0, 2.0, 2.0]])
            .unwrap();
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_is_zero_and_dims_checked() {
        let a = array![[1.0, 2.0], [3.0, -1.0]];
        assert_eq!(sentence_distance(&a, &a).unwrap(), 0.0);
        assert!(sentence_distance(&a, &array![[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn grid_is_symmetric() {
        let mut spec = LatentDistanceSpec::default();
        spec.outputs.insert("a".into(), vec![array![[0.0, 0.0]]]);
        spec.outputs
            .insert("b".into(), vec![array![[3.0, 4.0], [0.0, 1.0]]]);
        spec.outputs.insert("c".into(), vec![array![[1.0, 1.0]]]);
        let (m, mean) = latent_distance(&spec).unwrap();
        assert!(m.is_symmetric(1e-12));
        assert_eq!(m.entries().count(), 6);
        assert!(mean > 0.0);
    }
}
