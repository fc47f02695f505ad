#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scriptmix_core::corpus::Example;
use scriptmix_core::model::{backward, batch_loss, ModelConfig, Parameters};
use scriptmix_core::SignalKind;

/// First id that is not a reserved token in toy vocabularies.
pub const FIRST_WORD: u32 = 5;

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.gen_range(FIRST_WORD..vocab as u32))
        .collect()
}

/// Random examples with `encoders` sources each.
pub fn toy_batch(vocab: usize, encoders: usize, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let sources = (0..encoders)
                .map(|_| {
                    let len = rng.gen_range(2..6);
                    random_tokens(&mut rng, vocab, len)
                })
                .collect();
            let len = rng.gen_range(2..5);
            Example {
                record: i,
                language: "l0".into(),
                kinds: vec![SignalKind::Base; encoders],
                sources,
                target: random_tokens(&mut rng, vocab, len),
            }
        })
        .collect()
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares analytic gradients with central differences on every parameter
/// element. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    params: &Parameters,
    cfg: &ModelConfig,
    batch: &[Example],
    smoothing: f64,
    h: f64,
    floor: f64,
) -> GradCheck {
    let (_, grads) = backward(params, cfg, batch, smoothing, None).unwrap();
    let mut p = params.clone();
    let mut out = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for name in params.names().to_vec() {
        let (rows, cols) = params.get(&name).unwrap().dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = p.get(&name).unwrap()[[i, j]];
                p.get_mut(&name).unwrap()[[i, j]] = orig + h;
                let up = batch_loss(&p, cfg, batch, smoothing).unwrap();
                p.get_mut(&name).unwrap()[[i, j]] = orig - h;
                let down = batch_loss(&p, cfg, batch, smoothing).unwrap();
                p.get_mut(&name).unwrap()[[i, j]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(&name).unwrap()[[i, j]];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
                if rel > out.max_rel {
                    out.max_rel = rel;
                    out.worst =
                        format!("{name}[{i},{j}] analytic {analytic:e} numeric {numeric:e}");
                }
                out.checked += 1;
            }
        }
    }
    out
}
