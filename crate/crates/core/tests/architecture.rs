mod common;

use common::toy_batch;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scriptmix_core::model::{
    backward, count_params, forward, forward_traced, init_params, scale_encoder_dim,
    CrossAttentionMode, ModelConfig,
};

fn attn(d: usize) -> usize {
    4 * (d * d + d)
}

fn ffn(d: usize, h: usize) -> usize {
    d * h + h + h * d + d
}

/// Parameter count written out by hand from the layer structure.
fn closed_form(c: &ModelConfig) -> usize {
    let (v, d, de) = (c.vocab_size, c.embed_dim, c.encoder_embed_dim);
    let enc_layer = 4 * de + attn(de) + ffn(de, c.encoder_hidden_dim);
    let proj = if de != d { de * d + d } else { 0 };
    let encoder = v * de + c.encoder_layers * enc_layer + 2 * de + proj;
    let cross = if c.num_encoders == 1 {
        2 * d + attn(d)
    } else {
        let n = c.num_encoders;
        match c.cross_attention_mode {
            CrossAttentionMode::Flat => 2 * d + attn(d),
            CrossAttentionMode::Serial => n * (2 * d + attn(d)),
            CrossAttentionMode::Parallel => 2 * d + n * attn(d),
            CrossAttentionMode::Hierarchical => 2 * d + (n + 1) * attn(d),
        }
    };
    let dec_layer = 2 * d + attn(d) + cross + 2 * d + ffn(d, c.hidden_dim);
    let out = if c.tie_output { v } else { d * v + v };
    c.num_encoders * encoder + v * d + c.decoder_layers * dec_layer + 2 * d + out
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let dim = heads * rng.gen_range(1..5);
    let mut c = ModelConfig::tiny(
        rng.gen_range(8..40),
        rng.gen_range(1..3),
        dim,
        rng.gen_range(4..20),
        heads,
    );
    c.decoder_layers = rng.gen_range(1..3);
    c.encoder_embed_dim = heads * rng.gen_range(1..6);
    c.encoder_hidden_dim = rng.gen_range(4..20);
    c.num_encoders = rng.gen_range(1..4);
    c.cross_attention_mode = CrossAttentionMode::ALL[rng.gen_range(0..4)];
    c.tie_output = rng.gen_bool(0.5);
    c
}

#[test]
fn counts_match_materialized_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..10 {
        let c = random_config(&mut rng);
        let p = init_params(&c, i).unwrap();
        let materialized: usize = p.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(count_params(&c), materialized, "{c:?}");
        assert_eq!(closed_form(&c), materialized, "{c:?}");
    }
}

#[test]
fn transformer_base_closed_form() {
    let c = ModelConfig::transformer_base();
    assert_eq!(count_params(&c), closed_form(&c));
}

#[test]
fn doubling_encoder_keeps_decoder() {
    for base in [
        ModelConfig::transformer_base(),
        ModelConfig::tiny(1000, 2, 64, 128, 4),
    ] {
        let scaled = scale_encoder_dim(&base, 2);
        let ratio = count_params(&scaled) as f64 / (2.0 * count_params(&base) as f64);
        assert!((ratio - 1.0).abs() <= 0.02, "ratio {ratio}");
        let dec = |c: &ModelConfig| -> Vec<_> {
            c.param_shapes()
                .into_iter()
                .filter(|(n, _)| !n.starts_with("enc"))
                .collect()
        };
        assert_eq!(dec(&base), dec(&scaled));
    }
}

#[test]
fn modes_shapes_and_gradients() {
    for mode in CrossAttentionMode::ALL {
        let mut c = ModelConfig::tiny(14, 1, 8, 16, 2);
        c.num_encoders = 2;
        c.cross_attention_mode = mode;
        let p = init_params(&c, 5).unwrap();
        let sources = vec![vec![5, 6, 7], vec![8, 9, 10, 11, 12]];
        let (out, trace) = forward_traced(&p, &c, &sources, &[6, 7]).unwrap();
        assert_eq!(out.dim(), (3, 14), "{mode:?}");
        for row in out.rows() {
            let total: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        let expect = match mode {
            CrossAttentionMode::Flat => vec![8],
            _ => vec![3, 5],
        };
        assert_eq!(trace.cross_attention_lengths, expect, "{mode:?}");
        let (loss, grads) = backward(&p, &c, &toy_batch(14, 2, 3, 1), 0.1, None).unwrap();
        assert!(loss.is_finite());
        for (name, g) in grads.iter() {
            assert_eq!(g.dim(), p.get(name).unwrap().dim());
        }
    }
}

#[test]
fn flat_with_one_encoder_is_plain_cross_attention() {
    let mut single = ModelConfig::tiny(14, 2, 8, 16, 2);
    single.cross_attention_mode = CrossAttentionMode::Parallel;
    let mut flat = single.clone();
    flat.cross_attention_mode = CrossAttentionMode::Flat;
    let p = init_params(&single, 2).unwrap();
    let a = forward(&p, &single, &[vec![5, 9, 6]], &[7, 8]).unwrap();
    let b = forward(&p, &flat, &[vec![5, 9, 6]], &[7, 8]).unwrap();
    assert_eq!(a.as_slice().unwrap(), b.as_slice().unwrap());
}

#[test]
fn source_token_changes_output() {
    let c = ModelConfig::tiny(14, 2, 8, 16, 2);
    let p = init_params(&c, 4).unwrap();
    let a = forward(&p, &c, &[vec![5, 6, 7]], &[8]).unwrap();
    let b = forward(&p, &c, &[vec![5, 11, 7]], &[8]).unwrap();
    assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flat_length_is_sum_of_sources(lens in prop::collection::vec(1usize..7, 2..4)) {
        let mut c = ModelConfig::tiny(12, 1, 4, 8, 1);
        c.num_encoders = lens.len();
        c.cross_attention_mode = CrossAttentionMode::Flat;
        let p = init_params(&c, 1).unwrap();
        let sources: Vec<Vec<u32>> = lens.iter().map(|&n| vec![6; n]).collect();
        let (_, trace) = forward_traced(&p, &c, &sources, &[7]).unwrap();
        prop_assert_eq!(trace.cross_attention_lengths, vec![lens.iter().sum::<usize>()]);
    }
}
