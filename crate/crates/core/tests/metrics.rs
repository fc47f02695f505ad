use std::collections::BTreeMap;

use ndarray::array;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scriptmix_core::corpus::{generate_synthetic_family, train_bpe, SyntheticFamilyConfig};
use scriptmix_core::eval::{
    bleu, c_bleu, corrupt_input, jaccard, latent_distance, ne_f1, sentence_distance, token_overlap,
    BleuOptions, GazetteerTagger, LatentDistanceSpec, NeTagger, NeTaggerSpec, Segment,
};
use scriptmix_core::translit::{augment_corpus, signal_tag};
use scriptmix_core::SignalKind;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Textbook BLEU written with plain vectors: clipped n-gram matches,
/// brevity penalty, uniform geometric mean over orders that have n-grams.
fn reference_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut h_len, mut r_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        h_len += h.len();
        r_len += r.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let mut pool: Vec<&[u32]> = if r.len() >= n {
                r.windows(n).collect()
            } else {
                Vec::new()
            };
            for g in h.windows(n) {
                totals[n - 1] += 1;
                if let Some(pos) = pool.iter().position(|p| *p == g) {
                    pool.swap_remove(pos);
                    matches[n - 1] += 1;
                }
            }
        }
    }
    if h_len == 0 {
        return 0.0;
    }
    let mut logs = Vec::new();
    for n in 0..4 {
        if totals[n] > 0 {
            if matches[n] == 0 {
                return 0.0;
            }
            logs.push((matches[n] as f64 / totals[n] as f64).ln());
        }
    }
    let bp = if h_len < r_len {
        (1.0 - r_len as f64 / h_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

#[test]
fn identical_corpus_is_exactly_100() {
    let x = vec![words("a b c d e"), words("f g"), words("h")];
    assert_eq!(bleu(&x, &x, BleuOptions::default()).unwrap(), 100.0);
}

#[test]
fn worked_brevity_example() {
    let score = bleu(
        &[words("a b c d e")],
        &[words("a b c d e f")],
        BleuOptions::default(),
    )
    .unwrap();
    assert!((score - 81.87).abs() < 0.01, "{score}");
    assert!((score - 100.0 * (1.0f64 - 6.0 / 5.0).exp()).abs() < 1e-9);
}

#[test]
fn c_bleu_counts_ordered_pairs() {
    for n in 2..6 {
        let out: BTreeMap<String, Vec<Vec<String>>> = (0..n)
            .map(|i| (format!("l{i}"), vec![words("x y z w"), words("p q r")]))
            .collect();
        let (grid, mean) = c_bleu(&out, BleuOptions::default()).unwrap();
        assert_eq!(grid.entries().count(), n * (n - 1));
        assert_eq!(mean, 100.0);
    }
}

#[test]
fn c_bleu_rows_are_references() {
    let mut out = BTreeMap::new();
    out.insert("a".to_string(), vec![words("x y z w v"), words("p q")]);
    out.insert("b".to_string(), vec![words("x y z w"), words("p q r s")]);
    let (grid, mean) = c_bleu(&out, BleuOptions::default()).unwrap();
    let ab = bleu(&out["b"], &out["a"], BleuOptions::default()).unwrap();
    let ba = bleu(&out["a"], &out["b"], BleuOptions::default()).unwrap();
    assert_ne!(ab, ba);
    assert_eq!(grid.get(0, 1), Some(ab));
    assert_eq!(grid.get(1, 0), Some(ba));
    assert!((mean - (ab + ba) / 2.0).abs() < 1e-12);
}

fn gazetteer() -> BTreeMap<String, String> {
    [
        ("Modi", "PER"),
        ("Delhi", "LOC"),
        ("Mumbai", "LOC"),
        ("New Delhi", "LOC"),
        ("Tata Steel", "ORG"),
        ("Monday", "TIME"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

#[test]
fn half_matched_entities() {
    let s = ne_f1(
        &["Modi visited Delhi".into()],
        &["Modi visited Mumbai".into()],
        &NeTaggerSpec::gazetteer(&gazetteer()),
    )
    .unwrap();
    assert_eq!((s.micro.tp, s.micro.fp, s.micro.fn_), (1, 1, 1));
    assert!((s.precision() - 0.5).abs() < 1e-12);
    assert!((s.recall() - 0.5).abs() < 1e-12);
    assert!((s.f1() - 0.5).abs() < 1e-12);
}

#[test]
fn micro_counts_match_sentence_recount() {
    let g = gazetteer();
    let tagger = GazetteerTagger::new(&g);
    let spec = NeTaggerSpec::gazetteer(&g);
    let pool = [
        "Modi", "Delhi", "Mumbai", "New", "Delhi", "Tata", "Steel", "Monday", "the", "went", "to",
        "on",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let sentence = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(0..9);
        (0..n)
            .map(|_| *pool.choose(rng).unwrap())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let hyps: Vec<String> = (0..100).map(|_| sentence(&mut rng)).collect();
    let refs: Vec<String> = (0..100).map(|_| sentence(&mut rng)).collect();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (h, r) in hyps.iter().zip(&refs) {
        let mut unmatched = tagger.extract(r);
        for e in tagger.extract(h) {
            match unmatched.iter().position(|x| *x == e) {
                Some(i) => {
                    unmatched.remove(i);
                    tp += 1;
                }
                None => fp += 1,
            }
        }
        fn_ += unmatched.len();
    }
    let s = ne_f1(&hyps, &refs, &spec).unwrap();
    assert_eq!((s.micro.tp, s.micro.fp, s.micro.fn_), (tp, fp, fn_));
    assert!(tp > 0 && fp > 0 && fn_ > 0);
}

#[test]
fn overlap_on_undiverged_family() {
    let fam = generate_synthetic_family(&SyntheticFamilyConfig {
        divergence_rate: 0.0,
        corpus_size: 200,
        num_languages: 3,
        ..Default::default()
    })
    .unwrap();
    let c = augment_corpus(
        &fam.corpus,
        &fam.rules.for_kind(SignalKind::Ipa),
        SignalKind::Ipa,
        &[],
    )
    .unwrap();
    let tags: Vec<String> = c
        .languages()
        .iter()
        .flat_map(|l| SignalKind::ALL.map(|k| signal_tag(l, k)))
        .collect();
    let m = train_bpe(&c.all_texts(), 600, &tags).unwrap();
    let base = token_overlap(&c, SignalKind::Base, &m).unwrap();
    let ipa = token_overlap(&c, SignalKind::Ipa, &m).unwrap();
    assert_eq!(base.mean, 0.0);
    assert_eq!(ipa.mean, 1.0);
    assert!(base.matrix.is_symmetric(0.0) && ipa.matrix.is_symmetric(0.0));
    assert_eq!(base.matrix.entries().count(), 6);
}

#[test]
fn overlap_set_example() {
    let a = ["a", "b", "c"].into_iter().collect();
    let b = ["b", "c", "d"].into_iter().collect();
    assert_eq!(jaccard(&a, &b), 0.5);
}

#[test]
fn latent_worked_example() {
    let d =
        sentence_distance(&array![[0.0, 0.0, 0.0, 0.0]], &array![[2.0, 2.0, 2.0, 2.0]]).unwrap();
    assert!((d - 2.0).abs() < 1e-9);
    let mut spec = LatentDistanceSpec::default();
    spec.outputs
        .insert("x".into(), vec![array![[0.0, 0.0, 0.0, 0.0]]]);
    spec.outputs
        .insert("y".into(), vec![array![[2.0, 2.0, 2.0, 2.0]]]);
    let (grid, mean) = latent_distance(&spec).unwrap();
    assert!((mean - 2.0).abs() < 1e-9);
    assert_eq!(grid.get(0, 1), grid.get(1, 0));
}

#[test]
fn latent_min_matching_by_hand() {
    // a = {(0,0),(3,0)}, b = {(0,4)}: a->b mean (4 + 5)/2, b->a 4, d = 2
    let d = sentence_distance(&array![[0.0, 0.0], [3.0, 0.0]], &array![[0.0, 4.0]]).unwrap();
    assert!((d - 0.5 * (4.5 + 4.0) / 2f64.sqrt()).abs() < 1e-12);
}

fn sentences() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(0u32..6, 0..9), 1..6)
}

proptest! {
    #[test]
    fn bleu_matches_textbook_oracle(h in sentences(), r in sentences()) {
        let n = h.len().min(r.len());
        let (h, r) = (&h[..n], &r[..n]);
        let ours = bleu(h, r, BleuOptions::default()).unwrap();
        prop_assert!((ours - reference_bleu(h, r)).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&ours));
    }

    #[test]
    fn bleu_self_is_100(h in sentences()) {
        prop_assume!(h.iter().any(|s| !s.is_empty()));
        prop_assert_eq!(bleu(&h, &h, BleuOptions::default()).unwrap(), 100.0);
        prop_assert_eq!(bleu(&h, &h, BleuOptions { smoothing: true }).unwrap(), 100.0);
    }

    #[test]
    fn smoothing_never_lowers(h in sentences(), r in sentences()) {
        let n = h.len().min(r.len());
        let plain = bleu(&h[..n], &r[..n], BleuOptions::default()).unwrap();
        let smooth = bleu(&h[..n], &r[..n], BleuOptions { smoothing: true }).unwrap();
        prop_assert!(smooth + 1e-12 >= plain);
    }

    #[test]
    fn latent_symmetric_nonnegative(a in prop::collection::vec(-3.0f64..3.0, 1..5 * 3), b in prop::collection::vec(-3.0f64..3.0, 1..5 * 3)) {
        let rows = |v: &Vec<f64>| ndarray::Array2::from_shape_vec((v.len() / 3, 3), v[..v.len() / 3 * 3].to_vec()).unwrap();
        let (x, y) = (rows(&a), rows(&b));
        prop_assume!(x.nrows() > 0 && y.nrows() > 0);
        let d1 = sentence_distance(&x, &y).unwrap();
        prop_assert!(d1 >= 0.0);
        prop_assert_eq!(d1, sentence_distance(&y, &x).unwrap());
        prop_assert_eq!(sentence_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn corruption_permutes_one_segment(
        first in prop::collection::vec(10u32..30, 1..10),
        second in prop::collection::vec(10u32..30, 1..10),
        seed in any::<u64>(),
        pick_first in any::<bool>(),
    ) {
        let mut tokens = vec![7];
        tokens.extend(&first);
        tokens.push(4);
        tokens.push(8);
        tokens.extend(&second);
        let segment = if pick_first { Segment::First } else { Segment::Second };
        let reserved = |t: u32| t < 10;
        let out = corrupt_input(&tokens, segment, seed, reserved).unwrap();
        prop_assert_eq!(&out, &corrupt_input(&tokens, segment, seed, reserved).unwrap());
        prop_assert_eq!(out.len(), tokens.len());
        let sep = first.len() + 1;
        prop_assert_eq!(out[0], 7);
        prop_assert_eq!(out[sep], 4);
        prop_assert_eq!(out[sep + 1], 8);
        let (moved, kept) = if pick_first { (1..sep, sep + 2..tokens.len()) } else { (sep + 2..tokens.len(), 1..sep) };
        prop_assert_eq!(&out[kept.clone()], &tokens[kept]);
        let mut a = out[moved.clone()].to_vec();
        let mut b = tokens[moved].to_vec();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }
}
