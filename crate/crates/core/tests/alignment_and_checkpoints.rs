use ffkv_core::alignment::{align_dictionaries, bin_histogram, partition};
use ffkv_core::checkpoint::{load_coder, load_model, model_digest, save_coder, save_model};
use ffkv_core::coders::{FeatureCoder, TopKConfig};
use ffkv_core::lm::{ActivationKind, Model, ModelConfig, Tokenizer};
use ffkv_core::metrics::tpp_score;
use ffkv_core::numerics::{mean_and_2sem, Matrix, RngStream};
use proptest::prelude::*;

fn dict(rows: usize, cols: usize, seed: u64) -> Matrix {
    RngStream::new(seed, 9).normal_matrix(rows, cols, 1.0)
}

/// Cosine of every pair in f64, no normalization shortcuts.
fn brute(a: &Matrix, b: &Matrix) -> Vec<(f64, usize)> {
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    a.row_iter()
        .map(|x| {
            (0..b.rows())
                .map(|k| {
                    let y = b.row(k);
                    let c = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum::<f64>() / (norm(x) * norm(y));
                    (c, k)
                })
                .fold((f64::NEG_INFINITY, 0), |best, c| if c.0 > best.0 { c } else { best })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mcs_matches_brute_force(na in 1usize..40, nb in 1usize..90, d in 2usize..20, seed in any::<u64>()) {
        let (a, b) = (dict(na, d, seed), dict(nb, d, seed ^ 1));
        let t = align_dictionaries(&a, &b).unwrap();
        prop_assert_eq!(t.entries.len(), na);
        for (e, (s, k)) in t.entries.iter().zip(brute(&a, &b)) {
            prop_assert_eq!(e.matched, k);
            prop_assert!((e.score - s).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&e.score));
        }
    }

    #[test]
    fn partitions_and_histograms_account_for_every_feature(n in 1usize..60, seed in any::<u64>(), bins in 1usize..12) {
        let t = align_dictionaries(&dict(n, 6, seed), &dict(30, 6, !seed)).unwrap();
        let p = partition(&t, 0.3, 0.9).unwrap();
        prop_assert_eq!(p.aligned.len() + p.middle.len() + p.unaligned.len(), n);
        prop_assert!((p.fraction_aligned() + p.fraction_middle() + p.fraction_unaligned() - 1.0).abs() < 1e-12);
        let h = bin_histogram(&t, bins).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn scaling_rows_does_not_change_alignment(seed in any::<u64>(), s in 0.01f32..100.0) {
        let (a, b) = (dict(12, 5, seed), dict(20, 5, seed + 1));
        let mut scaled = b.clone();
        scaled.scale(s);
        let (t1, t2) = (align_dictionaries(&a, &b).unwrap(), align_dictionaries(&a, &scaled).unwrap());
        for (x, y) in t1.entries.iter().zip(&t2.entries) {
            prop_assert_eq!(x.matched, y.matched);
            prop_assert!((x.score - y.score).abs() < 1e-6);
        }
    }

    #[test]
    fn two_sem_band_matches_the_textbook_formula(xs in prop::collection::vec(-10.0f64..10.0, 2..40)) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let (m, band) = mean_and_2sem(&xs);
        prop_assert!((m - mean).abs() < 1e-12);
        prop_assert!((band - 2.0 * (var / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn uniform_targeted_damage_is_recovered(delta in 0.0f64..0.5, m in 2usize..6) {
        let acc: Vec<f64> = (0..m).map(|j| 0.5 + 0.08 * j as f64).collect();
        let cross: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..m).map(|j| if i == j { acc[j] - delta } else { acc[j] }).collect())
            .collect();
        prop_assert!((tpp_score(&acc, &cross).unwrap() - delta).abs() < 1e-12);
    }
}

#[test]
fn self_alignment_is_the_identity() {
    let a = dict(25, 8, 1);
    for e in align_dictionaries(&a, &a).unwrap().entries {
        assert_eq!(e.matched, e.feature);
        assert!((e.score - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_rows_are_flagged_not_matched() {
    let mut a = dict(4, 3, 2);
    a.row_mut(2).fill(0.0);
    let t = align_dictionaries(&a, &dict(5, 3, 3)).unwrap();
    assert!(t.entries[2].zero_norm);
    assert!(t.entries.iter().filter(|e| e.zero_norm).count() == 1);
    assert!(align_dictionaries(&a, &dict(5, 4, 3)).is_err());
}

fn model(seed: u64) -> Model {
    let tok = Tokenizer::byte_level();
    let mut cfg = ModelConfig::desk(tok.vocab_size());
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.n_heads = 2;
    cfg.activation = ActivationKind::Swiglu;
    cfg.seed = seed;
    Model::random_init(&cfg, tok).unwrap()
}

#[test]
fn checkpoints_round_trip_and_bind_to_their_model() {
    let tmp = tempfile::tempdir().unwrap();
    let m = model(1);
    let path = tmp.path().join("m.ckpt");
    save_model(&path, &m).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(model_digest(&back), model_digest(&m));
    assert_ne!(model_digest(&model(2)), model_digest(&m));

    let coder = FeatureCoder::topk_ffkv(&m, 1, TopKConfig::with_k(5)).unwrap();
    let cpath = tmp.path().join("c.ckpt");
    save_coder(&cpath, &coder, Some(&m)).unwrap();
    let loaded = load_coder(&cpath, Some(&m)).unwrap();
    let x = RngStream::new(0, 0).normal_matrix(4, 16, 1.0);
    assert_eq!(loaded.encode(&x).unwrap(), coder.encode(&x).unwrap());
    assert_eq!(loaded.topk().map(|t| t.k), Some(5));
    // an FF-KV binding refuses a different model
    assert!(load_coder(&cpath, Some(&model(2))).is_err());
    assert!(load_coder(&path, Some(&m)).is_err());
}
