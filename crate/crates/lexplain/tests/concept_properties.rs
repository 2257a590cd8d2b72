//! Generative property checks for concept models over random shapes, data,
//! and seeds.

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lexplain::activations::ActivationBundle;
use lexplain::concept::models::{fit, ConceptKind, FitConfig, SAEConfig};
use lexplain::text::ActivationGranularity;

fn bundle(n: usize, d: usize, seed: u64) -> ActivationBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ActivationBundle {
        matrix: Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0f32..2.0)),
        granularity: ActivationGranularity::AllTokens,
        provenance: (0..n).map(|i| (i, 0)).collect(),
        split_point: "layer_1".to_string(),
    }
}

fn shapes() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (20usize..80, 4usize..10, any::<u64>()).prop_flat_map(|(n, d, seed)| {
        (Just(n), Just(d), 2usize..=d.min(6), Just(seed))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 25, ..ProptestConfig::default() })]

    #[test]
    fn kmeans_encodings_are_one_hot((n, d, c, seed) in shapes()) {
        let b = bundle(n, d, seed);
        let cfg = FitConfig { c, seed, ..Default::default() };
        let m = fit(ConceptKind::KMeans, &b, &cfg).unwrap();
        let t = m.encode(&b.matrix.mapv(|v| v as f64)).unwrap();
        for row in t.rows() {
            prop_assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), c - 1);
        }
    }

    #[test]
    fn pca_svd_dictionaries_orthonormal((n, d, c, seed) in shapes()) {
        let b = bundle(n, d, seed);
        let cfg = FitConfig { c, seed, ..Default::default() };
        for kind in [ConceptKind::Pca, ConceptKind::Svd] {
            let m = fit(kind, &b, &cfg).unwrap();
            let gram = m.dictionary.dot(&m.dictionary.t());
            for i in 0..c {
                for j in 0..c {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((gram[[i, j]] - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn nmf_factors_nonnegative((n, d, c, seed) in shapes()) {
        let b = bundle(n, d, seed);
        let cfg = FitConfig { c, seed, ..Default::default() };
        let m = fit(ConceptKind::Nmf, &b, &cfg).unwrap();
        prop_assert!(m.dictionary.iter().all(|&v| v >= 0.0));
        let t = m.encode(&b.matrix.mapv(|v| v as f64)).unwrap();
        prop_assert!(t.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn topk_rows_respect_sparsity_budget((n, d, c, seed) in shapes()) {
        let b = bundle(n, d, seed);
        let k = 1 + (c - 1) / 2;
        let cfg = FitConfig {
            c,
            seed,
            sae: SAEConfig { k, epochs: 10, batch_size: 16, ..Default::default() },
            ..Default::default()
        };
        let m = fit(ConceptKind::SaeTopK, &b, &cfg).unwrap();
        let t = m.encode(&b.matrix.mapv(|v| v as f64)).unwrap();
        for row in t.rows() {
            prop_assert!(row.iter().filter(|&&v| v != 0.0).count() <= k);
        }
    }

    #[test]
    fn save_load_preserves_encode_bitwise((n, d, c, seed) in shapes()) {
        let b = bundle(n, d, seed);
        let cfg = FitConfig { c, seed, ..Default::default() };
        let m = fit(ConceptKind::Pca, &b, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cpt");
        lexplain::concept::models::save_model(&m, &path).unwrap();
        let loaded = lexplain::concept::models::load_model(&path).unwrap();
        let a = b.matrix.mapv(|v| v as f64);
        let t1 = m.encode(&a).unwrap();
        let t2 = loaded.encode(&a).unwrap();
        for (x, y) in t1.iter().zip(t2.iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
