//! Property-based checks of the numeric building blocks.

use proptest::prelude::*;

use fedsim::clustering::{jaccard, FeatureSubset};
use fedsim::data::{rotate_image_90, ImageBatchMeta};
use fedsim::nncore::Tensor2;
use fedsim::simagg::{cosine_matrix, softmax_weights};

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(
        n in 2usize..7,
        vals in prop::collection::vec(-10.0f64..10.0, 49),
        tau in 0.05f64..5.0,
    ) {
        let s = Tensor2::from_vec(n, n, vals[..n * n].to_vec()).unwrap();
        let w = softmax_weights(&s, tau).unwrap();
        for r in 0..n {
            let row = w.alpha.row(r);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn cosine_matrix_is_symmetric_with_unit_diagonal(
        n in 2usize..6,
        d in 2usize..5,
        vals in prop::collection::vec(-5.0f64..5.0, 30),
    ) {
        let latents: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|j| vals[(i * d + j) % vals.len()] + 0.1).collect())
            .collect();
        let (s, dropped) = cosine_matrix(&latents).unwrap();
        if dropped.is_empty() {
            for i in 0..n {
                prop_assert!((s.get(i, i) - 1.0).abs() < 1e-9);
                for j in 0..n {
                    prop_assert!((s.get(i, j) - s.get(j, i)).abs() < 1e-12);
                    prop_assert!(s.get(i, j) <= 1.0 + 1e-9 && s.get(i, j) >= -1.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn rotating_four_quarter_turns_is_identity(
        side in 2usize..9,
        seed_vals in prop::collection::vec(0.0f64..1.0, 64),
    ) {
        let meta = ImageBatchMeta { side, channels: 1 };
        let img: Vec<f64> = (0..side * side).map(|i| seed_vals[i % seed_vals.len()]).collect();
        let mut out = img.clone();
        for _ in 0..4 {
            out = rotate_image_90(&out, meta, 1).unwrap();
        }
        prop_assert_eq!(out, img);
    }

    #[test]
    fn jaccard_is_bounded_and_symmetric(
        a in prop::collection::btree_set(0usize..20, 1..10),
        b in prop::collection::btree_set(0usize..20, 1..10),
    ) {
        let fa = FeatureSubset::new(a.into_iter().collect(), 20).unwrap();
        let fb = FeatureSubset::new(b.into_iter().collect(), 20).unwrap();
        let j = jaccard(&fa, &fb);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert!((j - jaccard(&fb, &fa)).abs() < 1e-15);
        prop_assert!((jaccard(&fa, &fa) - 1.0).abs() < 1e-15);
    }
}
