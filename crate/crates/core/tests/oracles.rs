//! Library routines against brute-force reimplementations.

mod common;

use common::oracle::{self, close, mixed_table, TOL};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sni_core::baselines::{gower_distance, gower_ranges, knn_gower_impute, mean_mode_impute};
use sni_core::table::{FeatureSchema, FeatureSpec, MixedTable};

#[test]
fn pearson_corr_matches_two_pass_covariance() {
    oracle::pearson_corr_matches_two_pass_covariance();
}

#[test]
fn continuous_metrics_match_oracle() {
    oracle::continuous_metrics_match_oracle();
}

#[test]
fn categorical_metrics_match_oracle() {
    oracle::categorical_metrics_match_oracle();
}

#[test]
fn auroc_matches_all_pairs() {
    oracle::auroc_matches_all_pairs();
}

#[test]
fn auprc_matches_threshold_sweep() {
    oracle::auprc_matches_threshold_sweep();
}

#[test]
fn gower_matches_direct_formula() {
    oracle::gower_matches_direct_formula();
}

#[test]
fn gower_hand_example() {
    let schema = FeatureSchema::new(vec![
        FeatureSpec::continuous("x"),
        FeatureSpec::categorical("c", ["a", "b"]),
    ])
    .unwrap();
    let t = MixedTable::complete(schema, ndarray::array![[0.0, 0.0], [1.0, 1.0]]).unwrap();
    assert_eq!(gower_distance(&t, &gower_ranges(&t), 0, 1), 1.0);
}

#[test]
fn knn_with_all_donors_equals_column_mean_mode() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = mixed_table(&mut rng, 8, 0.0);
        let mut mask = t.mask().clone();
        let (i, j) = (rng.random_range(0..8), rng.random_range(0..4));
        mask[[i, j]] = false;
        let t = t.with_mask(mask).unwrap();
        let knn = knn_gower_impute(&t, 7).unwrap();
        let donors: Vec<f64> = (0..8)
            .filter(|&r| r != i)
            .map(|r| t.cells()[[r, j]])
            .collect();
        let expected = if j % 2 == 0 {
            donors.iter().sum::<f64>() / donors.len() as f64
        } else {
            let k = if j == 1 { 3 } else { 2 };
            let counts: Vec<usize> = (0..k)
                .map(|c| donors.iter().filter(|&&v| v == c as f64).count())
                .collect();
            let best = *counts.iter().max().unwrap();
            counts.iter().position(|&c| c == best).unwrap() as f64
        };
        close(knn.cells()[[i, j]], expected, "knn k=n-1");
        close(
            mean_mode_impute(&t).unwrap().cells()[[i, j]],
            expected,
            "mean/mode",
        );
        for r in 0..8 {
            for c in 0..4 {
                if (r, c) != (i, j) {
                    assert_eq!(knn.cells()[[r, c]], t.cells()[[r, c]]);
                }
            }
        }
    }
}

#[test]
fn knn_copies_identical_donor() {
    let schema = FeatureSchema::new(vec![
        FeatureSpec::continuous("x"),
        FeatureSpec::continuous("y"),
    ])
    .unwrap();
    let cells = ndarray::array![[1.0, 5.0], [1.0, 0.0], [9.0, 9.0], [7.0, 2.0]];
    let mut mask = Array2::from_elem((4, 2), true);
    mask[[1, 1]] = false;
    let t = MixedTable::new(schema, cells, mask).unwrap();
    assert_eq!(knn_gower_impute(&t, 1).unwrap().cells()[[1, 1]], 5.0);
    // k beyond the donor count uses every donor
    assert!((knn_gower_impute(&t, 50).unwrap().cells()[[1, 1]] - 16.0 / 3.0).abs() < TOL);
}
