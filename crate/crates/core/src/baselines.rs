//! Mean/mode and Gower k-nearest-neighbour imputers.

use ndarray::Array2;
use rayon::prelude::*;

use crate::engine::initialize;
use crate::error::{Error, Result};
use crate::table::{FeatureKind, MixedTable};

pub const DEFAULT_K: usize = 5;

pub fn mean_mode_impute(t: &MixedTable) -> Result<MixedTable> {
    MixedTable::from_completed(t.schema().clone(), initialize(t)?)
}

/// Observed value range per feature (0 for categorical or fully missing columns).
pub fn gower_ranges(t: &MixedTable) -> Vec<f64> {
    (0..t.n_features())
        .map(|j| match t.schema().feature(j).kind {
            FeatureKind::Categorical => 0.0,
            FeatureKind::Continuous => {
                let (lo, hi) = t
                    .observed_column(j)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), (_, v)| {
                        (l.min(v), h.max(v))
                    });
                if hi > lo {
                    hi - lo
                } else {
                    0.0
                }
            }
        })
        .collect()
}

/// Mean per-feature dissimilarity over co-observed features; 1 when none are
/// co-observed. Zero-range continuous features contribute 0.
pub fn gower_distance(t: &MixedTable, ranges: &[f64], a: usize, b: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (j, &range) in ranges.iter().enumerate() {
        if !(t.is_observed(a, j) && t.is_observed(b, j)) {
            continue;
        }
        let (x, y) = (t.cells()[[a, j]], t.cells()[[b, j]]);
        total += match t.schema().feature(j).kind {
            FeatureKind::Continuous if range > 0.0 => (x - y).abs() / range,
            FeatureKind::Continuous => 0.0,
            FeatureKind::Categorical => f64::from(u8::from(x != y)),
        };
        count += 1;
    }
    if count == 0 {
        1.0
    } else {
        total / count as f64
    }
}

/// Each missing cell takes the mean (continuous) or mode (categorical, ties to
/// the lowest index) of its `k` nearest donors that observe the feature.
/// Distance ties go to the lower row index; cells with no donor fall back to
/// the column mean/mode.
pub fn knn_gower_impute(t: &MixedTable, k: usize) -> Result<MixedTable> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let fallback = initialize(t)?;
    let ranges = gower_ranges(t);
    let (n, d) = (t.n_rows(), t.n_features());
    let rows: Vec<(usize, Vec<(usize, f64)>)> = (0..n)
        .into_par_iter()
        .filter(|&i| (0..d).any(|j| !t.is_observed(i, j)))
        .map(|i| {
            let mut dist: Vec<(f64, usize)> = (0..n)
                .filter(|&r| r != i)
                .map(|r| (gower_distance(t, &ranges, i, r), r))
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let fills = (0..d)
                .filter(|&j| !t.is_observed(i, j))
                .map(|j| {
                    let donors: Vec<f64> = dist
                        .iter()
                        .filter(|&&(_, r)| t.is_observed(r, j))
                        .take(k)
                        .map(|&(_, r)| t.cells()[[r, j]])
                        .collect();
                    let v = if donors.is_empty() {
                        fallback[[i, j]]
                    } else {
                        match t.schema().feature(j).kind {
                            FeatureKind::Continuous => {
                                donors.iter().sum::<f64>() / donors.len() as f64
                            }
                            FeatureKind::Categorical => {
                                let mut counts = vec![0usize; t.schema().feature(j).n_categories()];
                                for &v in &donors {
                                    counts[v as usize] += 1;
                                }
                                let mut best = 0;
                                for (c, &m) in counts.iter().enumerate() {
                                    if m > counts[best] {
                                        best = c;
                                    }
                                }
                                best as f64
                            }
                        }
                    };
                    (j, v)
                })
                .collect();
            (i, fills)
        })
        .collect();
    let mut out: Array2<f64> = t.cells().clone();
    for (i, fills) in rows {
        for (j, v) in fills {
            out[[i, j]] = v;
        }
    }
    MixedTable::from_completed(t.schema().clone(), out)
}
