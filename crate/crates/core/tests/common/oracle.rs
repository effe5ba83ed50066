//! Brute-force reimplementations and the checks that compare against them.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sni_core::baselines::{gower_distance, gower_ranges};
use sni_core::metrics::{auprc, auroc, categorical_metrics, continuous_metrics};
use sni_core::prior::pearson_corr;
use sni_core::table::{CorrelationDesign, FeatureSchema, FeatureSpec, MixedTable};

pub const TOL: f64 = 1e-12;

pub fn close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() <= TOL, "{what}: {a} vs {b}");
}

/// Small integers so that ties occur.
fn tied_values(rng: &mut ChaCha8Rng, n: usize, levels: i32) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..levels) as f64).collect()
}

pub fn pearson_corr_matches_two_pass_covariance() {
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..20);
        let p = rng.random_range(2..6);
        let mut m = Array2::from_shape_fn((n, p), |_| rng.random_range(-3.0..3.0));
        if seed % 5 == 0 {
            m.column_mut(0).fill(1.5);
        }
        let rows: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.8)).collect();
        if rows.len() < 2 {
            continue;
        }
        let design = CorrelationDesign {
            matrix: m.clone(),
            column_groups: (0..p).map(|c| c..c + 1).collect(),
        };
        let sigma = pearson_corr(&design, &rows).unwrap().sigma;
        for a in 0..p {
            for b in 0..p {
                let xa: Vec<f64> = rows.iter().map(|&i| m[[i, a]]).collect();
                let xb: Vec<f64> = rows.iter().map(|&i| m[[i, b]]).collect();
                let k = xa.len() as f64;
                let (ma, mb) = (xa.iter().sum::<f64>() / k, xb.iter().sum::<f64>() / k);
                let cov: f64 = xa.iter().zip(&xb).map(|(u, v)| (u - ma) * (v - mb)).sum();
                let va: f64 = xa.iter().map(|u| (u - ma) * (u - ma)).sum();
                let vb: f64 = xb.iter().map(|v| (v - mb) * (v - mb)).sum();
                let expected = if a == b {
                    1.0
                } else if va < 1e-20 || vb < 1e-20 {
                    0.0
                } else {
                    cov / (va * vb).sqrt()
                };
                close(sigma[[a, b]], expected, "pearson");
            }
        }
    }
}

fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    // rank = 1 + #smaller + (#equal − 1)/2
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let eq = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let (mx, my) = (sx / n, sy / n);
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>()
        * y.iter().map(|b| (b - my).powi(2)).sum::<f64>())
    .sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn continuous_metrics_match_oracle() {
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..25);
        let truth = if seed % 3 == 0 {
            tied_values(&mut rng, n, 4)
        } else {
            (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
        };
        let pred: Vec<f64> = if seed % 4 == 0 {
            tied_values(&mut rng, n, 3)
        } else {
            truth
                .iter()
                .map(|t| t + rng.random_range(-2.0..2.0))
                .collect()
        };
        let range = rng.random_range(0.5..12.0);
        let m = continuous_metrics(&truth, &pred, range).unwrap();

        let k = n as f64;
        let err: Vec<f64> = pred.iter().zip(&truth).map(|(p, t)| p - t).collect();
        let mse = err.iter().map(|e| e * e).sum::<f64>() / k;
        close(m.nrmse, mse.sqrt() / range, "nrmse");
        close(m.mae, err.iter().map(|e| e.abs()).sum::<f64>() / k, "mae");
        close(m.mb, err.iter().sum::<f64>() / k, "mb");
        let mt = truth.iter().sum::<f64>() / k;
        let ss_tot: f64 = truth.iter().map(|t| (t - mt).powi(2)).sum();
        if ss_tot > 0.0 {
            close(m.r2, 1.0 - mse * k / ss_tot, "r2");
        }
        close(
            m.spearman,
            oracle_pearson(&oracle_ranks(&truth), &oracle_ranks(&pred)),
            "spearman",
        );
    }
}

pub fn categorical_metrics_match_oracle() {
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(2..5);
        let n = rng.random_range(1..30);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| {
                if rng.random_bool(0.6) {
                    t
                } else {
                    rng.random_range(0..k)
                }
            })
            .collect();
        let m = categorical_metrics(&truth, &pred, k).unwrap();

        let nf = n as f64;
        let acc = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / nf;
        close(m.accuracy, acc, "accuracy");
        let mut f1 = Vec::new();
        let mut pe = 0.0;
        for c in 0..k {
            let tp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == c && p == c)
                .count() as f64;
            let fp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t != c && p == c)
                .count() as f64;
            let fn_ = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == c && p != c)
                .count() as f64;
            let nt = truth.iter().filter(|&&t| t == c).count() as f64;
            let np = pred.iter().filter(|&&p| p == c).count() as f64;
            pe += nt * np / (nf * nf);
            if nt == 0.0 && np == 0.0 {
                continue;
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            f1.push(if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            });
        }
        close(
            m.macro_f1,
            f1.iter().sum::<f64>() / f1.len() as f64,
            "macro_f1",
        );
        let kappa = if pe >= 1.0 {
            0.0
        } else {
            (acc - pe) / (1.0 - pe)
        };
        close(m.kappa, kappa, "kappa");
    }
}

pub fn auroc_matches_all_pairs() {
    let mut checked = 0;
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..15);
        let scores = if seed % 2 == 0 {
            tied_values(&mut rng, n, 4)
        } else {
            (0..n).map(|_| rng.random::<f64>()).collect()
        };
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| labels[i]);
        let got = auroc(&scores, &labels);
        if pos.is_empty() || neg.is_empty() {
            assert!(got.is_none());
            continue;
        }
        let mut wins = 0.0;
        for &p in &pos {
            for &q in &neg {
                wins += if scores[p] > scores[q] {
                    1.0
                } else if scores[p] == scores[q] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        close(got.unwrap(), wins / (pos.len() * neg.len()) as f64, "auroc");
        checked += 1;
    }
    assert!(checked >= 50);
}

pub fn auprc_matches_threshold_sweep() {
    let mut checked = 0;
    for seed in 0..80u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..15);
        let scores = if seed % 2 == 0 {
            tied_values(&mut rng, n, 3)
        } else {
            (0..n).map(|_| rng.random::<f64>()).collect()
        };
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let total_pos = labels.iter().filter(|&&l| l).count();
        let got = auprc(&scores, &labels);
        if total_pos == 0 {
            assert!(got.is_none());
            continue;
        }
        let mut thresholds = scores.clone();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let (mut ap, mut prev) = (0.0, 0.0);
        for t in thresholds {
            let tp = (0..n).filter(|&i| scores[i] >= t && labels[i]).count() as f64;
            let fp = (0..n).filter(|&i| scores[i] >= t && !labels[i]).count() as f64;
            let recall = tp / total_pos as f64;
            ap += (recall - prev) * tp / (tp + fp);
            prev = recall;
        }
        close(got.unwrap(), ap, "auprc");
        checked += 1;
    }
    assert!(checked >= 50);
}

/// Random mixed table: column 0 and 2 continuous, 1 and 3 categorical.
pub fn mixed_table(rng: &mut ChaCha8Rng, n: usize, missing: f64) -> MixedTable {
    let schema = FeatureSchema::new(vec![
        FeatureSpec::continuous("a"),
        FeatureSpec::categorical("b", ["p", "q", "r"]),
        FeatureSpec::continuous("c"),
        FeatureSpec::categorical("d", ["u", "v"]),
    ])
    .unwrap();
    let cells = Array2::from_shape_fn((n, 4), |(_, j)| match j {
        1 => rng.random_range(0..3) as f64,
        3 => rng.random_range(0..2) as f64,
        _ => (rng.random_range(-4.0f64..4.0) * 4.0).round() / 4.0,
    });
    let mut mask = Array2::from_shape_fn((n, 4), |_| !rng.random_bool(missing));
    // keep at least one observed cell per column
    for j in 0..4 {
        mask[[j % n, j]] = true;
    }
    MixedTable::new(schema, cells, mask).unwrap()
}

pub fn gower_matches_direct_formula() {
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..10);
        let t = mixed_table(&mut rng, n, 0.25);
        let ranges = gower_ranges(&t);
        for a in 0..n {
            for b in 0..n {
                let mut parts = Vec::new();
                for j in 0..4 {
                    if !(t.is_observed(a, j) && t.is_observed(b, j)) {
                        continue;
                    }
                    let (x, y) = (t.cells()[[a, j]], t.cells()[[b, j]]);
                    if j % 2 == 1 {
                        parts.push(if x == y { 0.0 } else { 1.0 });
                    } else {
                        let vals: Vec<f64> = (0..n)
                            .filter(|&i| t.is_observed(i, j))
                            .map(|i| t.cells()[[i, j]])
                            .collect();
                        let r = vals.iter().cloned().fold(f64::MIN, f64::max)
                            - vals.iter().cloned().fold(f64::MAX, f64::min);
                        parts.push(if r > 0.0 { (x - y).abs() / r } else { 0.0 });
                    }
                }
                let expected = if parts.is_empty() {
                    1.0
                } else {
                    parts.iter().sum::<f64>() / parts.len() as f64
                };
                let got = gower_distance(&t, &ranges, a, b);
                close(got, expected, "gower");
                close(got, gower_distance(&t, &ranges, b, a), "gower symmetry");
                assert!((0.0..=1.0).contains(&got));
            }
        }
    }
}
