//! Imputation-quality metrics, ranking metrics and rank aggregation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{FeatureKind, MixedTable};

/// Reported R² when the truth is constant but the predictions are not.
pub const R2_SENTINEL: f64 = -1e9;

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation; 0 when either vector is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman correlation with average-rank ties; 0 for a constant vector.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousMetrics {
    pub nrmse: f64,
    pub mae: f64,
    /// Mean of `pred − truth`.
    pub mb: f64,
    pub r2: f64,
    pub spearman: f64,
}

pub fn continuous_metrics(
    truth: &[f64],
    pred: &[f64],
    feature_range: f64,
) -> Result<ContinuousMetrics> {
    if truth.is_empty() {
        return Err(Error::invalid("no cells to score"));
    }
    if truth.len() != pred.len() {
        return Err(Error::Shape("truth/prediction length mismatch".into()));
    }
    if !(feature_range > 0.0) {
        return Err(Error::invalid("feature range must be positive"));
    }
    let n = truth.len() as f64;
    let mean_t = truth.iter().sum::<f64>() / n;
    let (mut ss_res, mut abs, mut bias, mut ss_tot) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &p) in truth.iter().zip(pred) {
        ss_res += (p - t).powi(2);
        abs += (p - t).abs();
        bias += p - t;
        ss_tot += (t - mean_t).powi(2);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        0.0
    } else {
        R2_SENTINEL
    };
    Ok(ContinuousMetrics {
        nrmse: (ss_res / n).sqrt() / feature_range,
        mae: abs / n,
        mb: bias / n,
        r2,
        spearman: spearman(truth, pred),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: f64,
}

pub fn categorical_metrics(
    truth: &[usize],
    pred: &[usize],
    k: usize,
) -> Result<CategoricalMetrics> {
    if truth.is_empty() {
        return Err(Error::invalid("no cells to score"));
    }
    if truth.len() != pred.len() {
        return Err(Error::Shape("truth/prediction length mismatch".into()));
    }
    if truth.iter().chain(pred).any(|&c| c >= k) {
        return Err(Error::invalid(format!(
            "label out of range for {k} classes"
        )));
    }
    let n = truth.len() as f64;
    let mut confusion = Array2::<f64>::zeros((k, k));
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[[t, p]] += 1.0;
    }
    let correct: f64 = (0..k).map(|c| confusion[[c, c]]).sum();
    let accuracy = correct / n;
    let mut f1s = Vec::new();
    let mut p_e = 0.0;
    for c in 0..k {
        let tp = confusion[[c, c]];
        let actual: f64 = confusion.row(c).sum();
        let predicted: f64 = confusion.column(c).sum();
        p_e += (actual / n) * (predicted / n);
        if actual == 0.0 && predicted == 0.0 {
            continue;
        }
        f1s.push(2.0 * tp / (actual + predicted));
    }
    let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    let kappa = if p_e >= 1.0 {
        0.0
    } else {
        (accuracy - p_e) / (1.0 - p_e)
    };
    Ok(CategoricalMetrics {
        accuracy,
        macro_f1,
        kappa,
    })
}

/// Mann–Whitney AUROC with ties counted as one half. `None` without both a
/// positive and a negative.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auroc: length mismatch");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Average precision: `Σ (R_k − R_{k−1}) P_k` over descending score
/// thresholds, tied scores forming one threshold. `None` without a positive.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auprc: length mismatch");
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            if labels[idx[end]] {
                tp += 1;
            } else {
                fp += 1;
            }
            end += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
        start = end;
    }
    Some(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

/// Mean rank per method over settings. `scores[m][s]` is method `m`'s score in
/// setting `s`; rank 1 is best and ties share the average rank.
pub fn average_rank(scores: &[Vec<f64>], direction: Direction) -> Result<Vec<f64>> {
    let m = scores.len();
    if m == 0 {
        return Err(Error::invalid("no methods to rank"));
    }
    let s = scores[0].len();
    if s == 0 || scores.iter().any(|r| r.len() != s) {
        return Err(Error::Shape(
            "every method needs a score in every setting".into(),
        ));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "score table has missing or non-finite cells",
        ));
    }
    let mut totals = vec![0.0; m];
    for j in 0..s {
        let col: Vec<f64> = scores
            .iter()
            .map(|r| match direction {
                Direction::LowerIsBetter => r[j],
                Direction::HigherIsBetter => -r[j],
            })
            .collect();
        for (t, r) in totals.iter_mut().zip(average_ranks(&col)) {
            *t += r;
        }
    }
    Ok(totals.into_iter().map(|t| t / s as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: usize,
    pub name: String,
    pub n_cells: usize,
    pub continuous: Option<ContinuousMetrics>,
    pub categorical: Option<CategoricalMetrics>,
}

/// Per-feature scores on the masked cells plus their macro-averages by type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub features: Vec<FeatureScore>,
    pub continuous: Option<ContinuousMetrics>,
    pub categorical: Option<CategoricalMetrics>,
}

fn mean_of<T>(items: &[T], f: impl Fn(&T) -> f64) -> f64 {
    items.iter().map(f).sum::<f64>() / items.len() as f64
}

/// Scores `imputed` against `truth` at every cell that is missing in `masked`.
/// NRMSE ranges come from the complete truth column; constant truth columns
/// are skipped for continuous scoring.
pub fn evaluate_imputation(
    truth: &MixedTable,
    masked: &MixedTable,
    imputed: &Array2<f64>,
) -> Result<Evaluation> {
    let dim = (truth.n_rows(), truth.n_features());
    if (masked.n_rows(), masked.n_features()) != dim || imputed.dim() != dim {
        return Err(Error::Shape(
            "truth, masked and imputed tables differ in shape".into(),
        ));
    }
    if truth.missing_count() != 0 {
        return Err(Error::invalid("truth table must be complete"));
    }
    let mut features = Vec::new();
    for j in 0..dim.1 {
        let rows: Vec<usize> = (0..dim.0).filter(|&i| !masked.is_observed(i, j)).collect();
        if rows.is_empty() {
            continue;
        }
        let spec = truth.schema().feature(j);
        let mut score = FeatureScore {
            feature: j,
            name: spec.name.clone(),
            n_cells: rows.len(),
            continuous: None,
            categorical: None,
        };
        match spec.kind {
            FeatureKind::Continuous => {
                let col = truth.cells().column(j);
                let (lo, hi) = col
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                        (l.min(v), h.max(v))
                    });
                if hi > lo {
                    let t: Vec<f64> = rows.iter().map(|&i| truth.cells()[[i, j]]).collect();
                    let p: Vec<f64> = rows.iter().map(|&i| imputed[[i, j]]).collect();
                    score.continuous = Some(continuous_metrics(&t, &p, hi - lo)?);
                }
            }
            FeatureKind::Categorical => {
                let t: Vec<usize> = rows
                    .iter()
                    .map(|&i| truth.cells()[[i, j]] as usize)
                    .collect();
                let p: Vec<usize> = rows.iter().map(|&i| imputed[[i, j]] as usize).collect();
                score.categorical = Some(categorical_metrics(&t, &p, spec.n_categories())?);
            }
        }
        features.push(score);
    }
    let cont: Vec<ContinuousMetrics> = features.iter().filter_map(|f| f.continuous).collect();
    let cat: Vec<CategoricalMetrics> = features.iter().filter_map(|f| f.categorical).collect();
    Ok(Evaluation {
        continuous: (!cont.is_empty()).then(|| ContinuousMetrics {
            nrmse: mean_of(&cont, |m| m.nrmse),
            mae: mean_of(&cont, |m| m.mae),
            mb: mean_of(&cont, |m| m.mb),
            r2: mean_of(&cont, |m| m.r2),
            spearman: mean_of(&cont, |m| m.spearman),
        }),
        categorical: (!cat.is_empty()).then(|| CategoricalMetrics {
            accuracy: mean_of(&cat, |m| m.accuracy),
            macro_f1: mean_of(&cat, |m| m.macro_f1),
            kappa: mean_of(&cat, |m| m.kappa),
        }),
        features,
    })
}
