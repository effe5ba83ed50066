//! Correlation-derived priors over source features.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::CorrelationDesign;

/// Variance threshold under which a design column counts as constant.
const DEGENERATE_VAR: f64 = 1e-24;

/// Clamp applied before `atanh` so that |ρ| = 1 stays finite.
const FISHER_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMatrix {
    pub sigma: Array2<f64>,
    pub fisher_applied: bool,
}

/// Pearson correlation between every pair of design columns over `rows`.
/// Constant columns correlate 0 with everything and 1 with themselves.
pub fn pearson_corr(design: &CorrelationDesign, rows: &[usize]) -> Result<AssociationMatrix> {
    if rows.len() < 2 {
        return Err(Error::invalid(format!(
            "correlation needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let p = design.n_expanded();
    let m = rows.len() as f64;
    let mut centered = Array2::<f64>::zeros((rows.len(), p));
    for c in 0..p {
        let mean = rows.iter().map(|&i| design.matrix[[i, c]]).sum::<f64>() / m;
        for (r, &i) in rows.iter().enumerate() {
            centered[[r, c]] = design.matrix[[i, c]] - mean;
        }
    }
    let cov = centered.t().dot(&centered);
    let mut sigma = Array2::<f64>::zeros((p, p));
    for a in 0..p {
        for b in 0..p {
            let va = cov[[a, a]];
            let vb = cov[[b, b]];
            sigma[[a, b]] = if a == b {
                1.0
            } else if va <= DEGENERATE_VAR * m || vb <= DEGENERATE_VAR * m {
                0.0
            } else {
                (cov[[a, b]] / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(AssociationMatrix {
        sigma,
        fisher_applied: false,
    })
}

/// Fisher z-transform of the off-diagonal entries.
pub fn fisher_z(sigma: &AssociationMatrix) -> AssociationMatrix {
    let mut out = sigma.sigma.clone();
    for ((a, b), v) in out.indexed_iter_mut() {
        if a != b {
            *v = v.clamp(-FISHER_CLAMP, FISHER_CLAMP).atanh();
        }
    }
    AssociationMatrix {
        sigma: out,
        fisher_applied: true,
    }
}

/// Simplex weights over the source features of one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorVector {
    pub target: usize,
    /// Source feature index for each weight, ascending, target excluded.
    pub sources: Vec<usize>,
    pub weights: Vec<f64>,
}

impl PriorVector {
    pub fn uniform(target: usize, d: usize) -> Self {
        let sources: Vec<usize> = (0..d).filter(|&j| j != target).collect();
        let w = 1.0 / sources.len() as f64;
        Self {
            target,
            weights: vec![w; sources.len()],
            sources,
        }
    }

    /// Length-`d` row with zero at the target position.
    pub fn to_row(&self, d: usize) -> Vec<f64> {
        let mut row = vec![0.0; d];
        for (&j, &w) in self.sources.iter().zip(&self.weights) {
            row[j] = w;
        }
        row
    }
}

/// Raw relevance scores `r_{f→j}`: the mean of |Σ| over the expanded column
/// pairs of target `f` and source `j`. Returns `(sources, scores)`.
pub fn relevance_scores(
    sigma: &AssociationMatrix,
    design: &CorrelationDesign,
    target: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = design.column_groups.len();
    if d < 2 {
        return Err(Error::invalid("a prior needs at least two features"));
    }
    if target >= d {
        return Err(Error::invalid(format!(
            "target {target} out of range for {d} features"
        )));
    }
    let tgt = &design.column_groups[target];
    let mut sources = Vec::with_capacity(d - 1);
    let mut scores = Vec::with_capacity(d - 1);
    for (j, grp) in design.column_groups.iter().enumerate() {
        if j == target {
            continue;
        }
        let mut acc = 0.0;
        for k in tgt.clone() {
            for l in grp.clone() {
                acc += sigma.sigma[[l, k]].abs();
            }
        }
        sources.push(j);
        scores.push(acc / (tgt.len() * grp.len()) as f64);
    }
    Ok((sources, scores))
}

/// Normalized prior for `target`. An all-zero score vector falls back to
/// uniform weights.
pub fn aggregate_prior(
    sigma: &AssociationMatrix,
    design: &CorrelationDesign,
    target: usize,
) -> Result<PriorVector> {
    let (sources, scores) = relevance_scores(sigma, design, target)?;
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Ok(PriorVector::uniform(target, design.column_groups.len()));
    }
    let weights = scores.iter().map(|s| s / total).collect();
    Ok(PriorVector {
        target,
        sources,
        weights,
    })
}

/// Priors for every feature, stacked as a `d × d` matrix with zero diagonal.
pub fn prior_matrix(sigma: &AssociationMatrix, design: &CorrelationDesign) -> Result<Array2<f64>> {
    let d = design.column_groups.len();
    let mut out = Array2::zeros((d, d));
    for f in 0..d {
        let p = aggregate_prior(sigma, design, f)?;
        for (j, w) in p.to_row(d).into_iter().enumerate() {
            out[[f, j]] = w;
        }
    }
    Ok(out)
}
