//! Dependency matrices assembled from per-target attention, hubness, and
//! edge-recovery scores against a known graph.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cpfa::ModelSummary;
use crate::error::{Error, Result};
use crate::metrics::{auprc, auroc, spearman};
use crate::table::FeatureSchema;

/// `d × d` reliance matrix: row = target, column = source, zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DependencyMatrix {
    pub names: Vec<String>,
    pub values: Array2<f64>,
}

/// Ground-truth parent sets: `adjacency[[i, j]]` is true when `j` is a parent of `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthGraph {
    pub adjacency: Array2<bool>,
}

impl GroundTruthGraph {
    pub fn n_features(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn parents(&self, i: usize) -> Vec<usize> {
        (0..self.n_features())
            .filter(|&j| self.adjacency[[i, j]])
            .collect()
    }

    /// Number of children of each feature.
    pub fn out_degree(&self) -> Vec<f64> {
        (0..self.n_features())
            .map(|j| self.adjacency.column(j).iter().filter(|&&b| b).count() as f64)
            .collect()
    }

    /// A topological order of the features, or `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let d = self.n_features();
        let mut indeg: Vec<usize> = (0..d).map(|i| self.parents(i).len()).collect();
        let mut ready: Vec<usize> = (0..d).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(d);
        while let Some(j) = ready.pop() {
            order.push(j);
            for i in 0..d {
                if self.adjacency[[i, j]] {
                    indeg[i] -= 1;
                    if indeg[i] == 0 {
                        ready.push(i);
                    }
                }
            }
        }
        (order.len() == d).then_some(order)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScores {
    pub auroc: f64,
    pub auprc: f64,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub hub_rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub target: String,
    pub source: String,
    pub weight: f64,
}

impl DependencyMatrix {
    pub fn zeros(d: usize) -> Self {
        Self {
            names: (0..d).map(|j| format!("x{j}")).collect(),
            values: Array2::zeros((d, d)),
        }
    }

    /// Wraps a matrix, zeroing its diagonal.
    pub fn from_values(names: Vec<String>, mut values: Array2<f64>) -> Result<Self> {
        let d = names.len();
        if values.dim() != (d, d) {
            return Err(Error::Shape(format!("dependency matrix must be {d} x {d}")));
        }
        for i in 0..d {
            values[[i, i]] = 0.0;
        }
        Ok(Self { names, values })
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    /// Incoming mass per source: column sums.
    pub fn hubness(&self) -> Vec<f64> {
        self.values.columns().into_iter().map(|c| c.sum()).collect()
    }

    pub fn hubness_map(&self) -> BTreeMap<String, f64> {
        self.names.iter().cloned().zip(self.hubness()).collect()
    }

    /// Off-diagonal positive entries, heaviest first (ties by target then source index).
    pub fn edges(&self) -> Vec<Edge> {
        let d = self.n_features();
        let mut e: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..d {
            for j in 0..d {
                let w = self.values[[i, j]];
                if i != j && w > 0.0 {
                    e.push((i, j, w));
                }
            }
        }
        e.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        e.into_iter()
            .map(|(i, j, w)| Edge {
                target: self.names[i].clone(),
                source: self.names[j].clone(),
                weight: w,
            })
            .collect()
    }

    /// CSV with a header of feature names and one row per target.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.names)?;
        for row in self.values.rows() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Row `i` is the head-averaged source attention of target `i`'s model placed
/// at the source positions; untrained targets give zero rows. No renormalization.
pub fn build_dependency(
    summaries: &[Option<ModelSummary>],
    schema: &FeatureSchema,
) -> Result<DependencyMatrix> {
    let d = schema.len();
    if summaries.len() != d {
        return Err(Error::Shape(format!(
            "{} summaries for {d} features",
            summaries.len()
        )));
    }
    let mut values = Array2::zeros((d, d));
    for (i, s) in summaries.iter().enumerate() {
        let Some(s) = s else { continue };
        if s.head_means.is_empty() || s.head_means.iter().any(|m| m.len() != d - 1) {
            return Err(Error::Shape(format!(
                "model for feature {i} does not cover {} sources",
                d - 1
            )));
        }
        let h = s.head_means.len() as f64;
        for (k, j) in (0..d).filter(|&j| j != i).enumerate() {
            values[[i, j]] = s.head_means.iter().map(|m| m[k]).sum::<f64>() / h;
        }
    }
    Ok(DependencyMatrix {
        names: schema.names(),
        values,
    })
}

/// Macro-averaged recovery over targets that have at least one true parent
/// and a nonzero row in `dep`. Top-K ties go to the lower source index.
pub fn score_recovery(dep: &DependencyMatrix, graph: &GroundTruthGraph) -> Result<RecoveryScores> {
    let d = dep.n_features();
    if graph.adjacency.dim() != (d, d) {
        return Err(Error::Shape(
            "graph and dependency matrix differ in size".into(),
        ));
    }
    if !(0..d).any(|i| (0..d).any(|j| i != j && graph.adjacency[[i, j]])) {
        return Err(Error::invalid("ground-truth graph has no edges"));
    }
    let (mut roc, mut pr, mut prec, mut rec) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..d {
        let sources: Vec<usize> = (0..d).filter(|&j| j != i).collect();
        let scores: Vec<f64> = sources.iter().map(|&j| dep.values[[i, j]]).collect();
        let labels: Vec<bool> = sources.iter().map(|&j| graph.adjacency[[i, j]]).collect();
        let k = labels.iter().filter(|&&l| l).count();
        if k == 0 || scores.iter().all(|&s| s == 0.0) {
            continue;
        }
        if let Some(a) = auroc(&scores, &labels) {
            roc.push(a);
        }
        pr.extend(auprc(&scores, &labels));
        let mut order: Vec<usize> = (0..sources.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let hits = order[..k].iter().filter(|&&o| labels[o]).count() as f64;
        prec.push(hits / k as f64);
        rec.push(hits / k as f64);
    }
    if prec.is_empty() {
        return Err(Error::invalid(
            "no target with parents has a dependency row",
        ));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(RecoveryScores {
        auroc: mean(&roc),
        auprc: mean(&pr),
        precision_at_k: mean(&prec),
        recall_at_k: mean(&rec),
        hub_rho: spearman(&dep.hubness(), &graph.out_degree()),
    })
}
