//! Seeded MCAR, anchor-driven MAR, and self-masking MNAR injectors.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::derive_seed;
use crate::error::{Error, Result};
use crate::table::{ContinuousStats, FeatureKind, MixedTable};

/// Logistic slope on the standardized driver.
pub const LOGISTIC_SLOPE: f64 = 1.0;
/// Bisection tolerance on the expected missing rate.
pub const RATE_TOLERANCE: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Self::Mcar),
            "mar" => Ok(Self::Mar),
            "mnar" => Ok(Self::Mnar),
            other => Err(Error::invalid(format!(
                "unknown mechanism '{other}' (expected mcar, mar or mnar)"
            ))),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mcar => "mcar",
            Self::Mar => "mar",
            Self::Mnar => "mnar",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seed: u64,
    /// Features kept fully observed; MAR drivers are drawn from these.
    pub anchors: Vec<usize>,
}

/// A held-out value at a masked position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthCell {
    pub row: usize,
    pub feature: String,
    pub value: TruthValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TruthValue {
    Number(f64),
    Label(String),
}

#[derive(Clone, Debug)]
pub struct Injection {
    pub masked: MixedTable,
    pub truth: Vec<TruthCell>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standardized driver values for column `j`: z-scores for continuous
/// features, a standardized non-modal indicator for categorical ones.
pub fn driver(t: &MixedTable, j: usize) -> Vec<f64> {
    let col = t.cells().column(j);
    let raw: Vec<f64> = match t.schema().feature(j).kind {
        FeatureKind::Continuous => col.to_vec(),
        FeatureKind::Categorical => {
            let k = t.schema().feature(j).n_categories();
            let mut counts = vec![0usize; k];
            for &v in col {
                counts[v as usize] += 1;
            }
            let mut mode = 0;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[mode] {
                    mode = c;
                }
            }
            col.iter()
                .map(|&v| if v as usize == mode { 0.0 } else { 1.0 })
                .collect()
        }
    };
    match ContinuousStats::from_values(&raw) {
        Some(s) => raw.iter().map(|&v| s.standardize(v)).collect(),
        None => raw,
    }
}

/// Intercept `a` such that `mean σ(a + slope·z) = rate`, found by bisection.
pub fn calibrate_intercept(z: &[f64], rate: f64) -> f64 {
    let expected = |a: f64| {
        z.iter()
            .map(|&v| sigmoid(a + LOGISTIC_SLOPE * v))
            .sum::<f64>()
            / z.len() as f64
    };
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Masks a complete table. MAR feature `k` (in order among non-anchors) is
/// driven by `anchors[k % anchors.len()]`. A column that would lose every
/// cell keeps its least likely masked cell.
pub fn inject(t: &MixedTable, spec: &InjectionSpec) -> Result<Injection> {
    if !(spec.rate > 0.0 && spec.rate < 1.0) {
        return Err(Error::invalid(format!(
            "missing rate {} must lie in (0, 1)",
            spec.rate
        )));
    }
    if t.missing_count() != 0 {
        return Err(Error::invalid("injection needs a complete table"));
    }
    let d = t.n_features();
    if let Some(&a) = spec.anchors.iter().find(|&&a| a >= d) {
        return Err(Error::invalid(format!(
            "anchor index {a} out of range for {d} features"
        )));
    }
    if spec.mechanism == Mechanism::Mar && spec.anchors.is_empty() {
        return Err(Error::invalid(
            "MAR injection needs at least one anchor feature",
        ));
    }
    let n = t.n_rows();
    let mut mask = Array2::from_elem((n, d), true);
    let targets: Vec<usize> = (0..d).filter(|j| !spec.anchors.contains(j)).collect();
    for (k, &j) in targets.iter().enumerate() {
        let probs: Vec<f64> = match spec.mechanism {
            Mechanism::Mcar => vec![spec.rate; n],
            Mechanism::Mar | Mechanism::Mnar => {
                let source = if spec.mechanism == Mechanism::Mar {
                    spec.anchors[k % spec.anchors.len()]
                } else {
                    j
                };
                let z = driver(t, source);
                let a = calibrate_intercept(&z, spec.rate);
                z.iter().map(|&v| sigmoid(a + LOGISTIC_SLOPE * v)).collect()
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[j as u64]));
        for (i, &p) in probs.iter().enumerate() {
            mask[[i, j]] = !rng.random_bool(p);
        }
        if n > 0 && mask.column(j).iter().all(|&m| !m) {
            let keep = (0..n).fold(0, |b, i| if probs[i] < probs[b] { i } else { b });
            mask[[keep, j]] = true;
        }
    }
    let masked = t.with_mask(mask)?;
    let mut truth = Vec::new();
    for i in 0..n {
        for j in 0..d {
            if masked.is_observed(i, j) {
                continue;
            }
            let spec_j = t.schema().feature(j);
            let v = t.cells()[[i, j]];
            truth.push(TruthCell {
                row: i,
                feature: spec_j.name.clone(),
                value: match spec_j.kind {
                    FeatureKind::Continuous => TruthValue::Number(v),
                    FeatureKind::Categorical => {
                        TruthValue::Label(spec_j.categories[v as usize].clone())
                    }
                },
            });
        }
    }
    Ok(Injection { masked, truth })
}
