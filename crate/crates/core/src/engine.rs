//! The outer imputation loop: mean/mode start, per-iteration prior refresh,
//! pseudo-masked CPFA training per incomplete feature, and convergence checks.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpfa::{
    train_feature, CpfaConfig, FeatureTask, InputLayout, ModelSummary, Prediction, TargetValues,
};
use crate::dependency::{build_dependency, DependencyMatrix};
use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::prior::{aggregate_prior, fisher_z, pearson_corr, PriorVector};
use crate::table::{
    build_correlation_design, partition_rows, CorrelationDesign, FeatureKind, MixedTable,
    Partition, StandardizerStats, DEFAULT_PARTITION,
};

/// Upper bound on outer iterations regardless of configuration.
pub const MAX_EM_ITERS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SniConfig {
    /// Pseudo-mask rate.
    pub rho: f64,
    /// Initial prior strength.
    pub alpha0: f64,
    /// Per-iteration decay of the prior strength.
    pub gamma_decay: f64,
    pub em_iters: usize,
    pub tol: f64,
    /// Append observed-indicator tokens to every model's input.
    pub mask_aware: bool,
    /// Apply the Fisher z-transform to correlations before aggregation.
    pub fisher_z: bool,
    pub partition: (f64, f64, f64),
    pub cpfa: CpfaConfig,
    pub seed: u64,
}

impl Default for SniConfig {
    fn default() -> Self {
        Self {
            rho: 0.15,
            alpha0: 1.0,
            gamma_decay: 0.9,
            em_iters: 2,
            tol: 1e-4,
            mask_aware: false,
            fisher_z: false,
            partition: DEFAULT_PARTITION,
            cpfa: CpfaConfig::default(),
            seed: 0,
        }
    }
}

impl SniConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid("rho must lie in (0, 1)"));
        }
        if !(self.gamma_decay > 0.0 && self.gamma_decay <= 1.0) {
            return Err(Error::invalid("gamma_decay must lie in (0, 1]"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if !(self.alpha0 >= 0.0) || !self.alpha0.is_finite() {
            return Err(Error::invalid("alpha0 must be finite and nonnegative"));
        }
        if self.em_iters == 0 || self.em_iters > MAX_EM_ITERS {
            return Err(Error::invalid(format!(
                "em_iters must be in 1..={MAX_EM_ITERS}"
            )));
        }
        self.cpfa.validate()
    }

    /// Prior strength used in iteration `g` (1-based).
    pub fn alpha_at(&self, g: usize) -> f64 {
        self.alpha0 * self.gamma_decay.powi(g as i32 - 1)
    }
}

/// Post-neural refinement hook run after every iteration. Observed cells are
/// restored after the hook returns.
pub trait StatRefine: Sync {
    fn refine(&self, table: &MixedTable, completed: &mut Array2<f64>) -> Result<()>;
}

/// The default hook: leaves the completed grid untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoRefine;

impl StatRefine for NoRefine {
    fn refine(&self, _: &MixedTable, _: &mut Array2<f64>) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLog {
    pub feature: usize,
    pub name: String,
    pub prior: Vec<f64>,
    pub n_fit: usize,
    pub n_val: usize,
    pub summary: ModelSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub alpha: f64,
    pub delta: f64,
    pub features: Vec<FeatureLog>,
}

#[derive(Clone, Debug)]
pub struct ImputationResult {
    /// Completed table; observed cells equal the input bit for bit.
    pub imputed: MixedTable,
    pub dependency: DependencyMatrix,
    /// Final-iteration λ per feature (`None` for features never trained).
    pub lambdas: Vec<Option<Vec<f64>>>,
    pub deltas: Vec<f64>,
    pub iterations: Vec<IterationLog>,
    pub converged: bool,
    pub partition: Partition,
}

/// JSON report written next to an imputed table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SniReport {
    pub feature_names: Vec<String>,
    pub seed: u64,
    pub config: SniConfig,
    pub n_iterations: usize,
    pub converged: bool,
    pub deltas: Vec<f64>,
    pub lambdas: Vec<Option<Vec<f64>>>,
    pub dependency: Vec<Vec<f64>>,
    pub iterations: Vec<IterationLog>,
}

impl ImputationResult {
    pub fn n_iterations(&self) -> usize {
        self.deltas.len()
    }

    /// Final-iteration model summaries indexed by feature.
    pub fn summaries(&self) -> Vec<Option<ModelSummary>> {
        let d = self.imputed.n_features();
        let mut out = vec![None; d];
        if let Some(last) = self.iterations.last() {
            for f in &last.features {
                out[f.feature] = Some(f.summary.clone());
            }
        }
        out
    }

    pub fn report(&self, config: &SniConfig) -> SniReport {
        SniReport {
            feature_names: self.imputed.schema().names(),
            seed: config.seed,
            config: config.clone(),
            n_iterations: self.n_iterations(),
            converged: self.converged,
            deltas: self.deltas.clone(),
            lambdas: self.lambdas.clone(),
            dependency: self.dependency.rows(),
            iterations: self.iterations.clone(),
        }
    }
}

/// Mean fill for continuous features and mode fill for categorical ones; mode
/// ties go to the lowest category index.
pub fn initialize(t: &MixedTable) -> Result<Array2<f64>> {
    let mut out = t.cells().clone();
    for j in 0..t.n_features() {
        if !t.has_missing(j) {
            continue;
        }
        let spec = t.schema().feature(j);
        if t.observed_count(j) == 0 {
            return Err(Error::FullyMissing(spec.name.clone()));
        }
        let fill = match spec.kind {
            FeatureKind::Continuous => {
                let (s, n) = t
                    .observed_column(j)
                    .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
                s / n as f64
            }
            FeatureKind::Categorical => {
                let mut counts = vec![0usize; spec.n_categories()];
                for (_, v) in t.observed_column(j) {
                    counts[v as usize] += 1;
                }
                let mut best = 0;
                for (k, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = k;
                    }
                }
                best as f64
            }
        };
        for i in 0..t.n_rows() {
            if !t.is_observed(i, j) {
                out[[i, j]] = fill;
            }
        }
    }
    Ok(out)
}

/// Independent Bernoulli(`rho`) draw per row, redrawn until at least one row
/// is masked and one is not. `true` = pseudo-masked.
pub fn pseudo_mask<R: Rng + ?Sized>(rows: &[usize], rho: f64, rng: &mut R) -> Result<Vec<bool>> {
    if rows.len() < 2 {
        return Err(Error::invalid("pseudo-masking needs at least two rows"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid("rho must lie in (0, 1)"));
    }
    loop {
        let m: Vec<bool> = rows.iter().map(|_| rng.random_bool(rho)).collect();
        let k = m.iter().filter(|&&b| b).count();
        if k > 0 && k < m.len() {
            return Ok(m);
        }
    }
}

/// Relative Frobenius change between two completed grids. Continuous cells
/// are compared in standardized units; a categorical cell contributes 1 to
/// the numerator when it changed and 1 to the denominator always.
pub fn convergence_delta(t: &MixedTable, prev: &Array2<f64>, next: &Array2<f64>) -> Result<f64> {
    let dim = (t.n_rows(), t.n_features());
    if prev.dim() != dim || next.dim() != dim {
        return Err(Error::Shape(
            "completed grids must match the table shape".into(),
        ));
    }
    let stats = StandardizerStats::from_table(t);
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..dim.1 {
        match t.schema().feature(j).kind {
            FeatureKind::Continuous => {
                let s = stats.get(j);
                for i in 0..dim.0 {
                    let (a, b) = match s {
                        Some(s) => (s.standardize(prev[[i, j]]), s.standardize(next[[i, j]])),
                        None => (prev[[i, j]], next[[i, j]]),
                    };
                    num += (b - a).powi(2);
                    den += a * a;
                }
            }
            FeatureKind::Categorical => {
                for i in 0..dim.0 {
                    if prev[[i, j]] != next[[i, j]] {
                        num += 1.0;
                    }
                    den += 1.0;
                }
            }
        }
    }
    Ok(if den > 0.0 {
        (num / den).sqrt()
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    })
}

/// Inputs for `target`: every other feature's expanded columns, in feature order.
pub fn encode_inputs(design: &CorrelationDesign, target: usize) -> (Mat, InputLayout) {
    let mut cols = Vec::new();
    let mut groups = Vec::new();
    for (j, g) in design.column_groups.iter().enumerate() {
        if j == target {
            continue;
        }
        groups.push(cols.len()..cols.len() + g.len());
        cols.extend(g.clone());
    }
    let n_feature_tokens = groups.len();
    (
        design.matrix.select(Axis(1), &cols),
        InputLayout {
            groups,
            n_feature_tokens,
        },
    )
}

/// Appends one observed-indicator column (and token) per source feature.
pub fn mask_aware_inputs(
    inputs: &Mat,
    layout: &InputLayout,
    original_mask: &Array2<bool>,
    target: usize,
) -> Result<(Mat, InputLayout)> {
    let d = original_mask.ncols();
    if target >= d || layout.n_feature_tokens != d - 1 || inputs.nrows() != original_mask.nrows() {
        return Err(Error::Shape(
            "mask does not match the encoded inputs".into(),
        ));
    }
    let w = inputs.ncols();
    let mut out = Mat::zeros((inputs.nrows(), w + d - 1));
    out.slice_mut(ndarray::s![.., ..w]).assign(inputs);
    let mut groups = layout.groups.clone();
    for (k, j) in (0..d).filter(|&j| j != target).enumerate() {
        for i in 0..inputs.nrows() {
            out[[i, w + k]] = if original_mask[[i, j]] { 1.0 } else { 0.0 };
        }
        groups.push(w + k..w + k + 1);
    }
    Ok((
        out,
        InputLayout {
            groups,
            n_feature_tokens: layout.n_feature_tokens,
        },
    ))
}

/// Stream seed for (master seed, tags), mixed with the SplitMix64 finalizer.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed;
    for &t in tags {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(t.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

struct FeatureOutcome {
    log: FeatureLog,
    fills: Vec<(usize, f64)>,
}

fn impute_feature(
    t: &MixedTable,
    design: &CorrelationDesign,
    stats: &StandardizerStats,
    partition: &Partition,
    prior: &PriorVector,
    config: &SniConfig,
    alpha: f64,
    g: usize,
    f: usize,
) -> Result<FeatureOutcome> {
    let spec = t.schema().feature(f);
    let (mut inputs, mut layout) = encode_inputs(design, f);
    if config.mask_aware {
        (inputs, layout) = mask_aware_inputs(&inputs, &layout, t.mask(), f)?;
    }
    let n = t.n_rows();
    let target = match spec.kind {
        FeatureKind::Continuous => {
            let s = stats
                .get(f)
                .ok_or_else(|| Error::FullyMissing(spec.name.clone()))?;
            TargetValues::Regression(
                (0..n)
                    .map(|i| t.value(i, f).map_or(0.0, |v| s.standardize(v)))
                    .collect(),
            )
        }
        FeatureKind::Categorical => TargetValues::Classification {
            labels: (0..n).map(|i| t.category(i, f).unwrap_or(0)).collect(),
            n_classes: spec.n_categories(),
        },
    };

    let observed_train: Vec<usize> = partition
        .train
        .iter()
        .copied()
        .filter(|&i| t.is_observed(i, f))
        .collect();
    if observed_train.len() < 2 {
        return Err(Error::invalid(format!(
            "feature '{}' has fewer than two observed training rows",
            spec.name
        )));
    }
    let mut mask_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[g as u64, f as u64, 0]));
    let masked = pseudo_mask(&observed_train, config.rho, &mut mask_rng)?;
    let mut fit_rows = Vec::new();
    let mut val_rows = Vec::new();
    for (&i, &m) in observed_train.iter().zip(&masked) {
        if m {
            val_rows.push(i);
        } else {
            fit_rows.push(i);
        }
    }
    val_rows.extend(
        partition
            .validation
            .iter()
            .copied()
            .filter(|&i| t.is_observed(i, f)),
    );
    let (n_fit, n_val) = (fit_rows.len(), val_rows.len());
    let task = FeatureTask {
        inputs,
        layout,
        target,
        fit_rows,
        val_rows,
    };
    let trained = train_feature(
        &task,
        prior,
        &config.cpfa,
        alpha,
        derive_seed(config.seed, &[g as u64, f as u64, 1]),
    )?;

    let missing: Vec<usize> = (0..n).filter(|&i| !t.is_observed(i, f)).collect();
    let x = task.inputs.select(Axis(0), &missing);
    let fills = match trained.model.predict(&x)? {
        Prediction::Regression(z) => {
            let s = stats.get(f).expect("continuous stats checked above");
            missing
                .iter()
                .zip(z)
                .map(|(&i, z)| (i, s.clip(s.destandardize(z))))
                .collect()
        }
        Prediction::Classification(c) => {
            missing.iter().zip(c).map(|(&i, c)| (i, c as f64)).collect()
        }
    };
    Ok(FeatureOutcome {
        log: FeatureLog {
            feature: f,
            name: spec.name.clone(),
            prior: prior.weights.clone(),
            n_fit,
            n_val,
            summary: trained.summary(),
        },
        fills,
    })
}

pub fn run(t: &MixedTable, config: &SniConfig) -> Result<ImputationResult> {
    run_with_refine(t, config, &NoRefine)
}

pub fn run_with_refine(
    t: &MixedTable,
    config: &SniConfig,
    refine: &dyn StatRefine,
) -> Result<ImputationResult> {
    config.validate()?;
    let d = t.n_features();
    let n = t.n_rows();
    let partition = partition_rows(n, config.partition, config.seed)?;
    if t.missing_count() == 0 {
        return Ok(ImputationResult {
            imputed: t.clone(),
            dependency: DependencyMatrix::zeros(d),
            lambdas: vec![None; d],
            deltas: vec![0.0],
            iterations: vec![IterationLog {
                iteration: 1,
                alpha: config.alpha_at(1),
                delta: 0.0,
                features: Vec::new(),
            }],
            converged: true,
            partition,
        });
    }
    if d < 2 {
        return Err(Error::invalid("imputation needs at least two features"));
    }
    let stats = StandardizerStats::from_table(t);
    let targets: Vec<usize> = (0..d).filter(|&j| t.has_missing(j)).collect();
    let mut current = initialize(t)?;
    let mut deltas = Vec::new();
    let mut iterations = Vec::new();
    let mut below = 0;
    let mut converged = false;
    for g in 1..=config.em_iters {
        let alpha = config.alpha_at(g);
        let design = build_correlation_design(t, &current)?;
        let mut sigma = pearson_corr(&design, &partition.train)?;
        if config.fisher_z {
            sigma = fisher_z(&sigma);
        }
        let priors = targets
            .iter()
            .map(|&f| aggregate_prior(&sigma, &design, f))
            .collect::<Result<Vec<_>>>()?;
        let outcomes = targets
            .par_iter()
            .zip(priors.par_iter())
            .map(|(&f, prior)| {
                impute_feature(t, &design, &stats, &partition, prior, config, alpha, g, f)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut next = current.clone();
        for o in &outcomes {
            for &(i, v) in &o.fills {
                next[[i, o.log.feature]] = v;
            }
        }
        refine.refine(t, &mut next)?;
        for ((i, j), v) in next.indexed_iter_mut() {
            if t.is_observed(i, j) {
                *v = t.cells()[[i, j]];
            }
        }
        let delta = convergence_delta(t, &current, &next)?;
        deltas.push(delta);
        iterations.push(IterationLog {
            iteration: g,
            alpha,
            delta,
            features: outcomes.into_iter().map(|o| o.log).collect(),
        });
        current = next;
        below = if delta < config.tol { below + 1 } else { 0 };
        if below >= 2 {
            converged = true;
            break;
        }
    }

    let mut lambdas = vec![None; d];
    let mut summaries = vec![None; d];
    if let Some(last) = iterations.last() {
        for f in &last.features {
            lambdas[f.feature] = Some(f.summary.lambdas.clone());
            summaries[f.feature] = Some(f.summary.clone());
        }
    }
    let dependency = build_dependency(&summaries, t.schema())?;
    Ok(ImputationResult {
        imputed: MixedTable::from_completed(t.schema().clone(), current)?,
        dependency,
        lambdas,
        deltas,
        iterations,
        converged,
        partition,
    })
}
