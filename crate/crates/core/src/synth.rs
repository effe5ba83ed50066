//! Synthetic mixed-type tables with known dependency graphs, and the
//! dependency-recovery experiment comparing SNI, NoPrior and PriorOnly.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dependency::{score_recovery, DependencyMatrix, GroundTruthGraph, RecoveryScores};
use crate::engine::{derive_seed, initialize, run, SniConfig};
use crate::error::{Error, Result};
use crate::metrics::pearson;
use crate::missingness::{inject, InjectionSpec, Mechanism};
use crate::prior::{fisher_z, pearson_corr, prior_matrix};
use crate::table::{
    build_correlation_design, partition_rows, FeatureSchema, FeatureSpec, MixedTable,
};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 5, 8];
/// Continuous roots generated in every regime.
pub const N_CONTINUOUS_ROOTS: usize = 5;
/// Bound on the marginal |Pearson| between an interaction child and each parent.
pub const XOR_MAX_MARGINAL: f64 = 0.15;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    LinearGaussian,
    NonlinearMixed,
    InteractionXor,
}

impl Regime {
    pub const ALL: [Regime; 3] = [
        Regime::LinearGaussian,
        Regime::NonlinearMixed,
        Regime::InteractionXor,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::LinearGaussian => "linear_gaussian",
            Regime::NonlinearMixed => "nonlinear_mixed",
            Regime::InteractionXor => "interaction_xor",
        }
    }

    /// Roots: five continuous features, plus the binary `c0` outside the linear regime.
    pub fn n_roots(&self) -> usize {
        match self {
            Regime::LinearGaussian => N_CONTINUOUS_ROOTS,
            _ => N_CONTINUOUS_ROOTS + 1,
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown regime '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub regime: Regime,
    pub n: usize,
    pub d: usize,
    pub edge_density: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(regime: Regime, seed: u64) -> Self {
        Self {
            regime,
            n: 1000,
            d: 12,
            edge_density: 0.2,
            noise_sd: 0.5,
            seed,
        }
    }
}

/// `child = intercept + Σ weights·parents` holds exactly when `noise_sd = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLink {
    pub child: usize,
    pub parents: Vec<usize>,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

/// Generation-time statistics of an interaction child.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionCheck {
    pub child: usize,
    pub parents: [usize; 2],
    /// Largest |Pearson(parent, child)| over the two parents.
    pub max_marginal_corr: f64,
    /// Agreement of the noiseless child with the interaction rule of its parents.
    pub rule_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub table: MixedTable,
    pub graph: GroundTruthGraph,
    /// Exogenous features kept fully observed during injection.
    pub roots: Vec<usize>,
    pub linear_links: Vec<LinearLink>,
    pub interactions: Vec<InteractionCheck>,
}

fn standardized(col: &[f64]) -> Vec<f64> {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    if sd > 1e-12 {
        col.iter().map(|v| (v - m) / sd).collect()
    } else {
        vec![0.0; col.len()]
    }
}

fn median(col: &[f64]) -> f64 {
    let mut s = col.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn signed_weight<R: Rng>(rng: &mut R) -> f64 {
    let w = rng.random_range(0.5..1.5);
    if rng.random_bool(0.5) {
        w
    } else {
        -w
    }
}

fn draw_parents<R: Rng>(rng: &mut R, i: usize, density: f64, min: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..i).filter(|_| rng.random_bool(density)).collect();
    while p.len() < min.min(i) {
        let c = rng.random_range(0..i);
        if !p.contains(&c) {
            p.push(c);
        }
    }
    p.sort_unstable();
    p
}

fn noise<R: Rng>(rng: &mut R, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Three-level codes by empirical terciles.
fn terciles(col: &[f64]) -> Vec<f64> {
    let mut s = col.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let (t1, t2) = (s[n / 3], s[(2 * n) / 3]);
    col.iter()
        .map(|&v| {
            if v < t1 {
                0.0
            } else if v < t2 {
                1.0
            } else {
                2.0
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Transform {
    Tanh,
    Sign,
    Square,
}

impl Transform {
    fn apply(self, z: f64) -> f64 {
        match self {
            Transform::Tanh => (1.5 * z).tanh(),
            Transform::Sign => {
                if z >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Transform::Square => z * z - 1.0,
        }
    }
}

enum Kind {
    Continuous,
    Tercile,
    Binary,
}

/// Samples a table and its DAG. Features are generated in index order, so
/// every parent precedes its child.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    let roots = spec.regime.n_roots();
    if spec.d <= roots || spec.n < 10 {
        return Err(Error::Generation(format!(
            "need d > {roots} and n >= 10 for regime {}",
            spec.regime.name()
        )));
    }
    if !(spec.edge_density > 0.0 && spec.edge_density <= 1.0) || !(spec.noise_sd >= 0.0) {
        return Err(Error::Generation(
            "edge_density must be in (0, 1] and noise_sd >= 0".into(),
        ));
    }
    let (n, d) = (spec.n, spec.d);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut kinds: Vec<Kind> = Vec::with_capacity(d);
    let mut adjacency = Array2::from_elem((d, d), false);
    let mut linear_links = Vec::new();
    let mut interactions = Vec::new();

    for _ in 0..N_CONTINUOUS_ROOTS {
        cols.push((0..n).map(|_| rng.sample(StandardNormal)).collect());
        kinds.push(Kind::Continuous);
    }
    if roots > N_CONTINUOUS_ROOTS {
        cols.push(
            (0..n)
                .map(|_| f64::from(u8::from(rng.random_bool(0.5))))
                .collect(),
        );
        kinds.push(Kind::Binary);
    }

    let non_roots: Vec<usize> = (roots..d).collect();
    let mut order = non_roots.clone();
    order.shuffle(&mut rng);
    let discretized: Vec<usize> = match spec.regime {
        Regime::NonlinearMixed => order[..(non_roots.len() / 3).max(1)].to_vec(),
        _ => Vec::new(),
    };
    let designated: Vec<usize> = match spec.regime {
        Regime::InteractionXor => order[..non_roots.len().div_ceil(2)].to_vec(),
        _ => Vec::new(),
    };

    for i in roots..d {
        if let Some(pos) = designated.iter().position(|&c| c == i) {
            let categorical = pos % 2 == 1;
            let mut done = false;
            for _ in 0..MAX_ATTEMPTS {
                let mut pair = draw_parents(&mut rng, i, 0.0, 2);
                pair.truncate(2);
                let (a, b) = (pair[0], pair[1]);
                let sa: Vec<bool> = {
                    let m = median(&cols[a]);
                    cols[a].iter().map(|&v| v > m).collect()
                };
                let sb: Vec<bool> = {
                    let m = median(&cols[b]);
                    cols[b].iter().map(|&v| v > m).collect()
                };
                let clean: Vec<f64> = if categorical {
                    sa.iter()
                        .zip(&sb)
                        .map(|(&x, &y)| f64::from(u8::from(x ^ y)))
                        .collect()
                } else {
                    sa.iter()
                        .zip(&sb)
                        .map(|(&x, &y)| if x == y { 1.0 } else { -1.0 })
                        .collect()
                };
                let child: Vec<f64> = if categorical {
                    let flip = (0.2 * spec.noise_sd).min(0.45);
                    clean
                        .iter()
                        .map(|&v| if rng.random_bool(flip) { 1.0 - v } else { v })
                        .collect()
                } else {
                    let e = noise(&mut rng, n, spec.noise_sd);
                    clean.iter().zip(&e).map(|(c, e)| c + e).collect()
                };
                let max_corr = pearson(&cols[a], &child)
                    .abs()
                    .max(pearson(&cols[b], &child).abs());
                if max_corr >= XOR_MAX_MARGINAL {
                    continue;
                }
                let rule_hits = (0..n)
                    .filter(|&r| {
                        let rule = sa[r] ^ sb[r];
                        if categorical {
                            (clean[r] == 1.0) == rule
                        } else {
                            (clean[r] < 0.0) == rule
                        }
                    })
                    .count();
                interactions.push(InteractionCheck {
                    child: i,
                    parents: [a, b],
                    max_marginal_corr: max_corr,
                    rule_accuracy: rule_hits as f64 / n as f64,
                });
                adjacency[[i, a]] = true;
                adjacency[[i, b]] = true;
                cols.push(child);
                kinds.push(if categorical {
                    Kind::Binary
                } else {
                    Kind::Continuous
                });
                done = true;
                break;
            }
            if !done {
                return Err(Error::Generation(format!(
                    "interaction child {i} kept a marginal correlation >= {XOR_MAX_MARGINAL} after {MAX_ATTEMPTS} attempts"
                )));
            }
            continue;
        }

        let parents = draw_parents(&mut rng, i, spec.edge_density, 1);
        for &p in &parents {
            adjacency[[i, p]] = true;
        }
        let e = noise(&mut rng, n, spec.noise_sd);
        match spec.regime {
            Regime::LinearGaussian => {
                let weights: Vec<f64> = parents.iter().map(|_| signed_weight(&mut rng)).collect();
                let raw: Vec<f64> = (0..n)
                    .map(|r| {
                        parents
                            .iter()
                            .zip(&weights)
                            .map(|(&p, w)| w * cols[p][r])
                            .sum::<f64>()
                            + e[r]
                    })
                    .collect();
                // rescale to unit variance and fold the scaling into the link
                let m = raw.iter().sum::<f64>() / n as f64;
                let sd =
                    (raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
                let sd = if sd > 1e-12 { sd } else { 1.0 };
                let child: Vec<f64> = raw.iter().map(|v| (v - m) / sd).collect();
                linear_links.push(LinearLink {
                    child: i,
                    parents: parents.clone(),
                    weights: weights.iter().map(|w| w / sd).collect(),
                    intercept: -m / sd,
                });
                cols.push(child);
                kinds.push(Kind::Continuous);
            }
            Regime::NonlinearMixed | Regime::InteractionXor => {
                let zs: Vec<Vec<f64>> = parents.iter().map(|&p| standardized(&cols[p])).collect();
                let mut latent = e;
                for z in &zs {
                    let w = signed_weight(&mut rng);
                    let t = [Transform::Tanh, Transform::Sign, Transform::Square]
                        [rng.random_range(0..3)];
                    for (l, &v) in latent.iter_mut().zip(z) {
                        *l += w * t.apply(v);
                    }
                }
                if discretized.contains(&i) {
                    cols.push(terciles(&latent));
                    kinds.push(Kind::Tercile);
                } else {
                    cols.push(standardized(&latent));
                    kinds.push(Kind::Continuous);
                }
            }
        }
    }

    let features = kinds
        .iter()
        .enumerate()
        .map(|(j, k)| match k {
            Kind::Continuous => FeatureSpec::continuous(format!("x{j}")),
            Kind::Tercile => FeatureSpec::categorical(format!("c{j}"), ["lo", "mid", "hi"]),
            Kind::Binary if j == N_CONTINUOUS_ROOTS => FeatureSpec::categorical("c0", ["0", "1"]),
            Kind::Binary => FeatureSpec::categorical(format!("c{j}"), ["0", "1"]),
        })
        .collect();
    let cells = Array2::from_shape_fn((n, d), |(r, j)| cols[j][r]);
    let table = MixedTable::complete(FeatureSchema::new(features)?, cells)?;
    let graph = GroundTruthGraph { adjacency };
    if graph.topological_order().is_none() {
        return Err(Error::Generation("generated graph has a cycle".into()));
    }
    Ok(SynthData {
        table,
        graph,
        roots: (0..roots).collect(),
        linear_links,
        interactions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SNI")]
    Sni,
    NoPrior,
    PriorOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sni, Variant::NoPrior, Variant::PriorOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Sni => "SNI",
            Variant::NoPrior => "NoPrior",
            Variant::PriorOnly => "PriorOnly",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityRow {
    pub regime: Regime,
    pub variant: Variant,
    pub seed: u64,
    pub scores: RecoveryScores,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityAggregate {
    pub regime: Regime,
    pub variant: Variant,
    pub n_seeds: usize,
    pub auroc: MeanSd,
    pub auprc: MeanSd,
    pub precision_at_k: MeanSd,
    pub recall_at_k: MeanSd,
    pub hub_rho: MeanSd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub rows: Vec<SanityRow>,
    pub aggregates: Vec<SanityAggregate>,
}

impl SanityReport {
    pub fn aggregate(&self, regime: Regime, variant: Variant) -> Option<&SanityAggregate> {
        self.aggregates
            .iter()
            .find(|a| a.regime == regime && a.variant == variant)
    }

    pub fn merge(&mut self, other: SanityReport) {
        self.rows.extend(other.rows);
        self.aggregates.extend(other.aggregates);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityOptions {
    pub variants: Vec<Variant>,
    pub rate: f64,
    pub seeds: Vec<u64>,
    /// Engine settings for the SNI variant; NoPrior derives from it.
    pub engine: SniConfig,
}

impl Default for SanityOptions {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            rate: 0.3,
            seeds: DEFAULT_SEEDS.to_vec(),
            engine: SniConfig::default(),
        }
    }
}

/// Correlation priors of the mean/mode-initialized table as a dependency
/// matrix, restricted to targets with missing cells.
pub fn prior_only_dependency(t: &MixedTable, config: &SniConfig) -> Result<DependencyMatrix> {
    let filled = initialize(t)?;
    let design = build_correlation_design(t, &filled)?;
    let partition = partition_rows(t.n_rows(), config.partition, config.seed)?;
    let mut sigma = pearson_corr(&design, &partition.train)?;
    if config.fisher_z {
        sigma = fisher_z(&sigma);
    }
    let mut values = prior_matrix(&sigma, &design)?;
    for i in 0..t.n_features() {
        if !t.has_missing(i) {
            values.row_mut(i).fill(0.0);
        }
    }
    DependencyMatrix::from_values(t.schema().names(), values)
}

fn variant_dependency(
    variant: Variant,
    t: &MixedTable,
    config: &SniConfig,
) -> Result<DependencyMatrix> {
    match variant {
        Variant::Sni => Ok(run(t, config)?.dependency),
        Variant::NoPrior => {
            let mut c = config.clone();
            c.alpha0 = 0.0;
            c.cpfa.gamma_prior_enabled = false;
            Ok(run(t, &c)?.dependency)
        }
        Variant::PriorOnly => prior_only_dependency(t, config),
    }
}

/// Generate → MAR injection anchored on the roots → fit each variant → score D
/// against the generating graph, for every seed.
pub fn run_sanity(spec: &SynthSpec, options: &SanityOptions) -> Result<SanityReport> {
    if options.variants.is_empty() || options.seeds.is_empty() {
        return Err(Error::invalid(
            "sanity run needs at least one variant and one seed",
        ));
    }
    let jobs: Vec<(u64, Variant)> = options
        .seeds
        .iter()
        .flat_map(|&s| options.variants.iter().map(move |&v| (s, v)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, variant)| {
            let data = generate(&SynthSpec {
                seed,
                ..spec.clone()
            })?;
            let inj = inject(
                &data.table,
                &InjectionSpec {
                    mechanism: Mechanism::Mar,
                    rate: options.rate,
                    seed: derive_seed(seed, &[0x1a]),
                    anchors: data.roots.clone(),
                },
            )?;
            let config = SniConfig {
                seed,
                ..options.engine.clone()
            };
            let dep = variant_dependency(variant, &inj.masked, &config)?;
            Ok(SanityRow {
                regime: spec.regime,
                variant,
                seed,
                scores: score_recovery(&dep, &data.graph)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregates = options
        .variants
        .iter()
        .map(|&v| {
            let s: Vec<&RecoveryScores> = rows
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| &r.scores)
                .collect();
            let col = |f: fn(&RecoveryScores) -> f64| {
                MeanSd::of(&s.iter().map(|x| f(x)).collect::<Vec<_>>())
            };
            SanityAggregate {
                regime: spec.regime,
                variant: v,
                n_seeds: s.len(),
                auroc: col(|x| x.auroc),
                auprc: col(|x| x.auprc),
                precision_at_k: col(|x| x.precision_at_k),
                recall_at_k: col(|x| x.recall_at_k),
                hub_rho: col(|x| x.hub_rho),
            }
        })
        .collect();
    Ok(SanityReport { rows, aggregates })
}
