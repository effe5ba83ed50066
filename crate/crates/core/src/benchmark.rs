//! Inject → impute → score loops over mechanisms, rates, methods and seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::{knn_gower_impute, mean_mode_impute, DEFAULT_K};
use crate::engine::{derive_seed, run, SniConfig};
use crate::error::{Error, Result};
use crate::metrics::{average_rank, evaluate_imputation, Direction, Evaluation};
use crate::missingness::{inject, InjectionSpec, Mechanism};
use crate::synth::MeanSd;
use crate::table::MixedTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sni")]
    Sni,
    /// SNI with observed-indicator tokens.
    #[serde(rename = "sni-m")]
    SniMaskAware,
    #[serde(rename = "meanmode")]
    MeanMode,
    #[serde(rename = "knn")]
    Knn,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sni => "sni",
            Method::SniMaskAware => "sni-m",
            Method::MeanMode => "meanmode",
            Method::Knn => "knn",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sni" => Ok(Method::Sni),
            "sni-m" | "snim" => Ok(Method::SniMaskAware),
            "meanmode" | "mean-mode" => Ok(Method::MeanMode),
            "knn" => Ok(Method::Knn),
            other => Err(Error::invalid(format!(
                "unknown method '{other}' (expected sni, sni-m, meanmode or knn)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub dataset: String,
    pub mechanisms: Vec<Mechanism>,
    pub rates: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Always-observed features for MAR/MNAR (ignored by MCAR).
    pub anchors: Vec<usize>,
    pub knn_k: usize,
    pub engine: SniConfig,
}

impl BenchmarkSpec {
    pub fn new(dataset: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            mechanisms: vec![Mechanism::Mcar, Mechanism::Mar],
            rates: vec![0.1, 0.3, 0.5],
            methods: vec![Method::Sni, Method::MeanMode, Method::Knn],
            seeds: crate::synth::DEFAULT_SEEDS.to_vec(),
            anchors: vec![0],
            knn_k: DEFAULT_K,
            engine: SniConfig::default(),
        }
    }
}

/// One CSV row: metrics are macro-averaged over features of each type and
/// left empty when the type has no scored cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub dataset: String,
    pub mechanism: Mechanism,
    pub rate: f64,
    pub method: Method,
    pub seed: u64,
    pub nrmse: Option<f64>,
    pub mae: Option<f64>,
    pub mb: Option<f64>,
    pub r2: Option<f64>,
    pub spearman: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub kappa: Option<f64>,
}

impl BenchmarkRow {
    fn new(
        dataset: &str,
        mechanism: Mechanism,
        rate: f64,
        method: Method,
        seed: u64,
        e: &Evaluation,
    ) -> Self {
        Self {
            dataset: dataset.to_string(),
            mechanism,
            rate,
            method,
            seed,
            nrmse: e.continuous.map(|m| m.nrmse),
            mae: e.continuous.map(|m| m.mae),
            mb: e.continuous.map(|m| m.mb),
            r2: e.continuous.map(|m| m.r2),
            spearman: e.continuous.map(|m| m.spearman),
            accuracy: e.categorical.map(|m| m.accuracy),
            macro_f1: e.categorical.map(|m| m.macro_f1),
            kappa: e.categorical.map(|m| m.kappa),
        }
    }

    fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "nrmse" => self.nrmse,
            "mae" => self.mae,
            "mb" => self.mb,
            "r2" => self.r2,
            "spearman" => self.spearman,
            "accuracy" => self.accuracy,
            "macro_f1" => self.macro_f1,
            "kappa" => self.kappa,
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 8] = [
    "nrmse", "mae", "mb", "r2", "spearman", "accuracy", "macro_f1", "kappa",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mechanism: Mechanism,
    pub rate: f64,
    pub method: Method,
    pub n_seeds: usize,
    pub metrics: BTreeMap<String, MeanSd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub dataset: String,
    pub rows: Vec<SummaryRow>,
    /// Mean rank per method over (mechanism, rate) settings, for NRMSE
    /// (lower is better) and accuracy (higher is better) when available.
    pub average_rank: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Completes `masked` with one method.
pub fn impute_with(
    method: Method,
    masked: &MixedTable,
    spec: &BenchmarkSpec,
    seed: u64,
) -> Result<MixedTable> {
    match method {
        Method::Sni | Method::SniMaskAware => {
            let config = SniConfig {
                seed,
                mask_aware: method == Method::SniMaskAware,
                ..spec.engine.clone()
            };
            Ok(run(masked, &config)?.imputed)
        }
        Method::MeanMode => mean_mode_impute(masked),
        Method::Knn => knn_gower_impute(masked, spec.knn_k),
    }
}

pub fn run_benchmark(truth: &MixedTable, spec: &BenchmarkSpec) -> Result<Vec<BenchmarkRow>> {
    if truth.missing_count() != 0 {
        return Err(Error::invalid("benchmark input must be a complete table"));
    }
    if spec.mechanisms.is_empty()
        || spec.rates.is_empty()
        || spec.methods.is_empty()
        || spec.seeds.is_empty()
    {
        return Err(Error::invalid(
            "benchmark needs mechanisms, rates, methods and seeds",
        ));
    }
    let mut rows = Vec::new();
    for &mechanism in &spec.mechanisms {
        for &rate in &spec.rates {
            for &seed in &spec.seeds {
                let inj = inject(
                    truth,
                    &InjectionSpec {
                        mechanism,
                        rate,
                        seed: derive_seed(seed, &[mechanism as u64, rate.to_bits()]),
                        anchors: if mechanism == Mechanism::Mcar {
                            Vec::new()
                        } else {
                            spec.anchors.clone()
                        },
                    },
                )?;
                for &method in &spec.methods {
                    let imputed = impute_with(method, &inj.masked, spec, seed)?;
                    let e = evaluate_imputation(truth, &inj.masked, imputed.cells())?;
                    rows.push(BenchmarkRow::new(
                        &spec.dataset,
                        mechanism,
                        rate,
                        method,
                        seed,
                        &e,
                    ));
                }
            }
        }
    }
    Ok(rows)
}

pub fn summarize(dataset: &str, rows: &[BenchmarkRow]) -> Result<BenchmarkSummary> {
    let mut groups: BTreeMap<(Mechanism, u64, Method), Vec<&BenchmarkRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.mechanism, r.rate.to_bits(), r.method))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((mechanism, rate, method), g) in &groups {
        let mut metrics = BTreeMap::new();
        for name in METRIC_NAMES {
            let v: Vec<f64> = g.iter().filter_map(|r| r.metric(name)).collect();
            if !v.is_empty() {
                metrics.insert(name.to_string(), MeanSd::of(&v));
            }
        }
        out.push(SummaryRow {
            mechanism: *mechanism,
            rate: f64::from_bits(*rate),
            method: *method,
            n_seeds: g.len(),
            metrics,
        });
    }

    let mut methods: Vec<Method> = out.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut settings: Vec<(Mechanism, u64)> = out
        .iter()
        .map(|r| (r.mechanism, r.rate.to_bits()))
        .collect();
    settings.sort();
    settings.dedup();
    let mut ranks = BTreeMap::new();
    for (name, dir) in [
        ("nrmse", Direction::LowerIsBetter),
        ("accuracy", Direction::HigherIsBetter),
    ] {
        let table: Option<Vec<Vec<f64>>> = methods
            .iter()
            .map(|&m| {
                settings
                    .iter()
                    .map(|&(mech, rate)| {
                        out.iter()
                            .find(|r| {
                                r.method == m && r.mechanism == mech && r.rate.to_bits() == rate
                            })
                            .and_then(|r| r.metrics.get(name))
                            .map(|s| s.mean)
                    })
                    .collect()
            })
            .collect();
        if let Some(table) = table {
            let r = average_rank(&table, dir)?;
            ranks.insert(
                name.to_string(),
                methods
                    .iter()
                    .map(|m| m.name().to_string())
                    .zip(r)
                    .collect(),
            );
        }
    }
    Ok(BenchmarkSummary {
        dataset: dataset.to_string(),
        rows: out,
        average_rank: ranks,
    })
}

pub fn rows_to_csv(rows: &[BenchmarkRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
