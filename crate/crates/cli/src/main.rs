use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sni_core::benchmark::{rows_to_csv, run_benchmark, summarize, BenchmarkSpec, Method};
use sni_core::dependency::DependencyMatrix;
use sni_core::engine::{run, SniConfig, SniReport};
use sni_core::missingness::{inject, InjectionSpec, Mechanism};
use sni_core::synth::{run_sanity, Regime, SanityOptions, SanityReport, SynthSpec, Variant};
use sni_core::table::{load_csv, save_csv, FeatureSchema, MixedTable, DEFAULT_MISSING_TOKENS};

#[derive(Parser)]
#[command(
    name = "sni",
    version,
    about = "Mixed-type tabular imputation with prior-regularized feature attention"
)]
struct Cli {
    /// Run single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Impute the missing cells of a table.
    Impute(ImputeArgs),
    /// Mask a complete table and write the held-out cells.
    Inject(InjectArgs),
    /// Compare imputers over mechanisms, rates and seeds.
    Benchmark(BenchmarkArgs),
    /// Dependency-recovery experiment on synthetic graphs.
    Sanity(SanityArgs),
    /// Export the dependency matrix, edges and confidences from a report.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct TableArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Token marking a missing cell (empty and "NA" are always accepted).
    #[arg(long)]
    missing_token: Option<String>,
}

#[derive(Args)]
struct ImputeArgs {
    #[command(flatten)]
    table: TableArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    mask_aware: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InjectArgs {
    #[command(flatten)]
    table: TableArgs,
    #[arg(long)]
    mechanism: Mechanism,
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated feature names kept fully observed (MAR/MNAR); defaults to the first feature.
    #[arg(long, value_delimiter = ',')]
    anchors: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    table: TableArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "mcar,mar")]
    mechanisms: Vec<Mechanism>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "sni,meanmode,knn")]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,8")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    anchors: Vec<String>,
    #[arg(long, default_value_t = 5)]
    knn_k: usize,
    /// Dataset label written into every row; defaults to the data file stem.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Mean ± SD summary and average ranks as JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct SanityArgs {
    /// linear_gaussian, nonlinear_mixed, interaction_xor or all.
    #[arg(long, default_value = "all")]
    regime: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,8")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "SNI,NoPrior,PriorOnly")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 0.3)]
    rate: f64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 12)]
    d: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out_depmatrix: Option<PathBuf>,
    #[arg(long)]
    out_edges: Option<PathBuf>,
    #[arg(long)]
    out_lambdas: Option<PathBuf>,
    #[arg(long)]
    out_hubness: Option<PathBuf>,
}

/// Flat configuration file; every key is optional and overrides the default.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    heads: Option<usize>,
    hidden_dims: Option<Vec<usize>>,
    embed_dim: Option<usize>,
    lr: Option<f64>,
    min_lr: Option<f64>,
    weight_decay: Option<f64>,
    batch: Option<usize>,
    epochs: Option<usize>,
    patience: Option<usize>,
    label_smoothing: Option<f64>,
    focal_gamma: Option<f64>,
    gamma_prior_enabled: Option<bool>,
    rho: Option<f64>,
    alpha0: Option<f64>,
    gamma_decay: Option<f64>,
    em_iters: Option<usize>,
    tol: Option<f64>,
    mask_aware: Option<bool>,
    fisher_z: Option<bool>,
    partition: Option<(f64, f64, f64)>,
    seed: Option<u64>,
}

impl ConfigFile {
    fn apply(self, c: &mut SniConfig) {
        macro_rules! set {
            ($($field:ident => $($target:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field { c.$($target).+ = v; })*
            };
        }
        set!(
            heads => cpfa.heads,
            hidden_dims => cpfa.hidden_dims,
            embed_dim => cpfa.embed_dim,
            lr => cpfa.lr,
            min_lr => cpfa.min_lr,
            weight_decay => cpfa.weight_decay,
            batch => cpfa.batch,
            epochs => cpfa.epochs,
            patience => cpfa.patience,
            label_smoothing => cpfa.label_smoothing,
            focal_gamma => cpfa.focal_gamma,
            gamma_prior_enabled => cpfa.gamma_prior_enabled,
            rho => rho,
            alpha0 => alpha0,
            gamma_decay => gamma_decay,
            em_iters => em_iters,
            tol => tol,
            mask_aware => mask_aware,
            fisher_z => fisher_z,
            partition => partition,
            seed => seed,
        );
    }
}

fn load_config(path: Option<&Path>) -> Result<SniConfig> {
    let mut config = SniConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .with_context(|| format!("--config: cannot read {}", p.display()))?;
        let file: ConfigFile = serde_json::from_str(&text)
            .with_context(|| format!("--config: invalid JSON in {}", p.display()))?;
        file.apply(&mut config);
    }
    Ok(config)
}

fn load_table(args: &TableArgs) -> Result<MixedTable> {
    let schema = FeatureSchema::from_json_file(&args.schema)
        .with_context(|| format!("--schema: cannot load {}", args.schema.display()))?;
    let mut tokens: Vec<&str> = DEFAULT_MISSING_TOKENS.to_vec();
    if let Some(t) = &args.missing_token {
        tokens.push(t);
    }
    load_csv(&args.data, &schema, &tokens)
        .with_context(|| format!("--data: cannot load {}", args.data.display()))
}

fn missing_token(args: &TableArgs) -> &str {
    args.missing_token.as_deref().unwrap_or("")
}

fn write_file(path: &Path, flag: &str, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("{flag}: cannot write {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn resolve_features(t: &MixedTable, names: &[String], flag: &str) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            t.schema()
                .index_of(n)
                .with_context(|| format!("{flag}: unknown feature '{n}'"))
        })
        .collect()
}

fn cmd_impute(a: ImputeArgs) -> Result<()> {
    let table = load_table(&a.table)?;
    let mut config = load_config(a.config.as_deref())?;
    if a.mask_aware {
        config.mask_aware = true;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let result = run(&table, &config)?;
    save_csv(&a.out, &result.imputed, missing_token(&a.table))
        .with_context(|| format!("--out: cannot write {}", a.out.display()))?;
    write_file(&a.report, "--report", &to_json(&result.report(&config))?)?;
    eprintln!(
        "imputed {} cells in {} iteration(s); last delta {:.3e}",
        table.missing_count(),
        result.n_iterations(),
        result.deltas.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_inject(a: InjectArgs) -> Result<()> {
    let table = load_table(&a.table)?;
    let anchors = if a.anchors.is_empty() {
        if a.mechanism == Mechanism::Mcar {
            Vec::new()
        } else {
            vec![0]
        }
    } else {
        resolve_features(&table, &a.anchors, "--anchors")?
    };
    let inj = inject(
        &table,
        &InjectionSpec {
            mechanism: a.mechanism,
            rate: a.rate,
            seed: a.seed,
            anchors,
        },
    )
    .context("--rate/--mechanism")?;
    save_csv(&a.out, &inj.masked, missing_token(&a.table))
        .with_context(|| format!("--out: cannot write {}", a.out.display()))?;
    write_file(&a.truth, "--truth", &to_json(&inj.truth)?)?;
    Ok(())
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<()> {
    let table = load_table(&a.table)?;
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        a.table
            .data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into())
    });
    let mut spec = BenchmarkSpec::new(dataset.clone());
    spec.mechanisms = a.mechanisms;
    spec.rates = a.rates;
    spec.methods = a.methods;
    spec.seeds = a.seeds;
    spec.knn_k = a.knn_k;
    spec.engine = load_config(a.config.as_deref())?;
    if !a.anchors.is_empty() {
        spec.anchors = resolve_features(&table, &a.anchors, "--anchors")?;
    }
    let rows = run_benchmark(&table, &spec)?;
    write_file(&a.out, "--out", &rows_to_csv(&rows)?)?;
    if let Some(p) = &a.summary {
        #[derive(Serialize)]
        struct Summary<'a> {
            spec: &'a BenchmarkSpec,
            summary: sni_core::benchmark::BenchmarkSummary,
        }
        let s = Summary {
            spec: &spec,
            summary: summarize(&dataset, &rows)?,
        };
        write_file(p, "--summary", &to_json(&s)?)?;
    }
    Ok(())
}

fn cmd_sanity(a: SanityArgs) -> Result<()> {
    let regimes: Vec<Regime> = if a.regime == "all" {
        Regime::ALL.to_vec()
    } else {
        vec![a.regime.parse().context("--regime")?]
    };
    let variants = a
        .variants
        .iter()
        .map(|v| match v.to_ascii_lowercase().as_str() {
            "sni" => Ok(Variant::Sni),
            "noprior" => Ok(Variant::NoPrior),
            "prioronly" => Ok(Variant::PriorOnly),
            other => bail!("--variants: unknown variant '{other}'"),
        })
        .collect::<Result<Vec<_>>>()?;
    let options = SanityOptions {
        variants,
        rate: a.rate,
        seeds: a.seeds,
        engine: load_config(a.config.as_deref())?,
    };
    let mut report = SanityReport::default();
    for regime in regimes {
        let spec = SynthSpec {
            n: a.n,
            d: a.d,
            ..SynthSpec::new(regime, 0)
        };
        report.merge(run_sanity(&spec, &options)?);
    }
    for g in &report.aggregates {
        eprintln!(
            "{:<16} {:<9} AUROC {:.3}±{:.3}  AUPRC {:.3}±{:.3}  P@K {:.3}",
            g.regime.name(),
            g.variant.name(),
            g.auroc.mean,
            g.auroc.sd,
            g.auprc.mean,
            g.auprc.sd,
            g.precision_at_k.mean
        );
    }
    write_file(&a.out, "--out", &to_json(&report)?)
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.report)
        .with_context(|| format!("--report: cannot read {}", a.report.display()))?;
    let report: SniReport = serde_json::from_str(&text)
        .with_context(|| format!("--report: invalid report {}", a.report.display()))?;
    let d = report.feature_names.len();
    let flat: Vec<f64> = report.dependency.iter().flatten().copied().collect();
    if flat.len() != d * d {
        bail!("--report: dependency matrix is not {d} x {d}");
    }
    let values = ndarray::Array2::from_shape_vec((d, d), flat)?;
    let dep = DependencyMatrix::from_values(report.feature_names.clone(), values)?;
    if let Some(p) = &a.out_depmatrix {
        write_file(p, "--out-depmatrix", &dep.to_csv_string()?)?;
    }
    if let Some(p) = &a.out_edges {
        write_file(p, "--out-edges", &to_json(&dep.edges())?)?;
    }
    if let Some(p) = &a.out_lambdas {
        let map: BTreeMap<&str, &Vec<f64>> = report
            .feature_names
            .iter()
            .zip(&report.lambdas)
            .filter_map(|(n, l)| l.as_ref().map(|l| (n.as_str(), l)))
            .collect();
        write_file(p, "--out-lambdas", &to_json(&map)?)?;
    }
    if let Some(p) = &a.out_hubness {
        write_file(p, "--out-hubness", &to_json(&dep.hubness_map())?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
        {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Impute(a) => cmd_impute(a),
        Command::Inject(a) => cmd_inject(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Sanity(a) => cmd_sanity(a),
        Command::Explain(a) => cmd_explain(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
