use ndarray::Array2;
use sni_core::dependency::{score_recovery, DependencyMatrix, GroundTruthGraph};
use sni_core::engine::SniConfig;
use sni_core::metrics::pearson;
use sni_core::missingness::{inject, InjectionSpec, Mechanism};
use sni_core::synth::{
    generate, prior_only_dependency, Regime, SynthSpec, DEFAULT_SEEDS, XOR_MAX_MARGINAL,
};
use sni_core::table::FeatureKind;

fn names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("f{j}")).collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[test]
fn graphs_point_backwards_and_roots_are_exogenous() {
    for regime in Regime::ALL {
        for seed in 0..10 {
            let data = generate(&SynthSpec {
                n: 200,
                ..SynthSpec::new(regime, seed)
            })
            .unwrap();
            let a = &data.graph.adjacency;
            for ((i, j), &edge) in a.indexed_iter() {
                assert!(!edge || j < i, "{regime:?} seed {seed}: edge {i} <- {j}");
            }
            for &r in &data.roots {
                assert!(data.graph.parents(r).is_empty());
            }
            for i in data.roots.len()..12 {
                assert!(
                    !data.graph.parents(i).is_empty(),
                    "{regime:?} seed {seed}: {i} has no parent"
                );
            }
        }
    }
}

#[test]
fn noiseless_linear_links_hold_exactly() {
    let spec = SynthSpec {
        noise_sd: 0.0,
        ..SynthSpec::new(Regime::LinearGaussian, 4)
    };
    let data = generate(&spec).unwrap();
    let x = data.table.cells();
    assert_eq!(data.linear_links.len(), 12 - 5);
    for link in &data.linear_links {
        assert_eq!(data.graph.parents(link.child), link.parents);
        for r in 0..spec.n {
            let fit = link.intercept
                + link
                    .parents
                    .iter()
                    .zip(&link.weights)
                    .map(|(&p, w)| w * x[[r, p]])
                    .sum::<f64>();
            assert!((fit - x[[r, link.child]]).abs() < 1e-9);
        }
    }
}

#[test]
fn interaction_children_hide_from_marginal_correlation() {
    for seed in DEFAULT_SEEDS {
        let spec = SynthSpec {
            noise_sd: 0.0,
            ..SynthSpec::new(Regime::InteractionXor, seed)
        };
        let data = generate(&spec).unwrap();
        let x = data.table.cells();
        assert_eq!(data.interactions.len(), 3);
        for check in &data.interactions {
            let child = x.column(check.child).to_vec();
            let [a, b] = check.parents;
            assert_eq!(data.graph.parents(check.child), vec![a, b]);
            let (pa, pb) = (x.column(a).to_vec(), x.column(b).to_vec());
            for p in [&pa, &pb] {
                assert!(pearson(p, &child).abs() < XOR_MAX_MARGINAL);
            }
            let (ma, mb) = (median(&pa), median(&pb));
            let categorical =
                data.table.schema().feature(check.child).kind == FeatureKind::Categorical;
            for r in 0..spec.n {
                let rule = (pa[r] > ma) ^ (pb[r] > mb);
                let got = if categorical {
                    child[r] == 1.0
                } else {
                    child[r] < 0.0
                };
                assert_eq!(got, rule, "seed {seed} child {} row {r}", check.child);
            }
            assert_eq!(check.rule_accuracy, 1.0);
        }
    }
}

#[test]
fn nonlinear_regime_mixes_feature_types() {
    let data = generate(&SynthSpec::new(Regime::NonlinearMixed, 2)).unwrap();
    let schema = data.table.schema();
    let cats: Vec<usize> = (0..12)
        .filter(|&j| schema.feature(j).kind == FeatureKind::Categorical)
        .collect();
    assert!(cats.len() >= 2);
    for &j in &cats {
        let k = schema.feature(j).categories.len() as f64;
        assert!(data
            .table
            .cells()
            .column(j)
            .iter()
            .all(|&v| v >= 0.0 && v < k && v.fract() == 0.0));
    }
    assert_eq!(schema.feature(5).name, "c0");
}

#[test]
fn generation_rejects_too_few_features() {
    assert!(generate(&SynthSpec {
        d: 5,
        ..SynthSpec::new(Regime::LinearGaussian, 1)
    })
    .is_err());
    assert!(generate(&SynthSpec {
        d: 6,
        ..SynthSpec::new(Regime::InteractionXor, 1)
    })
    .is_err());
    assert!(generate(&SynthSpec {
        n: 5,
        ..SynthSpec::new(Regime::NonlinearMixed, 1)
    })
    .is_err());
}

#[test]
fn a_dependency_matrix_proportional_to_the_graph_scores_perfectly() {
    let data = generate(&SynthSpec {
        n: 100,
        ..SynthSpec::new(Regime::NonlinearMixed, 7)
    })
    .unwrap();
    let g = &data.graph;
    let values = g.adjacency.mapv(|e| if e { 0.5 } else { 0.0 });
    let s = score_recovery(
        &DependencyMatrix::from_values(names(12), values).unwrap(),
        g,
    )
    .unwrap();
    assert_eq!(
        (s.auroc, s.auprc, s.precision_at_k, s.recall_at_k),
        (1.0, 1.0, 1.0, 1.0)
    );
}

#[test]
fn a_constant_dependency_row_scores_chance_auroc() {
    let graph = GroundTruthGraph {
        adjacency: Array2::from_shape_fn((4, 4), |(i, j)| i == 3 && j < 2),
    };
    let values = Array2::from_shape_fn((4, 4), |(i, j)| if i == 3 && j != 3 { 1.0 } else { 0.0 });
    let s = score_recovery(
        &DependencyMatrix::from_values(names(4), values).unwrap(),
        &graph,
    )
    .unwrap();
    assert_eq!(s.auroc, 0.5);
    // top-2 ties go to the lower source index, which are exactly the parents
    assert_eq!(s.precision_at_k, 1.0);
}

#[test]
fn correlation_priors_find_linear_parents() {
    let mut total = 0.0;
    for seed in DEFAULT_SEEDS {
        let data = generate(&SynthSpec::new(Regime::LinearGaussian, seed)).unwrap();
        let masked = inject(
            &data.table,
            &InjectionSpec {
                mechanism: Mechanism::Mar,
                rate: 0.3,
                seed,
                anchors: data.roots.clone(),
            },
        )
        .unwrap()
        .masked;
        let dep = prior_only_dependency(&masked, &SniConfig::default()).unwrap();
        total += score_recovery(&dep, &data.graph).unwrap().auroc;
    }
    let mean = total / DEFAULT_SEEDS.len() as f64;
    assert!(mean > 0.7, "mean AUROC {mean}");
}
