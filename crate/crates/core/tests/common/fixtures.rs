//! Tables and configurations shared by several suites.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sni_core::cpfa::CpfaConfig;
use sni_core::engine::SniConfig;
use sni_core::missingness::{inject, InjectionSpec, Mechanism};
use sni_core::synth::{generate, Regime, SynthSpec};
use sni_core::table::{FeatureSchema, FeatureSpec, MixedTable};

pub fn small_config(seed: u64) -> SniConfig {
    SniConfig {
        seed,
        cpfa: CpfaConfig {
            heads: 2,
            embed_dim: 8,
            hidden_dims: vec![16],
            epochs: 6,
            patience: 3,
            ..CpfaConfig::default()
        },
        ..SniConfig::default()
    }
}

/// Mixed-type table under MAR 30% with roots as anchors.
pub fn masked_mixed(n: usize, seed: u64) -> MixedTable {
    let data = generate(&SynthSpec {
        n,
        d: 9,
        ..SynthSpec::new(Regime::NonlinearMixed, seed)
    })
    .unwrap();
    inject(
        &data.table,
        &InjectionSpec {
            mechanism: Mechanism::Mar,
            rate: 0.3,
            seed,
            anchors: data.roots.clone(),
        },
    )
    .unwrap()
    .masked
}

/// Four correlated continuous columns plus a three-level categorical.
pub fn injector_table(n: usize, seed: u64) -> MixedTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Array2::zeros((n, 5));
    for i in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        for j in 0..4 {
            let e: f64 = StandardNormal.sample(&mut rng);
            cells[[i, j]] = 0.6 * z + 0.8 * e + j as f64;
        }
        let u: f64 = StandardNormal.sample(&mut rng);
        cells[[i, 4]] = if u < -0.3 {
            0.0
        } else if u < 0.8 {
            1.0
        } else {
            2.0
        };
    }
    let schema = FeatureSchema::new(vec![
        FeatureSpec::continuous("a"),
        FeatureSpec::continuous("b"),
        FeatureSpec::continuous("c"),
        FeatureSpec::continuous("d"),
        FeatureSpec::categorical("k", ["x", "y", "z"]),
    ])
    .unwrap();
    MixedTable::complete(schema, cells).unwrap()
}
