use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sni_core::cpfa::{
    argmax, train_feature, CpfaConfig, CpfaModel, FeatureTask, InputLayout, ModelShape, OutputKind,
    Prediction, TargetValues,
};
use sni_core::prior::PriorVector;

fn layout(widths: &[usize], n_feature_tokens: usize) -> InputLayout {
    let mut groups = Vec::new();
    let mut at = 0;
    for &w in widths {
        groups.push(at..at + w);
        at += w;
    }
    InputLayout {
        groups,
        n_feature_tokens,
    }
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    v.iter().map(|x| (x - m) / s).collect()
}

/// `y = Z·w + noise` on three standardized sources, 500 rows.
fn linear_task(noise: f64, seed: u64) -> FeatureTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 500;
    let z = Array2::from_shape_fn((n, 3), |_| StandardNormal.sample(&mut rng));
    let w = [0.8, -0.5, 0.3];
    let y: Vec<f64> = (0..n)
        .map(|i| {
            (0..3).map(|j| w[j] * z[[i, j]]).sum::<f64>()
                + noise * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    FeatureTask {
        inputs: z,
        layout: layout(&[1, 1, 1], 3),
        target: TargetValues::Regression(standardize(&y)),
        fit_rows: (0..400).collect(),
        val_rows: (400..500).collect(),
    }
}

fn regression(model: &CpfaModel, x: &Array2<f64>) -> Vec<f64> {
    match model.predict(x).unwrap() {
        Prediction::Regression(p) => p,
        Prediction::Classification(_) => unreachable!(),
    }
}

#[test]
fn beats_the_mean_predictor_on_noisy_linear_data() {
    let task = linear_task(0.5, 1);
    let trained = train_feature(
        &task,
        &PriorVector::uniform(3, 4),
        &CpfaConfig::default(),
        1.0,
        7,
    )
    .unwrap();
    let TargetValues::Regression(y) = &task.target else {
        unreachable!()
    };
    let pred = regression(&trained.model, &task.inputs);
    let fit_mean = task.fit_rows.iter().map(|&i| y[i]).sum::<f64>() / task.fit_rows.len() as f64;
    let mse = |f: &dyn Fn(usize) -> f64| {
        task.val_rows
            .iter()
            .map(|&i| (f(i) - y[i]).powi(2))
            .sum::<f64>()
            / 100.0
    };
    let model_mse = mse(&|i| pred[i]);
    let mean_mse = mse(&|_| fit_mean);
    assert!(model_mse < mean_mse, "{model_mse} vs {mean_mse}");
}

#[test]
fn fits_noiseless_linear_data_closely() {
    let task = linear_task(0.0, 2);
    // run to convergence rather than the default epoch budget
    let config = CpfaConfig {
        epochs: 300,
        patience: 30,
        ..CpfaConfig::default()
    };
    let trained = train_feature(&task, &PriorVector::uniform(3, 4), &config, 1.0, 3).unwrap();
    let TargetValues::Regression(y) = &task.target else {
        unreachable!()
    };
    let pred = regression(&trained.model, &task.inputs);
    let worst = task
        .fit_rows
        .iter()
        .map(|&i| (pred[i] - y[i]).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.1, "largest training residual {worst}");
}

#[test]
fn training_is_reproducible() {
    let task = linear_task(0.3, 4);
    let config = CpfaConfig {
        epochs: 8,
        patience: 4,
        ..CpfaConfig::default()
    };
    let prior = PriorVector {
        target: 3,
        sources: vec![0, 1, 2],
        weights: vec![0.5, 0.3, 0.2],
    };
    let a = train_feature(&task, &prior, &config, 2.0, 11).unwrap();
    let b = train_feature(&task, &prior, &config, 2.0, 11).unwrap();
    assert_eq!(a.lambda_trajectory(), b.lambda_trajectory());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    let c = train_feature(&task, &prior, &config, 2.0, 12).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn attention_rows_lie_on_the_simplex_and_lambdas_stay_positive() {
    let task = linear_task(0.3, 5);
    let config = CpfaConfig {
        epochs: 10,
        patience: 5,
        ..CpfaConfig::default()
    };
    let trained = train_feature(&task, &PriorVector::uniform(3, 4), &config, 1.0, 1).unwrap();
    let out = trained.model.attention_forward(&task.inputs).unwrap();
    for w in &out.weights {
        for row in w.rows() {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
    for e in &trained.history {
        assert!(e.lambdas.iter().all(|&l| l > 0.0));
        let b = e.train;
        assert!((b.total - (b.recon + b.prior + b.gamma_reg)).abs() < 1e-9);
    }
}

#[test]
fn zero_keys_give_uniform_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = ModelShape {
        heads: 3,
        embed_dim: 6,
        hidden_dims: vec![8],
    };
    let mut model = CpfaModel::new(
        layout(&[1, 3, 1, 2], 4),
        OutputKind::Regression,
        shape,
        &mut rng,
    )
    .unwrap();
    for p in model.params.values.iter_mut() {
        p.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    }
    for h in 0..3 {
        let k = model.key_index(h);
        model.params.values[k].fill(0.0);
    }
    let x = Array2::from_shape_fn((5, 7), |_| rng.random_range(-2.0..2.0));
    let out = model.attention_forward(&x).unwrap();
    for w in &out.weights {
        assert!(w.iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }
}

#[test]
fn mask_aware_layout_attends_over_indicators_too() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = ModelShape {
        heads: 2,
        embed_dim: 4,
        hidden_dims: vec![4],
    };
    // d = 3: two feature tokens plus two indicator tokens
    let model = CpfaModel::new(
        layout(&[1, 2, 1, 1], 2),
        OutputKind::Classification { n_classes: 3 },
        shape,
        &mut rng,
    )
    .unwrap();
    assert_eq!(model.layout.n_tokens(), 4);
    let x = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
    let out = model.attention_forward(&x).unwrap();
    assert!(out.weights.iter().all(|w| w.ncols() == 4));
    assert!(model.predict(&Array2::zeros((2, 4))).is_err());
}

#[test]
fn classifier_learns_a_threshold_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 400;
    let z = Array2::from_shape_fn((n, 2), |_| StandardNormal.sample(&mut rng));
    let labels: Vec<usize> = (0..n)
        .map(|i| usize::from(z[[i, 0]] + 0.2 * z[[i, 1]] > 0.0))
        .collect();
    let task = FeatureTask {
        inputs: z,
        layout: layout(&[1, 1], 2),
        target: TargetValues::Classification {
            labels: labels.clone(),
            n_classes: 2,
        },
        fit_rows: (0..300).collect(),
        val_rows: (300..400).collect(),
    };
    let trained = train_feature(
        &task,
        &PriorVector::uniform(2, 3),
        &CpfaConfig::default(),
        1.0,
        5,
    )
    .unwrap();
    let Prediction::Classification(pred) = trained.model.predict(&task.inputs).unwrap() else {
        unreachable!()
    };
    let acc = (300..400).filter(|&i| pred[i] == labels[i]).count() as f64 / 100.0;
    assert!(acc > 0.85, "validation accuracy {acc}");
}

#[test]
fn argmax_prefers_the_first_maximum() {
    assert_eq!(argmax(&[2.0, 1.0, 1.0]), 0);
    assert_eq!(argmax(&[1.0, 1.0]), 0);
    assert_eq!(argmax(&[0.0, 3.0, 3.0]), 1);
}
