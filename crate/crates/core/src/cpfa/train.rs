use std::rc::Rc;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cosine_lr, AdamW, LrSchedule, Mat, Tape};
use crate::prior::PriorVector;

use super::loss::{gamma_schedule, record_total_loss, BatchTarget, LossBreakdown, LossWeights};
use super::model::{CpfaModel, InputLayout, OutputKind};
use super::CpfaConfig;

/// Target column for one feature, indexed by table row. Entries at rows not
/// listed in `fit_rows`/`val_rows` are never read.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetValues {
    /// Standardized values.
    Regression(Vec<f64>),
    Classification {
        labels: Vec<usize>,
        n_classes: usize,
    },
}

impl TargetValues {
    fn output_kind(&self) -> OutputKind {
        match self {
            TargetValues::Regression(_) => OutputKind::Regression,
            TargetValues::Classification { n_classes, .. } => OutputKind::Classification {
                n_classes: *n_classes,
            },
        }
    }

    fn batch(&self, rows: &[usize]) -> BatchTarget {
        match self {
            TargetValues::Regression(y) => BatchTarget::Regression(Rc::new(
                Mat::from_shape_vec((rows.len(), 1), rows.iter().map(|&i| y[i]).collect())
                    .expect("column"),
            )),
            TargetValues::Classification { labels, .. } => {
                BatchTarget::Classification(Rc::new(rows.iter().map(|&i| labels[i]).collect()))
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            TargetValues::Regression(y) => y.len(),
            TargetValues::Classification { labels, .. } => labels.len(),
        }
    }
}

/// Encoded inputs and supervision for training one target feature.
#[derive(Clone, Debug)]
pub struct FeatureTask {
    pub inputs: Mat,
    pub layout: InputLayout,
    pub target: TargetValues,
    pub fit_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-averaged training losses.
    pub train: LossBreakdown,
    pub val_recon: f64,
    /// Early-stopping statistic: validation reconstruction plus prior term.
    pub val_objective: f64,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedFeature {
    /// Best-validation checkpoint.
    pub model: CpfaModel,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Per-head mean attention of the checkpoint over the fit rows (all tokens).
    pub head_means: Vec<Vec<f64>>,
}

impl TrainedFeature {
    pub fn lambda_trajectory(&self) -> Vec<Vec<f64>> {
        self.history.iter().map(|e| e.lambdas.clone()).collect()
    }

    /// Head means restricted to the feature tokens.
    pub fn feature_head_means(&self) -> Vec<Vec<f64>> {
        let t = self.model.layout.n_feature_tokens;
        self.head_means.iter().map(|m| m[..t].to_vec()).collect()
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            lambdas: self.model.lambdas(),
            head_means: self.feature_head_means(),
            best_epoch: self.best_epoch,
            history: self.history.clone(),
        }
    }
}

/// Serializable view of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub lambdas: Vec<f64>,
    /// Per-head mean attention over source-feature tokens.
    pub head_means: Vec<Vec<f64>>,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

fn evaluate(
    model: &CpfaModel,
    task: &FeatureTask,
    rows: &[usize],
    prior: &[f64],
    alpha: f64,
    config: &CpfaConfig,
) -> (f64, f64) {
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape);
    let x = tape.leaf(task.inputs.select(Axis(0), rows));
    let fv = model.forward(&mut tape, &leaves, x);
    let lv = record_total_loss(
        &mut tape,
        &fv,
        &task.target.batch(rows),
        LossWeights {
            prior,
            alpha,
            gamma: None,
            focal_gamma: config.focal_gamma,
            label_smoothing: config.label_smoothing,
        },
    );
    let recon = tape.scalar(lv.recon);
    (recon, recon + tape.scalar(lv.prior))
}

/// Mini-batch AdamW training of one feature model with cosine learning-rate
/// decay and early stopping on the validation objective.
pub fn train_feature(
    task: &FeatureTask,
    prior: &PriorVector,
    config: &CpfaConfig,
    alpha: f64,
    seed: u64,
) -> Result<TrainedFeature> {
    config.validate()?;
    if task.fit_rows.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if task.inputs.ncols() != task.layout.width() || task.inputs.nrows() != task.target.len() {
        return Err(Error::Shape(
            "task inputs, layout and targets disagree".into(),
        ));
    }
    if prior.weights.len() != task.layout.n_feature_tokens {
        return Err(Error::Shape(format!(
            "prior has {} weights for {} feature tokens",
            prior.weights.len(),
            task.layout.n_feature_tokens
        )));
    }
    if !(alpha >= 0.0) {
        return Err(Error::invalid("prior weight must be nonnegative"));
    }
    let p = prior.weights.as_slice();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CpfaModel::new(
        task.layout.clone(),
        task.target.output_kind(),
        config.shape(),
        &mut rng,
    )?;
    let lambda0 = {
        let l = model.lambdas();
        l.iter().sum::<f64>() / l.len() as f64
    };
    let batches_per_epoch = task.fit_rows.len().div_ceil(config.batch);
    let schedule = LrSchedule {
        base_lr: config.lr,
        min_lr: config.min_lr,
        total_steps: batches_per_epoch * config.epochs,
    };
    let mut opt = AdamW::new(&model.params, config.weight_decay);
    let val_rows: &[usize] = if task.val_rows.is_empty() {
        &task.fit_rows
    } else {
        &task.val_rows
    };

    let mut order = task.fit_rows.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let gamma = config
            .gamma_prior_enabled
            .then(|| gamma_schedule(epoch, lambda0));
        let mut sums = [0.0f64; 3];
        let mut n_batches = 0;
        for rows in order.chunks(config.batch) {
            let mut tape = Tape::new();
            let leaves = model.leaves(&mut tape);
            let x = tape.leaf(task.inputs.select(Axis(0), rows));
            let fv = model.forward(&mut tape, &leaves, x);
            let lv = record_total_loss(
                &mut tape,
                &fv,
                &task.target.batch(rows),
                LossWeights {
                    prior: p,
                    alpha,
                    gamma,
                    focal_gamma: config.focal_gamma,
                    label_smoothing: config.label_smoothing,
                },
            );
            sums[0] += tape.scalar(lv.recon);
            sums[1] += tape.scalar(lv.prior);
            sums[2] += tape.scalar(lv.gamma_reg);
            n_batches += 1;
            let mut grads = tape.backward(lv.total)?;
            let g: Vec<Mat> = leaves.iter().map(|&v| grads.take(v)).collect();
            let lr = cosine_lr(&schedule, step);
            opt.step(&mut model.params, &g, lr);
            step += 1;
        }
        let nb = n_batches as f64;
        let (val_recon, val_objective) = evaluate(&model, task, val_rows, p, alpha, config);
        history.push(EpochLog {
            epoch,
            train: LossBreakdown::new(sums[0] / nb, sums[1] / nb, sums[2] / nb),
            val_recon,
            val_objective,
            lambdas: model.lambdas(),
        });
        if val_objective < best.0 {
            best = (val_objective, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best;
    model.params = params;
    let head_means = model
        .attention_forward(&task.inputs.select(Axis(0), &task.fit_rows))?
        .head_means;
    Ok(TrainedFeature {
        model,
        history,
        best_epoch,
        head_means,
    })
}
