//! Finite-difference harness for the full training objective.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sni_core::cpfa::{
    record_total_loss, BatchTarget, CpfaModel, InputLayout, LossWeights, ModelShape, OutputKind,
};
use sni_core::nn::{Mat, ParamStore, Tape};

pub const H: f64 = 1e-5;

pub struct Case {
    pub model: CpfaModel,
    pub x: Mat,
    pub target: BatchTarget,
    pub prior: Vec<f64>,
    pub alpha: f64,
    pub gamma: Option<(f64, f64)>,
    pub focal_gamma: f64,
    pub smoothing: f64,
}

impl Case {
    pub fn weights(&self) -> LossWeights<'_> {
        LossWeights {
            prior: &self.prior,
            alpha: self.alpha,
            gamma: self.gamma,
            focal_gamma: self.focal_gamma,
            label_smoothing: self.smoothing,
        }
    }

    /// Loss value, per-term values and gradients for the given parameters.
    pub fn eval(
        &self,
        params: &ParamStore,
        with_grad: bool,
    ) -> (f64, [f64; 3], Vec<Mat>, Vec<Mat>, Vec<f64>) {
        let mut model = self.model.clone();
        model.params = params.clone();
        let mut tape = Tape::new();
        let leaves = model.leaves(&mut tape);
        let x = tape.leaf(self.x.clone());
        let fv = model.forward(&mut tape, &leaves, x);
        let lv = record_total_loss(&mut tape, &fv, &self.target, self.weights());
        let terms = [
            tape.scalar(lv.recon),
            tape.scalar(lv.prior),
            tape.scalar(lv.gamma_reg),
        ];
        let attention: Vec<Mat> = fv
            .attention
            .iter()
            .map(|&a| tape.value(a).clone())
            .collect();
        let output = tape.value(fv.output).clone();
        let lambdas: Vec<f64> = fv.lambdas.iter().map(|&l| tape.scalar(l)).collect();
        let total = tape.scalar(lv.total);
        let grads = if with_grad {
            let g = tape.backward(lv.total).unwrap();
            leaves.iter().map(|&l| g.get(l)).collect()
        } else {
            Vec::new()
        };
        let mut aux = attention;
        aux.push(output);
        (total, terms, grads, aux, lambdas)
    }
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let n_feat = rng.random_range(2..=4);
    let n_extra = if rng.random_bool(0.3) { n_feat } else { 0 };
    let mut groups = Vec::new();
    let mut width = 0;
    for t in 0..n_feat + n_extra {
        let w = if t < n_feat {
            rng.random_range(1..=3)
        } else {
            1
        };
        groups.push(width..width + w);
        width += w;
    }
    let layout = InputLayout {
        groups,
        n_feature_tokens: n_feat,
    };
    let heads = rng.random_range(1..=3);
    let shape = ModelShape {
        heads,
        embed_dim: heads * rng.random_range(1..=3),
        hidden_dims: (0..rng.random_range(1..=2))
            .map(|_| rng.random_range(2..=5))
            .collect(),
    };
    let b = rng.random_range(2..=5);
    let (output, target) = if rng.random_bool(0.5) {
        let y = Array2::from_shape_fn((b, 1), |_| rng.random_range(-2.0..2.0));
        (OutputKind::Regression, BatchTarget::Regression(Rc::new(y)))
    } else {
        let k = rng.random_range(2..=4);
        let labels = (0..b).map(|_| rng.random_range(0..k)).collect();
        (
            OutputKind::Classification { n_classes: k },
            BatchTarget::Classification(Rc::new(labels)),
        )
    };
    let mut model = CpfaModel::new(layout, output, shape, rng).unwrap();
    for p in model.params.values.iter_mut() {
        p.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    }
    let x = Array2::from_shape_fn((b, width), |_| rng.random_range(-1.5..1.5));
    let raw: Vec<f64> = (0..n_feat).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    Case {
        model,
        x,
        target,
        prior: raw.iter().map(|r| r / s).collect(),
        alpha: rng.random_range(0.0..5.0),
        gamma: rng
            .random_bool(0.8)
            .then(|| (rng.random_range(0.5..2.0), rng.random_range(0.2..2.0))),
        focal_gamma: [0.0, 2.0, rng.random_range(0.5..3.0)][rng.random_range(0..3)],
        smoothing: rng.random_range(0.0..0.2),
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error between the analytic gradient of the total loss and central
/// differences over every parameter, then over each confidence parameter alone.
pub fn fd_errors(case: &Case) -> (f64, f64) {
    let base = case.model.params.clone();
    let (_, _, grads, _, _) = case.eval(&base, true);
    let central = |pi: usize, r: usize, c: usize| {
        let mut plus = base.clone();
        plus.values[pi][[r, c]] += H;
        let mut minus = base.clone();
        minus.values[pi][[r, c]] -= H;
        (case.eval(&plus, false).0 - case.eval(&minus, false).0) / (2.0 * H)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (pi, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            analytic.push(g[[r, c]]);
            numeric.push(central(pi, r, c));
        }
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let total = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12);
    let mut theta: f64 = 0.0;
    for h in 0..case.model.n_heads() {
        let ti = case.model.theta_index(h);
        let (a, fd) = (grads[ti][[0, 0]], central(ti, 0, 0));
        theta = theta.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    (total, theta)
}
