//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients for every leaf.
//! Operations panic on shape mismatch, like `ndarray` arithmetic does.

use std::ops::Range;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Layer-norm variance offset.
pub const LN_EPS: f64 = 1e-9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    Ln(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    Reshape(Var),
    SelectCols(Var, Range<usize>),
    ConcatCols(Vec<Var>),
    Attend {
        weights: Var,
        values: Var,
    },
    GroupEmbed {
        x: Var,
        w: Var,
        groups: Rc<Vec<Range<usize>>>,
    },
    Mse {
        pred: Var,
        target: Rc<Mat>,
    },
    FocalCe {
        logits: Var,
        labels: Rc<Vec<usize>>,
        gamma: f64,
        smoothing: f64,
        probs: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to the leaves of a tape.
/// Intermediate nodes are released during the backward sweep.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for leaf `v`; zeros when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Mat {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Mat::zeros(self.shapes[v.0]))
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.1, sb.0, "matmul shape mismatch {sa:?} x {sb:?}");
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (sa, sr) = (self.shape(a), self.shape(row));
        assert!(
            sr.0 == 1 && sr.1 == sa.1,
            "add_row shape mismatch {sa:?} + {sr:?}"
        );
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a (m×n) * row (1×n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (sa, sr) = (self.shape(a), self.shape(row));
        assert!(
            sr.0 == 1 && sr.1 == sa.1,
            "mul_row shape mismatch {sa:?} * {sr:?}"
        );
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// `a ((B·T)×n) + tile (T×n)` where row `b·T + t` receives `tile[t]`.
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Var {
        let (sa, st) = (self.shape(a), self.shape(tile));
        assert!(
            st.1 == sa.1 && st.0 > 0 && sa.0 % st.0 == 0,
            "add_tiled shape mismatch {sa:?} + {st:?}"
        );
        let t = st.0;
        let mut v = self.value(a).clone();
        let tv = self.value(tile);
        for (r, mut row) in v.rows_mut().into_iter().enumerate() {
            row += &tv.row(r % t);
        }
        self.push(v, Op::AddTiled(a, tile))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise normalization to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Mean over rows: `m×n -> 1×n`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x
            .mean_axis(Axis(0))
            .expect("col_mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::ColMean(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size mismatch");
        let data: Vec<f64> = x.iter().cloned().collect();
        let v = Mat::from_shape_vec((rows, cols), data).expect("reshape");
        self.push(v, Op::Reshape(a))
    }

    pub fn select_cols(&mut self, a: Var, cols: Range<usize>) -> Var {
        let v = self.value(a).slice(s![.., cols.clone()]).to_owned();
        self.push(v, Op::SelectCols(a, cols))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Mat::zeros((rows, cols));
        let mut c = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.nrows(), rows, "concat row mismatch");
            v.slice_mut(s![.., c..c + x.ncols()]).assign(x);
            c += x.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Weighted pooling of token rows: `out[b] = Σ_t weights[b,t] · values[b·T + t]`.
    pub fn attend(&mut self, weights: Var, values: Var) -> Var {
        let (b, t) = self.shape(weights);
        let (vr, vc) = self.shape(values);
        assert_eq!(vr, b * t, "attend shape mismatch");
        let a = self.value(weights);
        let vals = self.value(values);
        let mut out = Mat::zeros((b, vc));
        for i in 0..b {
            let mut row = out.row_mut(i);
            for k in 0..t {
                row.scaled_add(a[[i, k]], &vals.row(i * t + k));
            }
        }
        self.push(out, Op::Attend { weights, values })
    }

    /// Block-diagonal projection of column groups into token rows:
    /// `out[b·T + t] = Σ_{c ∈ groups[t]} x[b,c] · w[c]`.
    pub fn group_embed(&mut self, x: Var, w: Var, groups: Rc<Vec<Range<usize>>>) -> Var {
        let (b, width) = self.shape(x);
        let (wr, e) = self.shape(w);
        assert_eq!(width, wr, "group_embed width mismatch");
        let t = groups.len();
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = Mat::zeros((b * t, e));
        for i in 0..b {
            for (k, g) in groups.iter().enumerate() {
                let mut row = out.row_mut(i * t + k);
                for c in g.clone() {
                    let xc = xv[[i, c]];
                    if xc != 0.0 {
                        row.scaled_add(xc, &wv.row(c));
                    }
                }
            }
        }
        self.push(out, Op::GroupEmbed { x, w, groups })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Rc<Mat>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "mse shape mismatch");
        assert!(!p.is_empty(), "mse of empty batch");
        let v = (p - &*target).mapv(|x| x * x).sum() / p.len() as f64;
        self.push(Mat::from_elem((1, 1), v), Op::Mse { pred, target })
    }

    /// Batch mean of `Σ_k ỹ_k (1 − p_k)^γ (−ln p_k)` with `p = softmax(logits)`
    /// and `ỹ` the one-hot label smoothed by `smoothing`.
    pub fn focal_ce(
        &mut self,
        logits: Var,
        labels: Rc<Vec<usize>>,
        gamma: f64,
        smoothing: f64,
    ) -> Var {
        let z = self.value(logits);
        let (b, k) = z.dim();
        assert_eq!(labels.len(), b, "focal_ce label count mismatch");
        assert!(b > 0, "focal_ce of empty batch");
        let probs = softmax_rows(z);
        let mut total = 0.0;
        for i in 0..b {
            let row = z.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..k {
                let y = smoothed_target(labels[i], c, k, smoothing);
                if y == 0.0 {
                    continue;
                }
                let p = probs[[i, c]];
                let logp = z[[i, c]] - lse;
                total += y * (1.0 - p).powf(gamma) * (-logp);
            }
        }
        let v = Mat::from_elem((1, 1), total / b as f64);
        self.push(
            v,
            Op::FocalCe {
                logits,
                labels,
                gamma,
                smoothing,
                probs,
            },
        )
    }

    /// Gradients of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::Shape(format!(
                "loss root must be 1x1, got {shape:?}"
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::AddTiled(a, tile) => {
                    let t = self.shape(*tile).0;
                    let mut gt = Mat::zeros(self.shape(*tile));
                    for (r, row) in g.rows().into_iter().enumerate() {
                        let mut dst = gt.row_mut(r % t);
                        dst += &row;
                    }
                    acc(&mut grads, *tile, gt);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| *gv /= x);
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= 2.0 * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..y.ncols() {
                            ga[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut ga = Mat::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let gm = g.row(i).sum() / n;
                        let gym: f64 = g
                            .row(i)
                            .iter()
                            .zip(y.row(i))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n;
                        for j in 0..y.ncols() {
                            ga[[i, j]] = inv_std[i] * (g[[i, j]] - gm - y[[i, j]] * gym);
                        }
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let sh = self.shape(*a);
                    let ga = Mat::from_elem(sh, g[[0, 0]] / (sh.0 * sh.1) as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::ColMean(a) => {
                    let sh = self.shape(*a);
                    let row = &g / sh.0 as f64;
                    let ga = row.broadcast(sh).expect("broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let sh = self.shape(*a);
                    let data: Vec<f64> = g.iter().cloned().collect();
                    acc(
                        &mut grads,
                        *a,
                        Mat::from_shape_vec(sh, data).expect("reshape"),
                    );
                }
                Op::SelectCols(a, cols) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![.., cols.clone()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::Attend { weights, values } => {
                    let a = self.value(*weights);
                    let vals = self.value(*values);
                    let (b, t) = a.dim();
                    let mut gw = Mat::zeros((b, t));
                    let mut gv = Mat::zeros(vals.dim());
                    for i in 0..b {
                        let gi = g.row(i);
                        for k in 0..t {
                            let r = i * t + k;
                            gw[[i, k]] = gi.dot(&vals.row(r));
                            gv.row_mut(r).scaled_add(a[[i, k]], &gi);
                        }
                    }
                    acc(&mut grads, *weights, gw);
                    acc(&mut grads, *values, gv);
                }
                Op::GroupEmbed { x, w, groups } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let t = groups.len();
                    let mut gx = Mat::zeros(xv.dim());
                    let mut gw = Mat::zeros(wv.dim());
                    for i in 0..xv.nrows() {
                        for (k, grp) in groups.iter().enumerate() {
                            let gr = g.row(i * t + k);
                            for c in grp.clone() {
                                gx[[i, c]] = gr.dot(&wv.row(c));
                                let xc = xv[[i, c]];
                                if xc != 0.0 {
                                    gw.row_mut(c).scaled_add(xc, &gr);
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let scale = 2.0 * g[[0, 0]] / p.len() as f64;
                    acc(&mut grads, *pred, (p - &**target) * scale);
                }
                Op::FocalCe {
                    logits,
                    labels,
                    gamma,
                    smoothing,
                    probs,
                } => {
                    let (b, k) = probs.dim();
                    let z = self.value(*logits);
                    let scale = g[[0, 0]] / b as f64;
                    let mut gz = Mat::zeros((b, k));
                    let mut u = vec![0.0; k];
                    for i in 0..b {
                        let row = z.row(i);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        // u_c = p_c · ∂ℓ/∂p_c
                        for c in 0..k {
                            let y = smoothed_target(labels[i], c, k, *smoothing);
                            let p = probs[[i, c]];
                            u[c] = if y == 0.0 {
                                0.0
                            } else {
                                let q = 1.0 - p;
                                let logp = z[[i, c]] - lse;
                                let mod_term = if *gamma == 0.0 || q <= 0.0 {
                                    0.0
                                } else {
                                    gamma * q.powf(gamma - 1.0) * p * logp
                                };
                                y * (mod_term - q.powf(*gamma))
                            };
                        }
                        let su: f64 = u.iter().sum();
                        for c in 0..k {
                            gz[[i, c]] = scale * (u[c] - probs[[i, c]] * su);
                        }
                    }
                    acc(&mut grads, *logits, gz);
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Smoothed one-hot target weight for class `c` when the label is `label`.
pub fn smoothed_target(label: usize, c: usize, k: usize, smoothing: f64) -> f64 {
    let off = smoothing / k as f64;
    if c == label {
        1.0 - smoothing + off
    } else {
        off
    }
}
