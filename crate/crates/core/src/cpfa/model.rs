use std::ops::Range;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softplus, xavier_uniform, Mat, ParamStore, Tape, Var};

/// Initial raw confidence: `softplus(ln(e − 1)) = 1`.
pub const THETA_LAMBDA_INIT: f64 = 0.541_324_854_612_918_1;

/// Column groups of the encoded input, one group per token.
///
/// The first `n_feature_tokens` tokens are source features; any further tokens
/// (observed-indicators in mask-aware mode) are attended over but not
/// penalized against the prior.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub groups: Vec<Range<usize>>,
    pub n_feature_tokens: usize,
}

impl InputLayout {
    pub fn n_tokens(&self) -> usize {
        self.groups.len()
    }

    pub fn width(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Regression,
    Classification { n_classes: usize },
}

impl OutputKind {
    pub fn width(&self) -> usize {
        match *self {
            OutputKind::Regression => 1,
            OutputKind::Classification { n_classes } => n_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub heads: usize,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl ModelShape {
    pub fn head_dim(&self) -> usize {
        (self.embed_dim / self.heads).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HeadParams {
    key: usize,
    query: usize,
    value: usize,
    theta: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamIndex {
    embed: usize,
    position: usize,
    heads: Vec<HeadParams>,
    out_w: usize,
    out_b: usize,
    norm_gain: usize,
    norm_bias: usize,
    ff: Vec<(usize, usize)>,
    bypass_w: usize,
    bypass_b: usize,
    pred_w: usize,
    pred_b: usize,
}

/// Prior-regularized feature-attention network for one target feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpfaModel {
    pub layout: InputLayout,
    pub output: OutputKind,
    pub shape: ModelShape,
    pub params: ParamStore,
    index: ParamIndex,
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    /// `B × 1` predictions or `B × K` logits.
    pub output: Var,
    /// Per-head attention weights, `B × T`.
    pub attention: Vec<Var>,
    /// Per-head `1 × 1` confidence `λ_h`.
    pub lambdas: Vec<Var>,
    /// Input of the predictor head.
    pub hidden: Var,
}

/// Attention weights and head means for a batch, without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub hidden: Mat,
    pub weights: Vec<Mat>,
    pub head_means: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Standardized values.
    Regression(Vec<f64>),
    Classification(Vec<usize>),
}

/// Rows evaluated per forward pass during inference.
const INFER_CHUNK: usize = 1024;

impl CpfaModel {
    pub fn new<R: Rng + ?Sized>(
        layout: InputLayout,
        output: OutputKind,
        shape: ModelShape,
        rng: &mut R,
    ) -> Result<Self> {
        if layout.n_feature_tokens == 0 {
            return Err(Error::invalid(
                "feature attention needs at least one source feature",
            ));
        }
        if shape.heads == 0 || shape.embed_dim == 0 || shape.hidden_dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if let OutputKind::Classification { n_classes } = output {
            if n_classes < 2 {
                return Err(Error::invalid("classification needs at least 2 classes"));
            }
        }
        let t = layout.n_tokens();
        let w = layout.width();
        let e = shape.embed_dim;
        let dk = shape.head_dim();
        let mut p = ParamStore::default();
        let embed = p.push("embed", xavier_uniform(w, e, rng));
        let position = p.push("position", xavier_uniform(t, e, rng));
        let heads = (0..shape.heads)
            .map(|h| HeadParams {
                key: p.push(format!("head{h}.key"), xavier_uniform(e, dk, rng)),
                // zero query: attention starts uniform
                query: p.push(format!("head{h}.query"), Mat::zeros((dk, 1))),
                value: p.push(format!("head{h}.value"), xavier_uniform(e, dk, rng)),
                theta: p.push(
                    format!("head{h}.theta"),
                    Mat::from_elem((1, 1), THETA_LAMBDA_INIT),
                ),
            })
            .collect();
        let out_w = p.push("attn_out.w", xavier_uniform(shape.heads * dk, e, rng));
        let out_b = p.push("attn_out.b", Mat::zeros((1, e)));
        let norm_gain = p.push("norm.gain", Mat::ones((1, e)));
        let norm_bias = p.push("norm.bias", Mat::zeros((1, e)));
        let mut ff = Vec::new();
        let mut fan_in = e;
        for (i, &hd) in shape.hidden_dims.iter().enumerate() {
            let wi = p.push(format!("ff{i}.w"), xavier_uniform(fan_in, hd, rng));
            let bi = p.push(format!("ff{i}.b"), Mat::zeros((1, hd)));
            ff.push((wi, bi));
            fan_in = hd;
        }
        let bypass_w = p.push("bypass.w", xavier_uniform(w, fan_in, rng));
        let bypass_b = p.push("bypass.b", Mat::zeros((1, fan_in)));
        let pred_w = p.push("pred.w", xavier_uniform(fan_in, output.width(), rng));
        let pred_b = p.push("pred.b", Mat::zeros((1, output.width())));
        Ok(Self {
            layout,
            output,
            shape,
            params: p,
            index: ParamIndex {
                embed,
                position,
                heads,
                out_w,
                out_b,
                norm_gain,
                norm_bias,
                ff,
                bypass_w,
                bypass_b,
                pred_w,
                pred_b,
            },
        })
    }

    pub fn n_heads(&self) -> usize {
        self.shape.heads
    }

    /// Index of `θ_λ,h` in the parameter store.
    pub fn theta_index(&self, head: usize) -> usize {
        self.index.heads[head].theta
    }

    /// Index of the key projection of `head` in the parameter store.
    pub fn key_index(&self, head: usize) -> usize {
        self.index.heads[head].key
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.index
            .heads
            .iter()
            .map(|h| softplus(self.params.values[h.theta][[0, 0]]))
            .collect()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .values
            .iter()
            .map(|m| tape.leaf(m.clone()))
            .collect()
    }

    /// Records the forward pass for a `B × width` input batch.
    pub fn forward(&self, tape: &mut Tape, leaves: &[Var], x: Var) -> ForwardVars {
        let b = tape.value(x).nrows();
        let t = self.layout.n_tokens();
        let dk = self.shape.head_dim();
        let ix = &self.index;
        let groups = Rc::new(self.layout.groups.clone());

        let tok = tape.group_embed(x, leaves[ix.embed], groups);
        let tok = tape.add_tiled(tok, leaves[ix.position]);

        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let mut attention = Vec::with_capacity(ix.heads.len());
        let mut lambdas = Vec::with_capacity(ix.heads.len());
        let mut head_out = Vec::with_capacity(ix.heads.len());
        let key_in = tape.layer_norm(tok);
        for h in &ix.heads {
            let keys = tape.matmul(key_in, leaves[h.key]);
            let scores = tape.matmul(keys, leaves[h.query]);
            let scores = tape.reshape(scores, b, t);
            let scores = tape.scale(scores, inv_sqrt);
            let a = tape.softmax(scores);
            let values = tape.matmul(tok, leaves[h.value]);
            head_out.push(tape.attend(a, values));
            attention.push(a);
            lambdas.push(tape.softplus(leaves[h.theta]));
        }
        let cat = tape.concat_cols(&head_out);
        let proj = tape.matmul(cat, leaves[ix.out_w]);
        let proj = tape.add_row(proj, leaves[ix.out_b]);

        // residual path: tokens pooled by the head-averaged attention
        let mut mean_attn = attention[0];
        for &a in &attention[1..] {
            mean_attn = tape.add(mean_attn, a);
        }
        let mean_attn = tape.scale(mean_attn, 1.0 / attention.len() as f64);
        let pooled = tape.attend(mean_attn, tok);
        let res = tape.add(proj, pooled);
        let normed = tape.layer_norm(res);
        let normed = tape.mul_row(normed, leaves[ix.norm_gain]);
        let mut hcur = tape.add_row(normed, leaves[ix.norm_bias]);

        for &(w, bias) in &ix.ff {
            let z = tape.matmul(hcur, leaves[w]);
            let z = tape.add_row(z, leaves[bias]);
            hcur = tape.relu(z);
        }
        let by = tape.matmul(x, leaves[ix.bypass_w]);
        let by = tape.add_row(by, leaves[ix.bypass_b]);
        let hidden = tape.add(hcur, by);
        let out = tape.matmul(hidden, leaves[ix.pred_w]);
        let output = tape.add_row(out, leaves[ix.pred_b]);
        ForwardVars {
            output,
            attention,
            lambdas,
            hidden,
        }
    }

    fn check_width(&self, inputs: &Mat) -> Result<()> {
        if inputs.ncols() != self.layout.width() {
            return Err(Error::Shape(format!(
                "model expects {} input columns, got {}",
                self.layout.width(),
                inputs.ncols()
            )));
        }
        Ok(())
    }

    /// Raw outputs (predictions or logits) for every row.
    pub fn outputs(&self, inputs: &Mat) -> Result<Mat> {
        self.check_width(inputs)?;
        let mut out = Mat::zeros((inputs.nrows(), self.output.width()));
        for start in (0..inputs.nrows()).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(inputs.nrows());
            let mut tape = Tape::new();
            let leaves = self.leaves(&mut tape);
            let x = tape.leaf(inputs.slice(ndarray::s![start..end, ..]).to_owned());
            let fv = self.forward(&mut tape, &leaves, x);
            out.slice_mut(ndarray::s![start..end, ..])
                .assign(tape.value(fv.output));
        }
        Ok(out)
    }

    /// Per-head attention over a batch and the batch means of each head.
    pub fn attention_forward(&self, inputs: &Mat) -> Result<AttentionOutput> {
        self.check_width(inputs)?;
        if inputs.nrows() == 0 {
            return Err(Error::invalid("attention over an empty batch"));
        }
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let x = tape.leaf(inputs.clone());
        let fv = self.forward(&mut tape, &leaves, x);
        let weights: Vec<Mat> = fv
            .attention
            .iter()
            .map(|&a| tape.value(a).clone())
            .collect();
        let head_means = weights
            .iter()
            .map(|w| {
                w.mean_axis(ndarray::Axis(0))
                    .expect("nonempty batch")
                    .to_vec()
            })
            .collect();
        Ok(AttentionOutput {
            hidden: tape.value(fv.hidden).clone(),
            weights,
            head_means,
        })
    }

    /// Regression: standardized predictions. Classification: argmax with ties
    /// resolved to the lowest class index.
    pub fn predict(&self, inputs: &Mat) -> Result<Prediction> {
        let out = self.outputs(inputs)?;
        Ok(match self.output {
            OutputKind::Regression => Prediction::Regression(out.column(0).to_vec()),
            OutputKind::Classification { .. } => Prediction::Classification(
                out.rows()
                    .into_iter()
                    .map(|r| argmax(r.as_slice().expect("row-major")))
                    .collect(),
            ),
        })
    }
}

/// Index of the largest value; the first index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(widths: &[usize]) -> InputLayout {
        let mut groups = Vec::new();
        let mut c = 0;
        for &w in widths {
            groups.push(c..c + w);
            c += w;
        }
        InputLayout {
            n_feature_tokens: widths.len(),
            groups,
        }
    }

    fn small_model(output: OutputKind) -> CpfaModel {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        CpfaModel::new(
            layout(&[1, 3, 1]),
            output,
            ModelShape {
                heads: 2,
                embed_dim: 8,
                hidden_dims: vec![6, 4],
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn theta_init_gives_unit_lambda() {
        assert!((softplus(THETA_LAMBDA_INIT) - 1.0).abs() < 1e-15);
        let m = small_model(OutputKind::Regression);
        for l in m.lambdas() {
            assert!((l - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_on_simplex() {
        let m = small_model(OutputKind::Regression);
        let x = Mat::from_shape_fn((1, 5), |(_, j)| j as f64 * 0.3 - 0.4);
        let att = m.attention_forward(&x).unwrap();
        for w in &att.weights {
            let s: f64 = w.row(0).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn zero_keys_give_uniform_attention() {
        let mut m = small_model(OutputKind::Regression);
        for h in 0..m.n_heads() {
            let k = m.key_index(h);
            m.params.values[k].fill(0.0);
        }
        let x = Mat::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64 * 0.1);
        let att = m.attention_forward(&x).unwrap();
        for w in &att.weights {
            assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn argmax_ties_and_predict_shape() {
        assert_eq!(argmax(&[2.0, 1.0, 1.0]), 0);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 3.0, 3.0]), 1);
        let m = small_model(OutputKind::Classification { n_classes: 3 });
        let x = Mat::zeros((7, 5));
        match m.predict(&x).unwrap() {
            Prediction::Classification(l) => assert_eq!(l.len(), 7),
            other => panic!("unexpected {other:?}"),
        }
        assert!(m.predict(&Mat::zeros((2, 4))).is_err());
    }
}
