//! Computation graph recorded in topological order.
//!
//! Every operation appends one node whose inputs already exist, so the node
//! list is itself a valid topological order and `backward` is a single
//! reverse sweep.

use rand::Rng;

use super::gemm::gemm;
use super::Tensor;
use crate::error::{DimeError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        scale: Vec<f64>,
        clamped: Vec<bool>,
    },
    Softmax {
        x: Var,
        tau: f64,
    },
    RowDistance(Var, Var),
    RowCosine {
        a: Var,
        b: Var,
        na: Vec<f64>,
        nb: Vec<f64>,
        a_small: Vec<bool>,
        b_small: Vec<bool>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    PairMean(Var),
    PairAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
    ScaleRows(Var, Var),
    Column(Var, usize),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations plus the gradients of the last backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(DimeError::dim(op, s, &[0, 0])),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DimeError::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if `v` lies
    /// on a path to the root.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-head attention probabilities `[B, heads, 2, 2]` recorded by
    /// [`Graph::pair_attention`] (before dropout).
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::PairAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_rank2("matmul", ta)?;
        let (k2, n) = require_rank2("matmul", tb)?;
        if k != k2 {
            return Err(DimeError::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x * w^T + b` with `w` stored as `[out, in]`. A rank-1 `x` yields a
    /// rank-1 result.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        let (n, k) = require_rank2("linear", tw)?;
        let (m, kx) = tx.rows_cols();
        if kx != k || tx.shape().len() > 2 {
            return Err(DimeError::dim("linear", tx.shape(), tw.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, tx.data(), false, tw.data(), true, &mut out, false);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [n] {
                return Err(DimeError::dim("linear bias", tb.shape(), &[n]));
            }
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(tb.data()).for_each(|(o, bv)| *o += bv);
            }
        }
        let shape = if tx.shape().len() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (_, n) = tx.rows_cols();
        if tr.shape() != [n] {
            return Err(DimeError::dim("add_row", tx.shape(), tr.shape()));
        }
        let mut data = tx.data().to_vec();
        for r in data.chunks_mut(n) {
            r.iter_mut().zip(tr.data()).for_each(|(o, v)| *o += v);
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, row), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| f(*v)).collect();
        let t = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Exact GELU, `x * Phi(x)` with the standard normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu_scalar, Op::Gelu(x))
    }

    /// Inverted dropout. Outside training (or with `p == 0`) this returns `x`
    /// itself and records nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(DimeError::Parameter(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(DimeError::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let (m, n) = tx.rows_cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(DimeError::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise `x / max(||x||, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(DimeError::Parameter(format!("l2_normalize eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let (m, n) = tx.rows_cols();
        let mut scale = vec![0.0; m];
        let mut clamped = vec![false; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let nrm = norm(tx.row(i));
            let s = if nrm >= eps { nrm } else { eps };
            clamped[i] = nrm < eps;
            scale[i] = s;
            for j in 0..n {
                out[i * n + j] = tx.row(i)[j] / s;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, scale, clamped }, rg))
    }

    /// Row-wise `softmax(x / tau)` with max subtraction.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(DimeError::Parameter(format!("temperature must be > 0, got {tau}")));
        }
        let tx = self.value(x);
        if !tx.is_finite() {
            return Err(DimeError::Input("softmax input contains non-finite values".into()));
        }
        let (m, n) = tx.rows_cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            super::ops::softmax_into(tx.row(i), tau, &mut out[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, tau }, rg))
    }

    /// Euclidean distance between matching rows; output `[rows]`.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("row_distance", ta, tb)?;
        let (m, _) = ta.rows_cols();
        let data = (0..m)
            .map(|i| {
                ta.row(i)
                    .iter()
                    .zip(tb.row(i))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m], data)?, Op::RowDistance(a, b), rg))
    }

    /// Cosine similarity between matching rows, norms floored at `eps` and
    /// the result clamped to `[-1, 1]`; output `[rows]`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(DimeError::Parameter(format!("cosine eps must be > 0, got {eps}")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("row_cosine", ta, tb)?;
        let (m, _) = ta.rows_cols();
        let mut na = vec![0.0; m];
        let mut nb = vec![0.0; m];
        let mut a_small = vec![false; m];
        let mut b_small = vec![false; m];
        let mut data = vec![0.0; m];
        for i in 0..m {
            let (ra, rb) = (ta.row(i), tb.row(i));
            let (xa, xb) = (norm(ra), norm(rb));
            a_small[i] = xa < eps;
            b_small[i] = xb < eps;
            na[i] = xa.max(eps);
            nb[i] = xb.max(eps);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            data[i] = (dot / (na[i] * nb[i])).clamp(-1.0, 1.0);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m], data)?,
            Op::RowCosine {
                a,
                b,
                na,
                nb,
                a_small,
                b_small,
            },
            rg,
        ))
    }

    /// Stacks rank-2 blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| DimeError::Usage("concat_rows needs at least one input".into()))?;
        let n = require_rank2("concat_rows", self.value(*first))?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            let (m, c) = require_rank2("concat_rows", t)?;
            if c != n {
                return Err(DimeError::dim("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += m;
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `[a | b]` for rank-2 inputs with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, p) = require_rank2("concat_cols", ta)?;
        let (m2, q) = require_rank2("concat_cols", tb)?;
        if m != m2 {
            return Err(DimeError::dim("concat_cols", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, p + q], data)?, Op::ConcatCols(a, b), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = require_rank2("slice_cols", tx)?;
        if len == 0 || start + len > n {
            return Err(DimeError::dim("slice_cols", tx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x, start }, rg))
    }

    /// Mean of paired rows: `x` is `[2B, d]` with row `i` paired to row
    /// `B + i`; output `[B, d]`.
    pub fn pair_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = require_rank2("pair_mean", tx)?;
        if rows % 2 != 0 {
            return Err(DimeError::dim("pair_mean", tx.shape(), &[rows + 1, d]));
        }
        let b = rows / 2;
        let mut data = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                data[i * d + j] = 0.5 * (tx.row(i)[j] + tx.row(b + i)[j]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, d], data)?, Op::PairMean(x), rg))
    }

    /// Multi-head scaled dot-product self-attention over two-token
    /// sequences. `q`, `k`, `v` are `[2B, d]`, rows `i` and `B + i` forming
    /// the sequence of sample `i`. When `dropout_p > 0` and `training` is set,
    /// inverted dropout is applied to the attention probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn pair_attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        dropout_p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape("pair_attention", tq, tk)?;
        same_shape("pair_attention", tq, tv)?;
        let (rows, d) = require_rank2("pair_attention", tq)?;
        if rows % 2 != 0 || heads == 0 || d % heads != 0 {
            return Err(DimeError::dim("pair_attention", tq.shape(), &[heads]));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(DimeError::Parameter(format!(
                "dropout probability must lie in [0, 1), got {dropout_p}"
            )));
        }
        let b = rows / 2;
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * heads * 4];
        for i in 0..b {
            let tok = [i, b + i];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for a in 0..2 {
                    let qa = &tq.row(tok[a])[cols.clone()];
                    let s: Vec<f64> = (0..2)
                        .map(|c| {
                            let kc = &tk.row(tok[c])[cols.clone()];
                            qa.iter().zip(kc).map(|(x, y)| x * y).sum::<f64>() * inv
                        })
                        .collect();
                    let base = ((i * heads + h) * 2 + a) * 2;
                    super::ops::softmax_into(&s, 1.0, &mut probs[base..base + 2]);
                }
            }
        }
        let mask = if training && dropout_p > 0.0 {
            let keep = 1.0 / (1.0 - dropout_p);
            Some(
                (0..probs.len())
                    .map(|_| if rng.gen::<f64>() < dropout_p { 0.0 } else { keep })
                    .collect::<Vec<f64>>(),
            )
        } else {
            None
        };
        let mut out = vec![0.0; rows * d];
        for i in 0..b {
            let tok = [i, b + i];
            for h in 0..heads {
                for a in 0..2 {
                    let base = ((i * heads + h) * 2 + a) * 2;
                    for c in 0..2 {
                        let mut p = probs[base + c];
                        if let Some(m) = &mask {
                            p *= m[base + c];
                        }
                        let vc = &tv.row(tok[c])[h * dh..(h + 1) * dh];
                        let o = &mut out[tok[a] * d + h * dh..tok[a] * d + (h + 1) * dh];
                        o.iter_mut().zip(vc).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::PairAttention {
                q,
                k,
                v,
                heads,
                probs,
                mask,
            },
            rg,
        ))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (m, n) = require_rank2("scale_rows", tx)?;
        if ts.shape() != [m] {
            return Err(DimeError::dim("scale_rows", tx.shape(), ts.shape()));
        }
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v *= ts.data()[i]);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::ScaleRows(x, s), rg))
    }

    /// Column `j` of a rank-2 tensor as a `[rows]` vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = require_rank2("column", tx)?;
        if j >= n {
            return Err(DimeError::dim("column", tx.shape(), &[j]));
        }
        let data = (0..m).map(|i| tx.row(i)[j]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m], data)?, Op::Column(x, j), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Batch-mean negative log-likelihood of `labels` under row-wise softmax
    /// of `logits`, computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, c) = tl.rows_cols();
        if labels.len() != m || m == 0 {
            return Err(DimeError::dim("cross_entropy", tl.shape(), &[labels.len()]));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(DimeError::Input(format!(
                "label {l} of record {i} is outside [0, {c})"
            )));
        }
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for i in 0..m {
            let row = tl.row(i);
            let lse = super::ops::log_sum_exp(row);
            loss += lse - row[labels[i]];
            super::ops::softmax_into(row, 1.0, &mut probs[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root, accumulating into every ancestor
    /// that requires gradients. Replaces the gradients of any earlier call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(DimeError::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Gradient buffer for `v`, or `None` when nothing upstream needs it.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).rows_cols();
                let n = val(*b).rows_cols().1;
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(ga) = buf!(*a) {
                    gemm(m, n, k, g, false, bd, true, ga, true);
                }
                if let Some(gb) = buf!(*b) {
                    gemm(k, m, n, ad, true, g, false, gb, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = val(*x).rows_cols();
                let n = val(*w).rows_cols().0;
                let (xd, wd) = (val(*x).data(), val(*w).data());
                if let Some(gx) = buf!(*x) {
                    gemm(m, n, k, g, false, wd, false, gx, true);
                }
                if let Some(gw) = buf!(*w) {
                    gemm(n, m, k, g, true, xd, false, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = buf!(*b) {
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = buf!(v) {
                        gv.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
                if let Some(gb) = buf!(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(ga) = buf!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::AddRow(x, r) => {
                let n = val(*r).len();
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
                if let Some(gr) = buf!(*r) {
                    for row in g.chunks(n) {
                        gr.iter_mut().zip(row).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += c * d);
                }
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                if let Some(gx) = buf!(*x) {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                if let Some(gx) = buf!(*x) {
                    for i in 0..g.len() {
                        let z = xd[i];
                        gx[i] += g[i] * (std_normal_cdf(z) + z * std_normal_pdf(z));
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = buf!(*x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = val(*x).rows_cols();
                let gam = val(*gamma).data();
                if let Some(gg) = buf!(*gamma) {
                    for i in 0..m * n {
                        gg[i % n] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = buf!(*beta) {
                    for i in 0..m * n {
                        gb[i % n] += g[i];
                    }
                }
                if let Some(gx) = buf!(*x) {
                    let nf = n as f64;
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dxhat: Vec<f64> = g[r.clone()].iter().zip(gam).map(|(d, c)| d * c).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat[r.clone()]).map(|(d, h)| d * h).sum();
                        for j in 0..n {
                            gx[i * n + j] +=
                                inv_std[i] / nf * (nf * dxhat[j] - s1 - xhat[i * n + j] * s2);
                        }
                    }
                }
            }
            Op::L2Normalize { x, scale, clamped } => {
                let (m, n) = val(*x).rows_cols();
                let y = out.data();
                if let Some(gx) = buf!(*x) {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        if clamped[i] {
                            for j in r {
                                gx[j] += g[j] / scale[i];
                            }
                        } else {
                            let dot: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                            for j in r {
                                gx[j] += (g[j] - y[j] * dot) / scale[i];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, tau } => {
                let (m, n) = val(*x).rows_cols();
                let y = out.data();
                if let Some(gx) = buf!(*x) {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            gx[j] += y[j] * (g[j] - dot) / tau;
                        }
                    }
                }
            }
            Op::RowDistance(a, b) => {
                let (m, n) = val(*a).rows_cols();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let d = out.data();
                let coef: Vec<f64> = (0..m).map(|i| if d[i] > 0.0 { g[i] / d[i] } else { 0.0 }).collect();
                if let Some(ga) = buf!(*a) {
                    for i in 0..m * n {
                        ga[i] += coef[i / n] * (ad[i] - bd[i]);
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for i in 0..m * n {
                        gb[i] -= coef[i / n] * (ad[i] - bd[i]);
                    }
                }
            }
            Op::RowCosine {
                a,
                b,
                na,
                nb,
                a_small,
                b_small,
            } => {
                let (m, n) = val(*a).rows_cols();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let c = out.data();
                // d cos / d a = b / (na nb) - cos * a / ||a||^2 while ||a|| >= eps;
                // below eps the norm is the constant eps and the second term vanishes.
                if let Some(ga) = buf!(*a) {
                    for i in 0..m {
                        let inv = 1.0 / (na[i] * nb[i]);
                        let sq = if a_small[i] { 0.0 } else { c[i] / (na[i] * na[i]) };
                        for j in i * n..(i + 1) * n {
                            ga[j] += g[i] * (bd[j] * inv - sq * ad[j]);
                        }
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for i in 0..m {
                        let inv = 1.0 / (na[i] * nb[i]);
                        let sq = if b_small[i] { 0.0 } else { c[i] / (nb[i] * nb[i]) };
                        for j in i * n..(i + 1) * n {
                            gb[j] += g[i] * (ad[j] * inv - sq * bd[j]);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    if let Some(gp) = buf!(*p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(o, d)| *o += d);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = val(*a).rows_cols();
                let q = val(*b).rows_cols().1;
                if let Some(ga) = buf!(*a) {
                    for i in 0..m {
                        for j in 0..p {
                            ga[i * p + j] += g[i * (p + q) + j];
                        }
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for i in 0..m {
                        for j in 0..q {
                            gb[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).rows_cols();
                let len = out.rows_cols().1;
                if let Some(gx) = buf!(*x) {
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::PairMean(x) => {
                let (b, d) = out.rows_cols();
                if let Some(gx) = buf!(*x) {
                    for i in 0..b * d {
                        gx[i] += 0.5 * g[i];
                        gx[b * d + i] += 0.5 * g[i];
                    }
                }
            }
            Op::PairAttention {
                q,
                k,
                v,
                heads,
                probs,
                mask,
            } => {
                let (rows, d) = val(*q).rows_cols();
                let b = rows / 2;
                let dh = d / heads;
                let inv = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                for i in 0..b {
                    let tok = [i, b + i];
                    for h in 0..*heads {
                        let off = |t: usize| t * d + h * dh;
                        for a in 0..2 {
                            let base = ((i * heads + h) * 2 + a) * 2;
                            let ga = &g[off(tok[a])..off(tok[a]) + dh];
                            let mut dp = [0.0; 2];
                            for c in 0..2 {
                                let m = mask.as_ref().map_or(1.0, |m| m[base + c]);
                                let p_eff = probs[base + c] * m;
                                let vc = &vd[off(tok[c])..off(tok[c]) + dh];
                                dp[c] = ga.iter().zip(vc).map(|(x, y)| x * y).sum::<f64>() * m;
                                for j in 0..dh {
                                    gv[off(tok[c]) + j] += p_eff * ga[j];
                                }
                            }
                            let p = &probs[base..base + 2];
                            let s = p[0] * dp[0] + p[1] * dp[1];
                            for c in 0..2 {
                                let ds = p[c] * (dp[c] - s) * inv;
                                for j in 0..dh {
                                    gq[off(tok[a]) + j] += ds * kd[off(tok[c]) + j];
                                    gk[off(tok[c]) + j] += ds * qd[off(tok[a]) + j];
                                }
                            }
                        }
                    }
                }
                for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(gx) = buf!(var) {
                        gx.iter_mut().zip(&local).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let (m, n) = val(*x).rows_cols();
                let (xd, sd) = (val(*x).data(), val(*s).data());
                if let Some(gx) = buf!(*x) {
                    for i in 0..m * n {
                        gx[i] += g[i] * sd[i / n];
                    }
                }
                if let Some(gs) = buf!(*s) {
                    for (i, gi) in gs.iter_mut().enumerate().take(m) {
                        *gi += (i * n..(i + 1) * n).map(|j| g[j] * xd[j]).sum::<f64>();
                    }
                }
            }
            Op::Column(x, j) => {
                let n = val(*x).rows_cols().1;
                if let Some(gx) = buf!(*x) {
                    for (i, d) in g.iter().enumerate() {
                        gx[i * n + j] += d;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (m, c) = val(*logits).rows_cols();
                if let Some(gl) = buf!(*logits) {
                    let s = g[0] / m as f64;
                    for i in 0..m {
                        for j in 0..c {
                            let y = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - y);
                        }
                    }
                }
            }
        }
    }
}
