//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node. Leaves created with
//! `requires_grad = false` (constants, detached values) never receive
//! gradient, and nothing upstream of them is visited, so stop-gradient
//! semantics are exact: the gradient of a parameter that is only reachable
//! through a detached value is identically zero.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::exec;

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// Normalize each row over its columns (layer normalization).
    Rows,
    /// Normalize each column over the rows of the batch (batch normalization).
    Cols,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Gelu(Var),
    Relu(Var),
    Standardize {
        x: Var,
        axis: NormAxis,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<Mat>,
    },
    PrependRow {
        row: Var,
        body: Var,
        groups: usize,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    SumAll(Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    scope: String,
}

const NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter. Repeated binds of the same name within one
    /// scope return the same node.
    pub fn param(&mut self, name: &str, value: &Mat, trainable: bool) -> Var {
        let key = format!("{}{name}", self.scope);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.params.insert(key, v);
        v
    }

    /// Prefix applied to the names of subsequently bound parameters, so two
    /// networks with identical parameter names can share a graph.
    pub fn set_scope(&mut self, scope: &str) {
        self.scope = scope.to_string();
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Copies the value into a fresh constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    /// Multiplies every row of `x` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) * self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x) * s;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        let rg = self.rg(x);
        self.push(value, Op::Offset(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| {
            let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Zero-mean, unit-variance normalization (biased variance) along `axis`.
    pub fn standardize(&mut self, x: Var, axis: NormAxis, eps: f64) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let inv_std = match axis {
            NormAxis::Rows => standardize_lanes(&mut value, Axis(1), eps),
            NormAxis::Cols => standardize_lanes(&mut value, Axis(0), eps),
        };
        let rg = self.rg(x);
        self.push(value, Op::Standardize { x, axis, inv_std }, rg)
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `(batch·seq) × 3d` with columns laid out `[q | k | v]`; head
    /// `h` reads columns `h·d/heads .. (h+1)·d/heads` of each block. The
    /// output is `(batch·seq) × d`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let input = self.value(qkv);
        let dim = input.ncols() / 3;
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let results = exec::map_range(batch * heads, |job| {
            let (n, h) = (job / heads, job % heads);
            let rows = s![n * seq..(n + 1) * seq, ..];
            let block = input.slice(rows);
            let q = block.slice(s![.., h * hd..(h + 1) * hd]);
            let k = block.slice(s![.., dim + h * hd..dim + (h + 1) * hd]);
            let v = block.slice(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
            let mut att = q.dot(&k.t()) * scale;
            softmax_rows(&mut att);
            let out = att.dot(&v);
            (att, out)
        });
        let mut value = Mat::zeros((batch * seq, dim));
        let mut probs = Vec::with_capacity(results.len());
        for (job, (att, out)) in results.into_iter().enumerate() {
            let (n, h) = (job / heads, job % heads);
            value
                .slice_mut(s![n * seq..(n + 1) * seq, h * hd..(h + 1) * hd])
                .assign(&out);
            probs.push(att);
        }
        let rg = self.rg(qkv);
        self.push(
            value,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Inserts `row` (1×c) before each of the `groups` equal blocks of `body`.
    pub fn prepend_row(&mut self, row: Var, body: Var, groups: usize) -> Var {
        let r = self.value(row);
        let b = self.value(body);
        let per = b.nrows() / groups;
        let cols = b.ncols();
        let mut value = Mat::zeros((groups * (per + 1), cols));
        for g in 0..groups {
            let base = g * (per + 1);
            value.row_mut(base).assign(&r.row(0));
            value
                .slice_mut(s![base + 1..base + 1 + per, ..])
                .assign(&b.slice(s![g * per..(g + 1) * per, ..]));
        }
        let rg = self.rg(row) || self.rg(body);
        self.push(value, Op::PrependRow { row, body, groups }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let value = self.value(x).select(Axis(0), &rows);
        let rg = self.rg(x);
        self.push(value, Op::GatherRows(x, rows), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        self.gather_rows(x, (start..start + len).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Scales every row to unit ℓ2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_EPS))
            .collect();
        let mut value = xv.clone();
        for (mut r, &n) in value.rows_mut().into_iter().zip(&norms) {
            r /= n;
        }
        let rg = self.rg(x);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    ///
    /// `excluded[i] = Some(j)` removes column `j` from row `i`'s partition function.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        excluded: Option<&[Option<usize>]>,
    ) -> Var {
        let lv = self.value(logits);
        let mut probs = lv.clone();
        if let Some(ex) = excluded {
            for (i, e) in ex.iter().enumerate() {
                if let Some(j) = *e {
                    probs[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        let mut total = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - lv[[i, targets[i]]];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let m = targets.len() as f64;
        let value = Mat::from_elem((1, 1), total / m);
        let rg = self.rg(logits);
        self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ cᵢ·xᵢ` over same-shaped inputs. Terms with coefficient exactly zero
    /// contribute to the value but receive no gradient.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut value = Mat::zeros(self.value(terms[0].0).raw_dim());
        for &(v, c) in terms {
            value.scaled_add(c, self.value(v));
        }
        let rg = terms.iter().any(|&(v, c)| c != 0.0 && self.rg(v));
        self.push(value, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Backpropagates from a `1×1` output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(
            self.value(output).dim(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(output) {
            return Grads { grads: result };
        }
        grads[output.0] = Some(Mat::ones((1, 1)));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                result[i] = Some(g);
                continue;
            }
            self.backprop_node(node, g, &mut grads);
        }
        Grads { grads: result }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.accumulate(grads, *b, -&g);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, &g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, &g * self.value(*a));
                }
            }
            Op::AddRow(x, row) => {
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                self.accumulate(grads, *x, g);
            }
            Op::MulRow(x, row) => {
                if self.rg(*row) {
                    let gr = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
                if self.rg(*x) {
                    self.accumulate(grads, *x, &g * self.value(*row));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g * *s),
            Op::Offset(x) => self.accumulate(grads, *x, g),
            Op::Gelu(x) => {
                let mut gx = g;
                Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &v| {
                    let u = GELU_C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    *gv *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let mut gx = g;
                Zip::from(&mut gx).and(&node.value).for_each(|gv, &y| {
                    if y <= 0.0 {
                        *gv = 0.0;
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Standardize { x, axis, inv_std } => {
                let y = &node.value;
                let lane_axis = match axis {
                    NormAxis::Rows => Axis(1),
                    NormAxis::Cols => Axis(0),
                };
                let mut gx = g;
                for ((mut gl, yl), &is) in gx
                    .lanes_mut(lane_axis)
                    .into_iter()
                    .zip(y.lanes(lane_axis))
                    .zip(inv_std)
                {
                    let n = gl.len() as f64;
                    let mean_g = gl.sum() / n;
                    let mean_gy = gl.dot(&yl) / n;
                    Zip::from(&mut gl)
                        .and(&yl)
                        .for_each(|gv, &yv| *gv = is * (*gv - mean_g - yv * mean_gy));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let input = self.value(*qkv);
                let dim = input.ncols() / 3;
                let hd = dim / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let parts = exec::map_range(batch * heads, |job| {
                    let (n, h) = (job / heads, job % heads);
                    let block = input.slice(s![n * seq..(n + 1) * seq, ..]);
                    let q = block.slice(s![.., h * hd..(h + 1) * hd]);
                    let k = block.slice(s![.., dim + h * hd..dim + (h + 1) * hd]);
                    let v = block.slice(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
                    let go = g.slice(s![n * seq..(n + 1) * seq, h * hd..(h + 1) * hd]);
                    let att = &probs[job];
                    let dv = att.t().dot(&go);
                    let datt = go.dot(&v.t());
                    let mut ds = att * &datt;
                    let row_sums = ds.sum_axis(Axis(1));
                    Zip::from(ds.rows_mut())
                        .and(att.rows())
                        .and(&row_sums)
                        .for_each(|mut d, a, &rs| {
                            Zip::from(&mut d).and(&a).for_each(|dv, &av| *dv -= av * rs);
                        });
                    ds *= scale;
                    let dq = ds.dot(&k);
                    let dk = ds.t().dot(&q);
                    (dq, dk, dv)
                });
                let mut gin = Mat::zeros(input.raw_dim());
                for (job, (dq, dk, dv)) in parts.into_iter().enumerate() {
                    let (n, h) = (job / heads, job % heads);
                    let rows = n * seq..(n + 1) * seq;
                    gin.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd])
                        .assign(&dq);
                    gin.slice_mut(s![rows.clone(), dim + h * hd..dim + (h + 1) * hd])
                        .assign(&dk);
                    gin.slice_mut(s![rows, 2 * dim + h * hd..2 * dim + (h + 1) * hd])
                        .assign(&dv);
                }
                self.accumulate(grads, *qkv, gin);
            }
            Op::PrependRow { row, body, groups } => {
                let per = g.nrows() / groups - 1;
                if self.rg(*row) {
                    let mut gr = Mat::zeros((1, g.ncols()));
                    for gi in 0..*groups {
                        gr.row_mut(0).scaled_add(1.0, &g.row(gi * (per + 1)));
                    }
                    self.accumulate(grads, *row, gr);
                }
                if self.rg(*body) {
                    let mut gb = Mat::zeros((groups * per, g.ncols()));
                    for gi in 0..*groups {
                        let base = gi * (per + 1);
                        gb.slice_mut(s![gi * per..(gi + 1) * per, ..])
                            .assign(&g.slice(s![base + 1..base + 1 + per, ..]));
                    }
                    self.accumulate(grads, *body, gb);
                }
            }
            Op::GatherRows(x, rows) => {
                let mut gx = Mat::zeros(self.value(*x).raw_dim());
                for (gi, &r) in rows.iter().enumerate() {
                    gx.row_mut(r).scaled_add(1.0, &g.row(gi));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = g;
                for ((mut gr, yr), &n) in gx.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    let d = gr.dot(&yr);
                    Zip::from(&mut gr)
                        .and(&yr)
                        .for_each(|gv, &yv| *gv = (*gv - yv * d) / n);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let m = targets.len() as f64;
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[[i, t]] -= 1.0;
                }
                gl *= g[[0, 0]] / m;
                self.accumulate(grads, *logits, gl);
            }
            Op::SumAll(x) => {
                let gx = Mat::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                self.accumulate(grads, *x, gx);
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if c != 0.0 && self.rg(v) {
                        self.accumulate(grads, v, &g * c);
                    }
                }
            }
        }
    }
}

/// Standardizes each lane along `axis` in place; returns the inverse standard deviations.
fn standardize_lanes(value: &mut Mat, axis: Axis, eps: f64) -> Vec<f64> {
    let mut inv = Vec::new();
    for mut lane in value.lanes_mut(axis) {
        let n = lane.len() as f64;
        let mean = lane.sum() / n;
        let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        lane.mapv_inplace(|v| (v - mean) * is);
        inv.push(is);
    }
    inv
}

pub(crate) fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}
