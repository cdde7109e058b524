//! A small reverse-mode tape over 2-D matrices.
//!
//! Each forward op appends a node holding its value and whatever the backward
//! pass needs. Parameters are referenced from a [`ParamStore`] rather than
//! copied into the tape.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{sc, Matrix, Scalar};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// A copy without the parameters whose name starts with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> Self {
        let mut out = ParamStore::new();
        for (name, value) in self.iter() {
            if !name.starts_with(prefix) {
                out.insert(name, value.clone()).expect("names are unique");
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, value) in self.iter() {
            out.insert(name, value.cast()).expect("names are unique");
        }
        out
    }
}

/// Parameter gradients, indexed like the store they were computed against.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(len: usize) -> Self {
        Gradients { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, other: Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::all_finite)
    }

    fn add(&mut self, id: ParamId, g: Matrix<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Matrix<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    SparseMatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, lengths: Vec<usize>, max_len: usize, heads: usize, probs: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    SegmentMean { x: Var, lengths: Vec<usize>, max_len: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix<T>, norm: T },
    BceLogits { logits: Var, targets: Vec<T>, norm: T },
    Huber { pred: Var, target: Matrix<T>, delta: T, norm: T },
    SquaredError { pred: Var, target: Matrix<T>, norm: T },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = sc::<T>(GELU_C) * (x + sc::<T>(GELU_A) * x * x * x);
    sc::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = sc::<T>(GELU_C) * (x + sc::<T>(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = sc::<T>(GELU_C) * (T::one() + sc::<T>(3.0 * GELU_A) * x * x);
    sc::<T>(0.5) * (T::one() + t) + sc::<T>(0.5) * x * (T::one() - t * t) * du
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn cmp_slices<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · b` where `a` is a sparse constant (selectors, bin weights).
    pub fn sparse_matmul(&mut self, a: Var, b: Var) -> Var {
        debug_assert!(!self.rg(a), "sparse_matmul expects a constant left operand");
        let out = self.value(a).sparse_matmul(self.value(b));
        let rg = self.rg(b);
        self.push(out, Op::SparseMatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1 x d` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a single row");
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        let dn = sc::<T>(d as f64);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + sc(LN_EPS)).sqrt();
            for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, true)
    }

    /// Multi-head scaled dot-product self-attention over a padded batch laid
    /// out as `batch * max_len` rows. Keys at padding positions are excluded.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        lengths: &[usize],
        max_len: usize,
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        assert_eq!(rows, lengths.len() * max_len, "attention batch layout");
        assert_eq!(d % heads, 0, "hidden size divisible by heads");
        let dh = d / heads;
        let scale = T::one() / sc::<T>(dh as f64).sqrt();
        let mut out = Matrix::zeros(rows, d);
        let mut probs = vec![T::zero(); lengths.len() * heads * max_len * max_len];
        let mut scores = Vec::with_capacity(max_len);
        let mut order: Vec<usize> = Vec::with_capacity(max_len);
        for (b, &len) in lengths.iter().enumerate() {
            let base = b * max_len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..max_len {
                    if len == 0 {
                        continue;
                    }
                    let qi = &qv.row(base + i)[cols.clone()];
                    scores.clear();
                    for j in 0..len {
                        let kj = &kv.row(base + j)[cols.clone()];
                        let s: T = qi.iter().zip(kj).map(|(&a, &c)| a * c).fold(T::zero(), |acc, x| acc + x);
                        scores.push(s * scale);
                    }
                    // Sum in a content-defined order so that permuting the
                    // row's tokens permutes the output bit-exactly.
                    order.clear();
                    order.extend(0..len);
                    order.sort_by(|&x, &y| {
                        scores[x].partial_cmp(&scores[y]).unwrap_or(Ordering::Equal).then_with(|| {
                            cmp_slices(&vv.row(base + x)[cols.clone()], &vv.row(base + y)[cols.clone()])
                        })
                    });
                    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    let pbase = ((b * heads + h) * max_len + i) * max_len;
                    let mut z = T::zero();
                    for &j in &order {
                        let e = (scores[j] - m).exp();
                        probs[pbase + j] = e;
                        z += e;
                    }
                    let orow = &mut out.row_mut(base + i)[cols.clone()];
                    for &j in &order {
                        let p = probs[pbase + j] / z;
                        probs[pbase + j] = p;
                        for (o, &vj) in orow.iter_mut().zip(&vv.row(base + j)[cols.clone()]) {
                            *o += p * vj;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention { q, k, v, lengths: lengths.to_vec(), max_len, heads, probs },
            rg,
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = sc::<T>(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.data().len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data);
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(idx.len(), xv.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start <= end && end <= xv.cols(), "column slice out of range");
        let mut out = Matrix::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    /// Mean over the valid positions of each padded row group.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize], max_len: usize) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Matrix::zeros(lengths.len(), d);
        for (b, &len) in lengths.iter().enumerate() {
            if len == 0 {
                continue;
            }
            let inv = T::one() / sc::<T>(len as f64);
            let orow = out.row_mut(b);
            for i in 0..len {
                for (o, &v) in orow.iter_mut().zip(xv.row(b * max_len + i)) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SegmentMean { x, lengths: lengths.to_vec(), max_len }, rg)
    }

    /// Sum of per-row softmax cross-entropies divided by `norm`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], norm: T) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[t];
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        self.push(
            Matrix::scalar(total / norm),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, norm },
            rg,
        )
    }

    /// Binary cross-entropy of sigmoid(logits) against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], norm: T) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), (targets.len(), 1), "bce expects a column of logits");
        let total: T =
            lv.data().iter().zip(targets).map(|(&z, &t)| softplus(z) - z * t).sum();
        let rg = self.rg(logits);
        self.push(Matrix::scalar(total / norm), Op::BceLogits { logits, targets: targets.to_vec(), norm }, rg)
    }

    pub fn huber(&mut self, pred: Var, target: Matrix<T>, delta: T, norm: T) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "huber shapes");
        let half = sc::<T>(0.5);
        let total: T = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let r = (p - t).abs();
                if r <= delta {
                    half * r * r
                } else {
                    delta * (r - half * delta)
                }
            })
            .sum();
        let rg = self.rg(pred);
        self.push(Matrix::scalar(total / norm), Op::Huber { pred, target, delta, norm }, rg)
    }

    pub fn squared_error(&mut self, pred: Var, target: Matrix<T>, norm: T) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "squared error shapes");
        let total: T = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let rg = self.rg(pred);
        self.push(Matrix::scalar(total / norm), Op::SquaredError { pred, target, norm }, rg)
    }

    /// `Σ wᵢ·xᵢ` over `1 x 1` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            total += w * self.value(v).item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Matrix::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape("backward requires a scalar output"));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::empty(self.params.len());
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        out.add(id, g);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul_t(self.value(*b));
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t_matmul(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::SparseMatMul(a, b) => {
                    let gb = self.value(*a).sparse_t_matmul(&g);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.rg(*bias) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *bias, gb);
                    }
                    if self.rg(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = g.data().iter().zip(xv.data()).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                    acc(&mut grads, *x, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (n, d) = g.shape();
                    let gv = self.value(*gamma);
                    let mut dgamma = Matrix::zeros(1, d);
                    let mut dbeta = Matrix::zeros(1, d);
                    let mut dx = Matrix::zeros(n, d);
                    let dn = sc::<T>(d as f64);
                    for r in 0..n {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_h = T::zero();
                        for c in 0..d {
                            dgamma.data_mut()[c] += gr[c] * hr[c];
                            dbeta.data_mut()[c] += gr[c];
                            let dxh = gr[c] * gv.data()[c];
                            sum_dxh += dxh;
                            sum_dxh_h += dxh * hr[c];
                        }
                        let m1 = sum_dxh / dn;
                        let m2 = sum_dxh_h / dn;
                        let dr = dx.row_mut(r);
                        for c in 0..d {
                            let dxh = gr[c] * gv.data()[c];
                            dr[c] = rstd[r] * (dxh - m1 - hr[c] * m2);
                        }
                    }
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                    if self.rg(*x) {
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Attention { q, k, v, lengths, max_len, heads, probs } => {
                    let (dq, dk, dv) = self.attention_backward(&g, *q, *k, *v, lengths, *max_len, *heads, probs);
                    if self.rg(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.rg(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.rg(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    acc(&mut grads, *x, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for (o, &r) in idx.iter().enumerate() {
                        for (a, &b) in gx.row_mut(r).iter_mut().zip(g.row(o)) {
                            *a += b;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SegmentMean { x, lengths, max_len } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for (b, &len) in lengths.iter().enumerate() {
                        if len == 0 {
                            continue;
                        }
                        let inv = T::one() / sc::<T>(len as f64);
                        for i in 0..len {
                            for (a, &gv) in gx.row_mut(b * max_len + i).iter_mut().zip(g.row(b)) {
                                *a = gv * inv;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, targets, probs, norm } => {
                    let s = g.item() / *norm;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = gl.row_mut(r);
                        row[t] -= T::one();
                        for v in row.iter_mut() {
                            *v *= s;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::BceLogits { logits, targets, norm } => {
                    let s = g.item() / *norm;
                    let lv = self.value(*logits);
                    let data = lv.data().iter().zip(targets).map(|(&z, &t)| (sigmoid(z) - t) * s).collect();
                    acc(&mut grads, *logits, Matrix::from_vec(lv.rows(), 1, data));
                }
                Op::Huber { pred, target, delta, norm } => {
                    let s = g.item() / *norm;
                    let pv = self.value(*pred);
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| (p - t).max(-*delta).min(*delta) * s)
                        .collect();
                    acc(&mut grads, *pred, Matrix::from_vec(pv.rows(), pv.cols(), data));
                }
                Op::SquaredError { pred, target, norm } => {
                    let s = sc::<T>(2.0) * g.item() / *norm;
                    let pv = self.value(*pred);
                    let data = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * s).collect();
                    acc(&mut grads, *pred, Matrix::from_vec(pv.rows(), pv.cols(), data));
                }
                Op::WeightedSum(terms) => {
                    let gs = g.item();
                    for &(v, w) in terms {
                        if self.rg(v) {
                            acc(&mut grads, v, Matrix::scalar(gs * w));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Matrix<T>,
        q: Var,
        k: Var,
        v: Var,
        lengths: &[usize],
        max_len: usize,
        heads: usize,
        probs: &[T],
    ) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        let dh = d / heads;
        let scale = T::one() / sc::<T>(dh as f64).sqrt();
        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        let mut dp = vec![T::zero(); max_len];
        for (b, &len) in lengths.iter().enumerate() {
            let base = b * max_len;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..max_len {
                    if len == 0 {
                        continue;
                    }
                    let pbase = ((b * heads + h) * max_len + i) * max_len;
                    let go = &g.row(base + i)[c0..c0 + dh];
                    let mut dot = T::zero();
                    for j in 0..len {
                        let p = probs[pbase + j];
                        let vj = &vv.row(base + j)[c0..c0 + dh];
                        dp[j] = go.iter().zip(vj).map(|(&a, &c)| a * c).fold(T::zero(), |s, x| s + x);
                        dot += p * dp[j];
                        for (o, &gv) in dv.row_mut(base + j)[c0..c0 + dh].iter_mut().zip(go) {
                            *o += p * gv;
                        }
                    }
                    for j in 0..len {
                        let ds = probs[pbase + j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for c in c0..c0 + dh {
                            let kjc = kv.get(base + j, c);
                            let qic = qv.get(base + i, c);
                            dq.data_mut()[(base + i) * d + c] += ds * kjc;
                            dk.data_mut()[(base + j) * d + c] += ds * qic;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub entries: usize,
}

/// Below this magnitude gradients are compared on an absolute scale.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-4;

/// Compares the gradients of the scalar built by `build` with central
/// finite differences of step `h` over every parameter entry. Relative
/// error is `|a - n| / max(|a|, |n|, GRADIENT_CHECK_FLOOR)`.
pub fn gradient_check<F>(store: &ParamStore<f64>, h: f64, build: F) -> Result<GradientCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let l = build(&mut g);
        g.value(l).item()
    };
    let mut work = store.clone();
    let mut report = GradientCheck { max_relative_error: 0.0, worst: (String::new(), 0), entries: 0 };
    for id in store.ids() {
        for e in 0..store.get(id).data().len() {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + h;
            let lp = eval(&work);
            work.get_mut(id).data_mut()[e] = orig - h;
            let lm = eval(&work);
            work.get_mut(id).data_mut()[e] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = grads.get(id).map_or(0.0, |m| m.data()[e]);
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(GRADIENT_CHECK_FLOOR);
            report.entries += 1;
            if !(rel <= report.max_relative_error) {
                report.max_relative_error = rel;
                report.worst = (store.name(id).to_string(), e);
            }
        }
    }
    Ok(report)
}

fn acc<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(a) => a.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
