//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices in `f64`.
//!
//! A [`Graph`] is built eagerly: every operation computes its value when it
//! is recorded, and [`Graph::backward`] walks the tape in reverse. Learnable
//! parameters enter the graph through [`Graph::param`], which records the
//! owning [`ParamId`] so gradients can be scattered back into a flat buffer.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Dense row-major matrix. Vectors are `1 × n`, scalars `1 × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NO_SOURCE: u32 = u32::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    Gather { x: Var, map: Vec<u32> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MaxRows { x: Var, argmax: Vec<usize> },
    MeanRows(Var),
    SmoothL1 { pred: Var, target: Var, beta: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Tape of recorded operations.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: &'p ParamStore,
    trainable: Option<&'p [bool]>,
    bound: Vec<Option<Var>>,
}

/// Gradients of the leaves with respect to one scalar output.
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node_grads[v.0].as_ref()
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// `out += a · b` for row-major slices.
fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
fn matmul_nt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<'p> Graph<'p> {
    /// A graph in which every parameter bound via [`Graph::param`] is tracked
    /// when `trainable` is `None`, or only those flagged `true` otherwise.
    pub fn new(store: &'p ParamStore, trainable: Option<&'p [bool]>) -> Self {
        Self { nodes: Vec::new(), store, trainable, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Copies the current value of `v` into a fresh leaf, cutting the
    /// gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Binds a parameter. Repeated binds of the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let t = self.store.tensor(id);
        let tracked = self.trainable.map_or(true, |m| m[id.index()]);
        let v = self.push(t, Op::Leaf);
        if tracked {
            self.nodes[v.0].param = Some(id);
        }
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, &self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.push(Tensor::from_vec(m, n, out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(&mut out, &self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.push(Tensor::from_vec(m, n, out), Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> =
            self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        Ok(self.push(Tensor::from_vec(r, c, out), Op::Add(a, b)))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape(format!("add_row {r}x{c} + {:?}", self.shape(row))));
        }
        let rv = &self.value(row).data;
        let out: Vec<f64> =
            self.value(a).data.iter().enumerate().map(|(i, x)| x + rv[i % c]).collect();
        Ok(self.push(Tensor::from_vec(r, c, out), Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("mul {:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> =
            self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let (r, c) = self.shape(a);
        Ok(self.push(Tensor::from_vec(r, c, out), Op::Mul(a, b)))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape(format!("mul_row {r}x{c} * {:?}", self.shape(row))));
        }
        let rv = &self.value(row).data;
        let out: Vec<f64> =
            self.value(a).data.iter().enumerate().map(|(i, x)| x * rv[i % c]).collect();
        Ok(self.push(Tensor::from_vec(r, c, out), Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = &self.value(a);
        let out = Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|x| x * s).collect());
        self.push(out, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = &self.value(a);
        let out = Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|&x| gelu(x)).collect());
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let out = Tensor::from_vec(r, c, xhat.clone());
        self.push(out, Op::LayerNorm { x, xhat, inv_std })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        self.push(Tensor::from_vec(r, c, out), Op::SoftmaxRows(x))
    }

    /// General index map: `out.data[k] = x.data[map[k]]`, or zero where the
    /// map holds `None`. Covers row/column selection, transposition and
    /// zero padding.
    pub fn gather(&mut self, x: Var, rows: usize, cols: usize, map: Vec<Option<usize>>) -> Result<Var> {
        if map.len() != rows * cols {
            return Err(Error::Shape(format!("gather map of {} for {rows}x{cols}", map.len())));
        }
        let src = self.value(x);
        let n = src.len();
        let mut out = vec![0.0; rows * cols];
        let mut packed = Vec::with_capacity(map.len());
        for (k, m) in map.into_iter().enumerate() {
            match m {
                Some(i) if i < n => {
                    out[k] = src.data[i];
                    packed.push(i as u32);
                }
                Some(i) => {
                    return Err(Error::Shape(format!("gather index {i} out of {n}")));
                }
                None => packed.push(NO_SOURCE),
            }
        }
        Ok(self.push(Tensor::from_vec(rows, cols, out), Op::Gather { x, map: packed }))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row {bad} out of {r}")));
        }
        let map = idx.iter().flat_map(|&i| (0..c).map(move |j| Some(i * c + j))).collect();
        self.gather(x, idx.len(), c, map)
    }

    pub fn select_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::Shape(format!("cols {start}..{} out of {c}", start + len)));
        }
        let map = (0..r).flat_map(|i| (0..len).map(move |j| Some(i * c + start + j))).collect();
        self.gather(x, r, len, map)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let map = (0..c).flat_map(|j| (0..r).map(move |i| Some(i * c + j))).collect();
        self.gather(x, c, r, map).expect("transpose map is well-formed")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != c {
                return Err(Error::Shape(format!("concat_rows width {} vs {c}", t.cols)));
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        Ok(self.push(Tensor::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::Shape(format!("concat_cols height {pr} vs {r}")));
            }
            cols += pc;
        }
        let mut data = vec![0.0; r * cols];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..r {
                data[i * cols + off..i * cols + off + t.cols].copy_from_slice(t.row(i));
            }
            off += t.cols;
        }
        Ok(self.push(Tensor::from_vec(r, cols, data), Op::ConcatCols(parts.to_vec())))
    }

    /// Column-wise maximum over rows, `r × c → 1 × c`. Ties route the
    /// gradient to the lowest row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0; c];
        for i in 0..r {
            for j in 0..c {
                let v = t.at(i, j);
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        self.push(Tensor::row_vector(out), Op::MaxRows { x, argmax })
    }

    /// Column-wise mean over rows, `r × c → 1 × c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::row_vector(out), Op::MeanRows(x))
    }

    /// Mean smooth-L1 (Huber with threshold `beta`) between equal-shape
    /// tensors.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Shape(format!(
                "smooth_l1 {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let v = crate::jepa::loss::smooth_l1_value(&self.value(pred).data, &self.value(target).data, beta)?;
        Ok(self.push(Tensor::scalar(v), Op::SmoothL1 { pred, target, beta }))
    }

    /// Mean softmax cross-entropy of `N × K` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = t.shape();
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            if labels[i] >= k {
                return Err(Error::Shape(format!("label {} with {k} classes", labels[i])));
            }
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let v = loss / n as f64;
        Ok(self.push(Tensor::scalar(v), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// `Σ wᵢ·sᵢ` over `1 × 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut v = 0.0;
        for &(t, w) in terms {
            if self.shape(t) != (1, 1) {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
            v += w * self.value(t).item();
        }
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = &node.value;
            match &node.op {
                Op::Leaf => grads[idx] = Some(gout),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = av.shape();
                    let n = bv.cols;
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(&mut ga, &gout.data, &bv.data, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(&mut gb, &av.data, &gout.data, m, k, n);
                    acc(&mut grads, *a, Tensor::from_vec(m, k, ga));
                    acc(&mut grads, *b, Tensor::from_vec(k, n, gb));
                }
                Op::MatMulNT(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = av.shape();
                    let n = bv.rows;
                    let mut ga = vec![0.0; m * k];
                    matmul_into(&mut ga, &gout.data, &bv.data, m, n, k);
                    let mut gb = vec![0.0; n * k];
                    matmul_tn_into(&mut gb, &gout.data, &av.data, m, n, k);
                    acc(&mut grads, *a, Tensor::from_vec(m, k, ga));
                    acc(&mut grads, *b, Tensor::from_vec(n, k, gb));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout);
                }
                Op::AddRow(a, row) => {
                    let c = gout.cols;
                    let mut gr = vec![0.0; c];
                    for (i, g) in gout.data.iter().enumerate() {
                        gr[i % c] += g;
                    }
                    acc(&mut grads, *row, Tensor::row_vector(gr));
                    acc(&mut grads, *a, gout);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga: Vec<f64> = gout.data.iter().zip(&bv.data).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = gout.data.iter().zip(&av.data).map(|(g, x)| g * x).collect();
                    acc(&mut grads, *a, Tensor::from_vec(gout.rows, gout.cols, ga));
                    acc(&mut grads, *b, Tensor::from_vec(gout.rows, gout.cols, gb));
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    let rv = &self.value(*row).data;
                    let c = gout.cols;
                    let mut gr = vec![0.0; c];
                    let mut ga = vec![0.0; gout.len()];
                    for (i, g) in gout.data.iter().enumerate() {
                        gr[i % c] += g * av.data[i];
                        ga[i] = g * rv[i % c];
                    }
                    acc(&mut grads, *a, Tensor::from_vec(gout.rows, c, ga));
                    acc(&mut grads, *row, Tensor::row_vector(gr));
                }
                Op::Scale(a, s) => {
                    let g: Vec<f64> = gout.data.iter().map(|g| g * s).collect();
                    acc(&mut grads, *a, Tensor::from_vec(gout.rows, gout.cols, g));
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let g: Vec<f64> =
                        gout.data.iter().zip(&av.data).map(|(g, &x)| g * gelu_grad(x)).collect();
                    acc(&mut grads, *a, Tensor::from_vec(gout.rows, gout.cols, g));
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let (r, c) = gout.shape();
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        let dy = gout.row(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mean_dy = dy.iter().sum::<f64>() / c as f64;
                        let mean_dyx = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            g[i * c + j] = inv_std[i] * (dy[j] - mean_dy - xh[j] * mean_dyx);
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(r, c, g));
                }
                Op::SoftmaxRows(x) => {
                    let (r, c) = gout.shape();
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        let y = val.row(i);
                        let dy = gout.row(i);
                        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] = y[j] * (dy[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(r, c, g));
                }
                Op::Gather { x, map } => {
                    let xv = self.value(*x);
                    let mut g = vec![0.0; xv.len()];
                    for (k, &m) in map.iter().enumerate() {
                        if m != NO_SOURCE {
                            g[m as usize] += gout.data[k];
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(xv.rows, xv.cols, g));
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let g = gout.data[off..off + r * c].to_vec();
                        off += r * c;
                        acc(&mut grads, *p, Tensor::from_vec(r, c, g));
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = gout.cols;
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let mut g = Vec::with_capacity(r * c);
                        for i in 0..r {
                            g.extend_from_slice(&gout.data[i * total + off..i * total + off + c]);
                        }
                        off += c;
                        acc(&mut grads, *p, Tensor::from_vec(r, c, g));
                    }
                }
                Op::MaxRows { x, argmax } => {
                    let (r, c) = self.shape(*x);
                    let mut g = vec![0.0; r * c];
                    for (j, &i) in argmax.iter().enumerate() {
                        g[i * c + j] += gout.data[j];
                    }
                    acc(&mut grads, *x, Tensor::from_vec(r, c, g));
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.shape(*x);
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = gout.data[j] / r as f64;
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(r, c, g));
                }
                Op::SmoothL1 { pred, target, beta } => {
                    let pv = self.value(*pred);
                    let tv = self.value(*target);
                    let n = pv.len() as f64;
                    let s = gout.item() / n;
                    let gp: Vec<f64> = pv
                        .data
                        .iter()
                        .zip(&tv.data)
                        .map(|(p, t)| {
                            let e = p - t;
                            let d = if e.abs() < *beta { e / beta } else { e.signum() };
                            d * s
                        })
                        .collect();
                    let gt: Vec<f64> = gp.iter().map(|g| -g).collect();
                    acc(&mut grads, *pred, Tensor::from_vec(pv.rows, pv.cols, gp));
                    acc(&mut grads, *target, Tensor::from_vec(pv.rows, pv.cols, gt));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let (n, k) = self.shape(*logits);
                    let s = gout.item() / n as f64;
                    let mut g = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        g[i * k + l] -= 1.0;
                    }
                    for v in &mut g {
                        *v *= s;
                    }
                    acc(&mut grads, *logits, Tensor::from_vec(n, k, g));
                }
                Op::WeightedSum(terms) => {
                    let go = gout.item();
                    for &(t, w) in terms {
                        acc(&mut grads, t, Tensor::scalar(go * w));
                    }
                }
            }
        }
        Gradients { node_grads: grads }
    }

    /// Scatters parameter gradients into `flat`, laid out as in the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, flat: &mut [f64], weight: f64) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.node_grads[i].as_ref()) {
                let off = self.store.offset(id);
                for (dst, src) in flat[off..off + g.len()].iter_mut().zip(&g.data) {
                    *dst += weight * src;
                }
            }
        }
    }

    /// Per-parameter gradients of `output`, laid out as in the store.
    pub fn param_gradients(&self, output: Var) -> Vec<f64> {
        let grads = self.backward(output);
        let mut flat = vec![0.0; self.store.num_scalars()];
        self.accumulate_param_grads(&grads, &mut flat, 1.0);
        flat
    }
}
