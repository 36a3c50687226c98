//! Vector operations with two evaluators: [`Eval`] computes values directly,
//! [`Tape`] records them and back-propagates into [`Gradients`].

use std::sync::Arc;

use super::{Gradients, NeuralParameters, Param};

/// A dense row-major matrix that is not a parameter (e.g. the lexical bias table).
#[derive(Clone, Debug, PartialEq)]
pub struct ConstMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Arc<Vec<f64>>,
}

impl ConstMatrix {
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }
}

pub trait Exec {
    type V: Clone;

    fn params(&self) -> &NeuralParameters;
    fn val<'a>(&'a self, v: &'a Self::V) -> &'a [f64];

    fn constant(&mut self, v: Vec<f64>) -> Self::V;
    /// One row of a parameter matrix (embedding lookup).
    fn row(&mut self, p: Param, r: usize) -> Self::V;
    /// A whole parameter, flattened.
    fn param(&mut self, p: Param) -> Self::V;
    /// Parameter matrix times vector.
    fn matvec(&mut self, p: Param, x: &Self::V) -> Self::V;
    fn const_matvec(&mut self, m: &ConstMatrix, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn concat(&mut self, parts: &[Self::V]) -> Self::V;
    fn slice(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V;
    fn softmax(&mut self, a: &Self::V) -> Self::V;
    /// `Σ_j w_j · items_j`.
    fn weighted_sum(&mut self, w: &Self::V, items: &[Self::V]) -> Self::V;
    /// Elementwise `ln(a + eps)`.
    fn ln_eps(&mut self, a: &Self::V, eps: f64) -> Self::V;
    /// Elementwise `a · scale + shift` with scalar parameters.
    fn scalar_affine(&mut self, a: &Self::V, scale: Param, shift: Param) -> Self::V;
    /// `-ln Σ_{k ∈ subset} softmax(a)_k`, a one-element vector.
    fn neg_log_mass(&mut self, a: &Self::V, subset: &[usize]) -> Self::V;
    fn sum(&mut self, parts: &[Self::V]) -> Self::V;
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn param_matvec(params: &NeuralParameters, p: Param, x: &[f64]) -> Vec<f64> {
    let t = params.tensor(p);
    debug_assert_eq!(t.cols, x.len(), "{}", p.name());
    t.data.chunks_exact(t.cols).map(|row| dot(row, x)).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_sum_exp(a: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = a.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + a.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn neg_log_mass(a: &[f64], subset: &[usize]) -> f64 {
    log_sum_exp(a.iter().copied()) - log_sum_exp(subset.iter().map(|&k| a[k]))
}

/// Direct evaluation.
pub struct Eval<'p> {
    params: &'p NeuralParameters,
}

impl<'p> Eval<'p> {
    pub fn new(params: &'p NeuralParameters) -> Self {
        Eval { params }
    }
}

impl Exec for Eval<'_> {
    type V = Vec<f64>;

    fn params(&self) -> &NeuralParameters {
        self.params
    }

    fn val<'a>(&'a self, v: &'a Vec<f64>) -> &'a [f64] {
        v
    }

    fn constant(&mut self, v: Vec<f64>) -> Vec<f64> {
        v
    }

    fn row(&mut self, p: Param, r: usize) -> Vec<f64> {
        self.params.tensor(p).row(r).to_vec()
    }

    fn param(&mut self, p: Param) -> Vec<f64> {
        self.params.tensor(p).data.clone()
    }

    fn matvec(&mut self, p: Param, x: &Vec<f64>) -> Vec<f64> {
        param_matvec(self.params, p, x)
    }

    fn const_matvec(&mut self, m: &ConstMatrix, x: &Vec<f64>) -> Vec<f64> {
        m.matvec(x)
    }

    fn add(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    fn mul(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x * y).collect()
    }

    fn tanh(&mut self, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|v| v.tanh()).collect()
    }

    fn sigmoid(&mut self, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|&v| sigmoid(v)).collect()
    }

    fn concat(&mut self, parts: &[Vec<f64>]) -> Vec<f64> {
        parts.concat()
    }

    fn slice(&mut self, a: &Vec<f64>, start: usize, len: usize) -> Vec<f64> {
        a[start..start + len].to_vec()
    }

    fn softmax(&mut self, a: &Vec<f64>) -> Vec<f64> {
        softmax(a)
    }

    fn weighted_sum(&mut self, w: &Vec<f64>, items: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; items[0].len()];
        for (wj, h) in w.iter().zip(items) {
            for (o, v) in out.iter_mut().zip(h) {
                *o += wj * v;
            }
        }
        out
    }

    fn ln_eps(&mut self, a: &Vec<f64>, eps: f64) -> Vec<f64> {
        a.iter().map(|v| (v + eps).ln()).collect()
    }

    fn scalar_affine(&mut self, a: &Vec<f64>, scale: Param, shift: Param) -> Vec<f64> {
        let s = self.params.tensor(scale).data[0];
        let b = self.params.tensor(shift).data[0];
        a.iter().map(|v| v * s + b).collect()
    }

    fn neg_log_mass(&mut self, a: &Vec<f64>, subset: &[usize]) -> Vec<f64> {
        vec![neg_log_mass(a, subset)]
    }

    fn sum(&mut self, parts: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; parts[0].len()];
        for p in parts {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Row { p: Param, r: usize },
    Param { p: Param },
    MatVec { p: Param, x: usize },
    ConstMatVec { m: ConstMatrix, x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Concat { parts: Vec<usize> },
    Slice { a: usize, start: usize },
    Softmax { a: usize },
    WeightedSum { w: usize, items: Vec<usize> },
    LnEps { a: usize, eps: f64 },
    ScalarAffine { a: usize, scale: Param, shift: Param },
    NegLogMass { a: usize, subset: Vec<usize> },
    Sum { parts: Vec<usize> },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Reverse-mode tape. Node handles are indices.
pub struct Tape<'p> {
    params: &'p NeuralParameters,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p NeuralParameters) -> Self {
        Tape { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> usize {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Back-propagates from the scalar node `root` with seed 1.
    pub fn backward(&self, root: usize) -> Gradients {
        let mut grads = Gradients::zeros(self.params);
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root] = Some(vec![1.0; self.nodes[root].value.len()]);

        fn acc(adj: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
            adj[i].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=root).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Const => {}
                Op::Row { p, r } => {
                    let cols = self.params.tensor(*p).cols;
                    let g = &mut grads.tensors[p.index()][r * cols..(r + 1) * cols];
                    for (a, d) in g.iter_mut().zip(&dy) {
                        *a += d;
                    }
                }
                Op::Param { p } => {
                    for (a, d) in grads.tensors[p.index()].iter_mut().zip(&dy) {
                        *a += d;
                    }
                }
                Op::MatVec { p, x } => {
                    let t = self.params.tensor(*p);
                    let xv = &self.nodes[*x].value;
                    let g = &mut grads.tensors[p.index()];
                    for (r, &d) in dy.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        for (gw, &xc) in g[r * t.cols..(r + 1) * t.cols].iter_mut().zip(xv) {
                            *gw += d * xc;
                        }
                    }
                    let dx = acc(&mut adj, *x, t.cols);
                    for (r, &d) in dy.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        for (o, &w) in dx.iter_mut().zip(t.row(r)) {
                            *o += d * w;
                        }
                    }
                }
                Op::ConstMatVec { m, x } => {
                    let dx = acc(&mut adj, *x, m.cols);
                    for (r, &d) in dy.iter().enumerate() {
                        for (o, &w) in dx.iter_mut().zip(&m.data[r * m.cols..(r + 1) * m.cols]) {
                            *o += d * w;
                        }
                    }
                }
                Op::Add { a, b } => {
                    for k in [*a, *b] {
                        let da = acc(&mut adj, k, dy.len());
                        for (o, d) in da.iter_mut().zip(&dy) {
                            *o += d;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = acc(&mut adj, *a, dy.len());
                    for ((o, d), v) in da.iter_mut().zip(&dy).zip(bv) {
                        *o += d * v;
                    }
                    let db = acc(&mut adj, *b, dy.len());
                    for ((o, d), v) in db.iter_mut().zip(&dy).zip(av) {
                        *o += d * v;
                    }
                }
                Op::Tanh { a } => {
                    let da = acc(&mut adj, *a, dy.len());
                    for ((o, d), v) in da.iter_mut().zip(&dy).zip(y) {
                        *o += d * (1.0 - v * v);
                    }
                }
                Op::Sigmoid { a } => {
                    let da = acc(&mut adj, *a, dy.len());
                    for ((o, d), v) in da.iter_mut().zip(&dy).zip(y) {
                        *o += d * v * (1.0 - v);
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &k in parts {
                        let len = self.nodes[k].value.len();
                        let dk = acc(&mut adj, k, len);
                        for (o, d) in dk.iter_mut().zip(&dy[off..off + len]) {
                            *o += d;
                        }
                        off += len;
                    }
                }
                Op::Slice { a, start } => {
                    let len = self.nodes[*a].value.len();
                    let da = acc(&mut adj, *a, len);
                    for (o, d) in da[*start..*start + dy.len()].iter_mut().zip(&dy) {
                        *o += d;
                    }
                }
                Op::Softmax { a } => {
                    let inner = dot(&dy, y);
                    let da = acc(&mut adj, *a, dy.len());
                    for ((o, d), v) in da.iter_mut().zip(&dy).zip(y) {
                        *o += v * (d - inner);
                    }
                }
                Op::WeightedSum { w, items } => {
                    let wv = self.nodes[*w].value.clone();
                    let dw: Vec<f64> = items.iter().map(|&h| dot(&dy, &self.nodes[h].value)).collect();
                    let gw = acc(&mut adj, *w, wv.len());
                    for (o, d) in gw.iter_mut().zip(&dw) {
                        *o += d;
                    }
                    for (&h, &wj) in items.iter().zip(&wv) {
                        let dh = acc(&mut adj, h, dy.len());
                        for (o, d) in dh.iter_mut().zip(&dy) {
                            *o += wj * d;
                        }
                    }
                }
                Op::LnEps { a, eps } => {
                    let av = &self.nodes[*a].value;
                    let da = acc(&mut adj, *a, dy.len());
                    for ((o, d), v) in da.iter_mut().zip(&dy).zip(av) {
                        *o += d / (v + eps);
                    }
                }
                Op::ScalarAffine { a, scale, shift } => {
                    let av = &self.nodes[*a].value;
                    let s = self.params.tensor(*scale).data[0];
                    grads.tensors[scale.index()][0] += dot(&dy, av);
                    grads.tensors[shift.index()][0] += dy.iter().sum::<f64>();
                    let da = acc(&mut adj, *a, dy.len());
                    for (o, d) in da.iter_mut().zip(&dy) {
                        *o += d * s;
                    }
                }
                Op::NegLogMass { a, subset } => {
                    let av = &self.nodes[*a].value;
                    let full = softmax(av);
                    let sub_lse = log_sum_exp(subset.iter().map(|&k| av[k]));
                    let da = acc(&mut adj, *a, av.len());
                    for (o, p) in da.iter_mut().zip(&full) {
                        *o += dy[0] * p;
                    }
                    let mut seen = Vec::with_capacity(subset.len());
                    for &k in subset {
                        if seen.contains(&k) {
                            continue;
                        }
                        seen.push(k);
                        da[k] -= dy[0] * (av[k] - sub_lse).exp();
                    }
                }
                Op::Sum { parts } => {
                    for &k in parts {
                        let dk = acc(&mut adj, k, dy.len());
                        for (o, d) in dk.iter_mut().zip(&dy) {
                            *o += d;
                        }
                    }
                }
            }
        }
        grads
    }
}

impl Exec for Tape<'_> {
    type V = usize;

    fn params(&self) -> &NeuralParameters {
        self.params
    }

    fn val<'a>(&'a self, v: &'a usize) -> &'a [f64] {
        &self.nodes[*v].value
    }

    fn constant(&mut self, v: Vec<f64>) -> usize {
        self.push(v, Op::Const)
    }

    fn row(&mut self, p: Param, r: usize) -> usize {
        let v = self.params.tensor(p).row(r).to_vec();
        self.push(v, Op::Row { p, r })
    }

    fn param(&mut self, p: Param) -> usize {
        let v = self.params.tensor(p).data.clone();
        self.push(v, Op::Param { p })
    }

    fn matvec(&mut self, p: Param, x: &usize) -> usize {
        let v = param_matvec(self.params, p, &self.nodes[*x].value);
        self.push(v, Op::MatVec { p, x: *x })
    }

    fn const_matvec(&mut self, m: &ConstMatrix, x: &usize) -> usize {
        let v = m.matvec(&self.nodes[*x].value);
        self.push(v, Op::ConstMatVec { m: m.clone(), x: *x })
    }

    fn add(&mut self, a: &usize, b: &usize) -> usize {
        let v = self.nodes[*a].value.iter().zip(&self.nodes[*b].value).map(|(x, y)| x + y).collect();
        self.push(v, Op::Add { a: *a, b: *b })
    }

    fn mul(&mut self, a: &usize, b: &usize) -> usize {
        let v = self.nodes[*a].value.iter().zip(&self.nodes[*b].value).map(|(x, y)| x * y).collect();
        self.push(v, Op::Mul { a: *a, b: *b })
    }

    fn tanh(&mut self, a: &usize) -> usize {
        let v = self.nodes[*a].value.iter().map(|v| v.tanh()).collect();
        self.push(v, Op::Tanh { a: *a })
    }

    fn sigmoid(&mut self, a: &usize) -> usize {
        let v = self.nodes[*a].value.iter().map(|&v| sigmoid(v)).collect();
        self.push(v, Op::Sigmoid { a: *a })
    }

    fn concat(&mut self, parts: &[usize]) -> usize {
        let v = parts.iter().flat_map(|&k| self.nodes[k].value.iter().copied()).collect();
        self.push(v, Op::Concat { parts: parts.to_vec() })
    }

    fn slice(&mut self, a: &usize, start: usize, len: usize) -> usize {
        let v = self.nodes[*a].value[start..start + len].to_vec();
        self.push(v, Op::Slice { a: *a, start })
    }

    fn softmax(&mut self, a: &usize) -> usize {
        let v = softmax(&self.nodes[*a].value);
        self.push(v, Op::Softmax { a: *a })
    }

    fn weighted_sum(&mut self, w: &usize, items: &[usize]) -> usize {
        let wv = &self.nodes[*w].value;
        let mut out = vec![0.0; self.nodes[items[0]].value.len()];
        for (wj, &h) in wv.iter().zip(items) {
            for (o, v) in out.iter_mut().zip(&self.nodes[h].value) {
                *o += wj * v;
            }
        }
        self.push(out, Op::WeightedSum { w: *w, items: items.to_vec() })
    }

    fn ln_eps(&mut self, a: &usize, eps: f64) -> usize {
        let v = self.nodes[*a].value.iter().map(|v| (v + eps).ln()).collect();
        self.push(v, Op::LnEps { a: *a, eps })
    }

    fn scalar_affine(&mut self, a: &usize, scale: Param, shift: Param) -> usize {
        let s = self.params.tensor(scale).data[0];
        let b = self.params.tensor(shift).data[0];
        let v = self.nodes[*a].value.iter().map(|v| v * s + b).collect();
        self.push(v, Op::ScalarAffine { a: *a, scale, shift })
    }

    fn neg_log_mass(&mut self, a: &usize, subset: &[usize]) -> usize {
        let v = vec![neg_log_mass(&self.nodes[*a].value, subset)];
        self.push(v, Op::NegLogMass { a: *a, subset: subset.to_vec() })
    }

    fn sum(&mut self, parts: &[usize]) -> usize {
        let mut out = vec![0.0; self.nodes[parts[0]].value.len()];
        for &p in parts {
            for (o, v) in out.iter_mut().zip(&self.nodes[p].value) {
                *o += v;
            }
        }
        self.push(out, Op::Sum { parts: parts.to_vec() })
    }
}
