//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node. Nodes built only from
//! constants never receive gradients, and [`Graph::detach`] copies a value
//! into a fresh constant, which is how stop-gradient is expressed.

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Below this row norm, [`Graph::normalize_rows`] falls back to `e_0`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Silu(Var),
    Tanh(Var),
    Softplus(Var),
    Softmax(Var),
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: if needs_grad { op } else { Op::Leaf }, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on non-scalar node");
        t.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Stop-gradient: same value, no path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects a 1x{} row", av.cols());
        let mut t = av.clone();
        let n = av.cols();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, r) in chunk.iter_mut().zip(rv.data()) {
                *x += r;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(t, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// `a * s` where `s` is a `1×1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let t = self.value(a).scale(sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(t, Op::ScaleBy(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(silu);
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(t, Op::Softplus(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.cols();
        let mut t = src.clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = if x.is_finite() { (*x - m).exp() } else { 0.0 };
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, `1 × cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(t, Op::MeanRows(a), ng)
    }

    /// Frobenius inner product, `1×1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(t, Op::SliceRows(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let rows: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let t = Tensor::from_rows(&rows);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows of `table` at `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let rows: Vec<Tensor> = idx.iter().map(|&i| tv.row_tensor(i)).collect();
        let t = if rows.is_empty() { Tensor::zeros(0, tv.cols()) } else { Tensor::from_rows(&rows) };
        let ng = self.ng(table);
        self.push(t, Op::Gather(table, idx.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a).clone().reshape(rows, cols);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Scales each row to unit L2 norm. Rows with norm below [`NORM_EPS`]
    /// become `e_0` and pass no gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.cols();
        let mut t = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for row in t.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                row.iter_mut().for_each(|x| *x = 0.0);
                row[0] = 1.0;
                norms.push(0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= norm);
                norms.push(norm);
            }
        }
        let ng = self.ng(a);
        self.push(t, Op::NormalizeRows(a, norms), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_nt(val(*b)));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul(val(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.matmul_tn(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    acc(*row, g.mean_rows().scale(g.rows() as f64));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::ScaleBy(a, s) => {
                let sv = val(*s).data()[0];
                if self.ng(*a) {
                    acc(*a, g.scale(sv));
                }
                if self.ng(*s) {
                    acc(*s, Tensor::scalar(g.dot(val(*a))));
                }
            }
            Op::Silu(a) => acc(
                *a,
                g.zip_map(val(*a), |gy, x| {
                    let s = sigmoid(x);
                    gy * (s + x * s * (1.0 - s))
                }),
            ),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gy, y| gy * (1.0 - y * y))),
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |gy, x| gy * sigmoid(x))),
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut out = Tensor::zeros(y.rows(), n);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        out.set(r, c, yr[c] * (gr[c] - s));
                    }
                }
                acc(*a, out);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                let inv = 1.0 / r as f64;
                for chunk in out.data_mut().chunks_mut(c) {
                    for (o, x) in chunk.iter_mut().zip(g.data()) {
                        *o = x * inv;
                    }
                }
                acc(*a, out);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                out.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, out);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).rows();
                    if self.ng(p) {
                        acc(p, g.slice_rows(offset, n));
                    }
                    offset += n;
                }
            }
            Op::Gather(table, idx) => {
                let (r, c) = val(*table).shape();
                let mut out = Tensor::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        out.data_mut()[i * c + j] += g.get(k, j);
                    }
                }
                acc(*table, out);
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, g.clone().reshape(r, c));
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let n = y.cols();
                let mut out = Tensor::zeros(y.rows(), n);
                for (r, &norm) in norms.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        out.set(r, c, (gr[c] - yr[c] * s) / norm);
                    }
                }
                acc(*a, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` at `x`.
    fn fd_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check(x: Tensor, build: fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let loss = build(&mut g, v);
        let grads = g.backward(loss);
        let got = grads.get_or_zeros(v, x.shape());
        let want = fd_grad(&x, &|t| {
            let mut g = Graph::new();
            let v = g.variable(t.clone());
            let l = build(&mut g, v);
            g.scalar(l)
        });
        let scale = want.norm().max(1e-8);
        assert!(got.sub(&want).norm() / scale < 1e-6, "got {got:?} want {want:?}");
    }

    fn sample(r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|i| ((i as f64) * 0.7).sin() + 0.1 * i as f64).collect())
    }

    #[test]
    fn grad_matmul_chain() {
        check(sample(3, 4), |g, x| {
            let w = g.constant(sample(4, 2));
            let y = g.matmul(x, w);
            let y = g.tanh(y);
            let z = g.matmul_nt(y, y);
            g.sum(z)
        });
    }

    #[test]
    fn grad_softmax_and_silu() {
        check(sample(2, 5), |g, x| {
            let s = g.softmax_rows(x);
            let w = g.constant(sample(2, 5));
            let m = g.mul(s, w);
            let a = g.silu(m);
            g.sum(a)
        });
    }

    #[test]
    fn grad_normalize_and_dot() {
        check(sample(1, 4), |g, x| {
            let n = g.normalize_rows(x);
            let c = g.constant(Tensor::row_vector(vec![0.3, -1.0, 0.5, 0.2]));
            g.dot(n, c)
        });
    }

    #[test]
    fn grad_structural_ops() {
        check(sample(4, 3), |g, x| {
            let a = g.slice_rows(x, 1, 2);
            let b = g.gather_rows(x, &[0, 0, 3]);
            let c = g.concat_rows(&[a, b]);
            let r = g.reshape(c, 3, 5);
            let t = g.transpose(r);
            let m = g.mean_rows(t);
            let row = g.slice_rows(x, 0, 1);
            let row = g.reshape(row, 1, 3);
            let q = g.add_row(m, row);
            let q = g.softplus(q);
            let s = g.slice_rows(x, 2, 1);
            let s = g_scalar(g, s);
            let q = g.scale_by(q, s);
            g.sum(q)
        });

        fn g_scalar(g: &mut Graph, row: Var) -> Var {
            let s = g.sum(row);
            g.scale(s, 0.5)
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.mul(x, x);
        let d = g.detach(y);
        let z = g.mul(d, x);
        let grads = g.backward(z);
        // d/dx (sg(x²)·x) = x² = 4
        assert_eq!(grads.get(x).unwrap().data()[0], 4.0);
    }

    #[test]
    fn normalize_guard_returns_basis() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(1, 3));
        let n = g.normalize_rows(x);
        assert_eq!(g.value(n).data(), &[1.0, 0.0, 0.0]);
        let s = g.sum(n);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
