//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it executes. Row-wise operations
//! (softmax, layer norm, bias adds) treat a tensor as a `[rows, cols]` matrix
//! whose columns are the trailing axis.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row gather: output row `i` is `Σ w · input[idx]` over the CSR
/// entries of row `i`. Covers im2col, resampling and broadcast expansion.
#[derive(Debug, Clone)]
pub struct RowMap {
    pub in_rows: usize,
    offsets: Vec<usize>,
    idx: Vec<usize>,
    w: Vec<f64>,
}

impl RowMap {
    pub fn builder(in_rows: usize) -> RowMapBuilder {
        RowMapBuilder {
            map: RowMap {
                in_rows,
                offsets: vec![0],
                idx: Vec::new(),
                w: Vec::new(),
            },
        }
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.idx[a..b].iter().copied().zip(self.w[a..b].iter().copied())
    }

    /// Apply to a plain `[in_rows, cols]` buffer.
    pub fn apply(&self, input: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_rows() * cols];
        for i in 0..self.out_rows() {
            let dst = &mut out[i * cols..(i + 1) * cols];
            for (j, w) in self.row(i) {
                let src = &input[j * cols..(j + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

pub struct RowMapBuilder {
    map: RowMap,
}

impl RowMapBuilder {
    pub fn push(&mut self, input_row: usize, weight: f64) {
        debug_assert!(input_row < self.map.in_rows);
        self.map.idx.push(input_row);
        self.map.w.push(weight);
    }

    pub fn end_row(&mut self) {
        self.map.offsets.push(self.map.idx.len());
    }

    pub fn finish(self) -> RowMap {
        self.map
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Rc<Vec<f64>>),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Gather(Var, Rc<RowMap>),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Custom { x: Var, grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, Var>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place row softmax with max subtraction.
pub fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            grad_enabled: true,
        }
    }

    /// A graph whose leaves never require gradients (inference).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf. The same name maps to the same node for the lifetime
    /// of the graph.
    pub fn param(&self, name: &str, t: &Tensor) -> Var {
        if let Some(v) = self.params.borrow().get(name) {
            return *v;
        }
        let v = self.push(t.clone(), Op::Leaf, self.grad_enabled);
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Leaf holding the same value as `v`, cut from the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param_vars(&self) -> BTreeMap<String, Var> {
        self.params.borrow().clone()
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |p, q| p + q);
        self.push(t, Op::Add(a, b), self.rg(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |p, q| p - q);
        self.push(t, Op::Sub(a, b), self.rg(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |p, q| p * q);
        self.push(t, Op::Mul(a, b), self.rg(&[a, b]))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |v| v * s);
        self.push(t, Op::Scale(a, s), self.rg(&[a]))
    }

    /// `x[r, c] + b[c]`.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
            let c = xv.cols();
            assert_eq!(bv.numel(), c, "row bias length {} vs {} columns", bv.numel(), c);
            let mut data = xv.data().to_vec();
            for row in data.chunks_mut(c) {
                for (v, bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
            Tensor::new(xv.shape().to_vec(), data)
        };
        self.push(t, Op::AddRow(x, b), self.rg(&[x, b]))
    }

    /// `x[r, c] * g[c]`.
    pub fn mul_row(&self, x: Var, g: Var) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let (xv, gv) = (&nodes[x.0].value, &nodes[g.0].value);
            let c = xv.cols();
            assert_eq!(gv.numel(), c);
            let mut data = xv.data().to_vec();
            for row in data.chunks_mut(c) {
                for (v, gg) in row.iter_mut().zip(gv.data()) {
                    *v *= gg;
                }
            }
            Tensor::new(xv.shape().to_vec(), data)
        };
        self.push(t, Op::MulRow(x, g), self.rg(&[x, g]))
    }

    /// Elementwise product with a fixed buffer (dropout masks).
    pub fn mul_const(&self, x: Var, c: Rc<Vec<f64>>) -> Var {
        let t = {
            let xv = self.value(x);
            assert_eq!(xv.numel(), c.len());
            let data = xv.data().iter().zip(c.iter()).map(|(a, b)| a * b).collect();
            Tensor::new(xv.shape().to_vec(), data)
        };
        self.push(t, Op::MulConst(x, c), self.rg(&[x]))
    }

    /// Matrix product on the `[rows, cols]` views, optionally transposing
    /// either operand. Output is 2-D.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (ar, ac) = (av.rows(), av.cols());
            let (br, bc) = (bv.rows(), bv.cols());
            let (m, k, a_rs, a_cs) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
            let (k2, n, b_rs, b_cs) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
            assert_eq!(
                k, k2,
                "matmul inner dims: {:?}{} x {:?}{}",
                av.shape(),
                if ta { "ᵀ" } else { "" },
                bv.shape(),
                if tb { "ᵀ" } else { "" }
            );
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, av.data(), a_rs, a_cs, bv.data(), b_rs, b_cs, &mut out, 0.0);
            Tensor::new(vec![m, n], out)
        };
        self.push(t, Op::MatMul { a, b, ta, tb }, self.rg(&[a, b]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn softmax(&self, x: Var) -> Var {
        let t = {
            let xv = self.value(x);
            let mut data = xv.data().to_vec();
            softmax_rows(&mut data, xv.cols());
            Tensor::new(xv.shape().to_vec(), data)
        };
        self.push(t, Op::Softmax(x), self.rg(&[x]))
    }

    /// Row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, x: Var) -> Var {
        let (t, inv_std) = {
            let xv = self.value(x);
            let c = xv.cols();
            let mut data = xv.data().to_vec();
            let mut inv = Vec::with_capacity(xv.rows());
            for row in data.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * is;
                }
                inv.push(is);
            }
            (Tensor::new(xv.shape().to_vec(), data), inv)
        };
        self.push(t, Op::LayerNorm { x, inv_std }, self.rg(&[x]))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let t = self.unary(x, |v| gelu_parts(v).0);
        self.push(t, Op::Gelu(x), self.rg(&[x]))
    }

    pub fn relu(&self, x: Var) -> Var {
        let t = self.unary(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), self.rg(&[x]))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let t = self.unary(x, sigmoid);
        self.push(t, Op::Sigmoid(x), self.rg(&[x]))
    }

    /// Apply a [`RowMap`] to the `[rows, cols]` view; output is
    /// `[map.out_rows(), cols]`.
    pub fn gather(&self, x: Var, map: Rc<RowMap>) -> Var {
        let t = {
            let xv = self.value(x);
            assert_eq!(xv.rows(), map.in_rows, "row map expects {} rows, got {:?}", map.in_rows, xv.shape());
            let c = xv.cols();
            Tensor::new(vec![map.out_rows(), c], map.apply(xv.data(), c))
        };
        self.push(t, Op::Gather(x, map), self.rg(&[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push(t, Op::Reshape(x), self.rg(&[x]))
    }

    /// Rows `[start, start+len)` of the `[rows, cols]` view.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let t = {
            let xv = self.value(x);
            let c = xv.cols();
            assert!(start + len <= xv.rows(), "row slice out of range");
            Tensor::new(vec![len, c], xv.data()[start * c..(start + len) * c].to_vec())
        };
        self.push(t, Op::SliceRows { x, start }, self.rg(&[x]))
    }

    pub fn concat_rows(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let t = {
            let nodes = self.nodes.borrow();
            let c = nodes[xs[0].0].value.cols();
            let mut data = Vec::new();
            for v in xs {
                let xv = &nodes[v.0].value;
                assert_eq!(xv.cols(), c, "concat_rows column mismatch");
                data.extend_from_slice(xv.data());
            }
            Tensor::new(vec![data.len() / c, c], data)
        };
        self.push(t, Op::ConcatRows(xs.to_vec()), self.rg(xs))
    }

    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let t = {
            let nodes = self.nodes.borrow();
            let r = nodes[xs[0].0].value.rows();
            let widths: Vec<usize> = xs.iter().map(|v| nodes[v.0].value.cols()).collect();
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; r * total];
            let mut off = 0;
            for (v, w) in xs.iter().zip(&widths) {
                let xv = &nodes[v.0].value;
                assert_eq!(xv.rows(), r, "concat_cols row mismatch");
                for i in 0..r {
                    data[i * total + off..i * total + off + w].copy_from_slice(&xv.data()[i * w..(i + 1) * w]);
                }
                off += w;
            }
            Tensor::new(vec![r, total], data)
        };
        self.push(t, Op::ConcatCols(xs.to_vec()), self.rg(xs))
    }

    pub fn sum(&self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(t, Op::Sum(x), self.rg(&[x]))
    }

    /// Scalar node with an externally computed value and gradient w.r.t. `x`.
    pub fn custom_scalar(&self, x: Var, value: f64, grad: Vec<f64>) -> Var {
        assert_eq!(self.value(x).numel(), grad.len());
        self.push(Tensor::scalar(value), Op::Custom { x, grad }, self.rg(&[x]))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let need = |v: Var| nodes[v.0].requires_grad;
            // Accumulate into `v`, allocating zeros on first touch.
            macro_rules! acc {
                ($v:expr, $f:expr) => {{
                    let v: Var = $v;
                    if need(v) {
                        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                        #[allow(clippy::redundant_closure_call)]
                        ($f)(slot.as_mut_slice());
                    }
                }};
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc!(*a, |s: &mut [f64]| add_into(s, &g));
                    acc!(*b, |s: &mut [f64]| add_into(s, &g));
                }
                Op::Sub(a, b) => {
                    acc!(*a, |s: &mut [f64]| add_into(s, &g));
                    acc!(*b, |s: &mut [f64]| s.iter_mut().zip(&g).for_each(|(d, v)| *d -= v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc!(*a, |s: &mut [f64]| for k in 0..s.len() {
                        s[k] += g[k] * bv[k]
                    });
                    acc!(*b, |s: &mut [f64]| for k in 0..s.len() {
                        s[k] += g[k] * av[k]
                    });
                }
                Op::Scale(a, f) => {
                    acc!(*a, |s: &mut [f64]| s.iter_mut().zip(&g).for_each(|(d, v)| *d += f * v));
                }
                Op::AddRow(x, b) => {
                    acc!(*x, |s: &mut [f64]| add_into(s, &g));
                    let c = nodes[b.0].value.numel();
                    acc!(*b, |s: &mut [f64]| for row in g.chunks(c) {
                        add_into(s, row)
                    });
                }
                Op::MulRow(x, gm) => {
                    let c = nodes[gm.0].value.numel();
                    let (xv, gv) = (nodes[x.0].value.data(), nodes[gm.0].value.data());
                    acc!(*x, |s: &mut [f64]| for k in 0..s.len() {
                        s[k] += g[k] * gv[k % c]
                    });
                    acc!(*gm, |s: &mut [f64]| for k in 0..g.len() {
                        s[k % c] += g[k] * xv[k]
                    });
                }
                Op::MulConst(x, c) => {
                    acc!(*x, |s: &mut [f64]| for k in 0..s.len() {
                        s[k] += g[k] * c[k]
                    });
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (ar, ac) = (av.rows(), av.cols());
                    let (br, bc) = (bv.rows(), bv.cols());
                    let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                    let n = if *tb { br } else { bc };
                    // C = op(A)·op(B); dop(A) = G·op(B)ᵀ, dop(B) = op(A)ᵀ·G
                    acc!(*a, |s: &mut [f64]| {
                        // op(B)ᵀ is k×n viewed transposed: element (j, kk) of op(B)ᵀ...
                        let (b_rs, b_cs) = if *tb { (1, bc) } else { (bc, 1) };
                        if *ta {
                            // dA (ar×ac = k×m) = (G·op(B)ᵀ)ᵀ = op(B)·Gᵀ
                            gemm(k, n, m, bv.data(), b_rs, b_cs, &g, 1, n, s, 1.0);
                        } else {
                            // dA (m×k) = G (m×n) · op(B)ᵀ (n×k)
                            gemm(m, n, k, &g, n, 1, bv.data(), b_cs, b_rs, s, 1.0);
                        }
                    });
                    acc!(*b, |s: &mut [f64]| {
                        let (a_rs, a_cs) = if *ta { (1, ac) } else { (ac, 1) };
                        if *tb {
                            // dB (n×k) = (op(A)ᵀ·G)ᵀ = Gᵀ·op(A)
                            gemm(n, m, k, &g, 1, n, av.data(), a_rs, a_cs, s, 1.0);
                        } else {
                            // dB (k×n) = op(A)ᵀ (k×m) · G (m×n)
                            gemm(k, m, n, av.data(), a_cs, a_rs, &g, n, 1, s, 1.0);
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    acc!(*x, |s: &mut [f64]| for r in 0..y.len() / c {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            s[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    });
                }
                Op::LayerNorm { x, inv_std } => {
                    let xh = node.value.data();
                    let c = node.value.cols();
                    acc!(*x, |s: &mut [f64]| for (r, is) in inv_std.iter().enumerate() {
                        let xr = &xh[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            s[r * c + j] += is * (gr[j] - mg - xr[j] * mgx);
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc!(*x, |s: &mut [f64]| for k in 0..s.len() {
                        s[k] += g[k] * gelu_parts(xv[k]).1
                    });
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc!(*x, |s: &mut [f64]| for k in 0..s.len() {
                        if xv[k] > 0.0 {
                            s[k] += g[k]
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc!(*x, |s: &mut [f64]| for k in 0..s.len() {
                        s[k] += g[k] * y[k] * (1.0 - y[k])
                    });
                }
                Op::Gather(x, map) => {
                    let c = node.value.cols();
                    acc!(*x, |s: &mut [f64]| for i in 0..map.out_rows() {
                        let gr = &g[i * c..(i + 1) * c];
                        for (j, w) in map.row(i) {
                            let dst = &mut s[j * c..(j + 1) * c];
                            for (d, v) in dst.iter_mut().zip(gr) {
                                *d += w * v;
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    acc!(*x, |s: &mut [f64]| add_into(s, &g));
                }
                Op::SliceRows { x, start } => {
                    let c = node.value.cols();
                    let off = start * c;
                    acc!(*x, |s: &mut [f64]| add_into(&mut s[off..off + g.len()], &g));
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for v in xs {
                        let n = nodes[v.0].value.numel();
                        acc!(*v, |s: &mut [f64]| add_into(s, &g[off..off + n]));
                        off += n;
                    }
                }
                Op::ConcatCols(xs) => {
                    let total = node.value.cols();
                    let r = node.value.rows();
                    let mut off = 0;
                    for v in xs {
                        let w = nodes[v.0].value.cols();
                        acc!(*v, |s: &mut [f64]| for i in 0..r {
                            add_into(&mut s[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        });
                        off += w;
                    }
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    acc!(*x, |s: &mut [f64]| s.iter_mut().for_each(|d| *d += g0));
                }
                Op::Custom { x, grad } => {
                    let g0 = g[0];
                    acc!(*x, |s: &mut [f64]| for k in 0..s.len() {
                        s[k] += g0 * grad[k]
                    });
                }
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, v) in self.params.borrow().iter() {
            if let Some(g) = grads.get_mut(v.0).and_then(Option::take) {
                by_name.insert(name.clone(), Tensor::new(nodes[v.0].value.shape().to_vec(), g));
            }
        }
        Gradients { by_name }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Parameter gradients keyed by parameter name. Parameters that did not
/// influence the output are absent.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    pub by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }
}
