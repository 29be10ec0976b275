// SPDX-License-Identifier: Apache-2.0

//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into every node that depends on a parameter.
//! Tensors are at most two-dimensional, row-major, `f64`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Stability constant inside the square root of both normalizations.
pub const NORM_EPS: f64 = 1e-5;
const ZERO_NORM_STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape")]
    DoubleBackward,
    #[error("{0}")]
    InvalidArgument(String),
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.len() > 2 {
            return Err(TensorError::InvalidArgument(format!(
                "tensors are at most 2-D, got shape {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)`; a vector of length `n` is one row of `n`.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("tensors are at most 2-D"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// `c = beta * c + op(a) @ op(b)` with `op(a)` of shape `m x k` and `op(b)`
/// of shape `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Directed edges `src -> dst` over `num_nodes` rows, with per-edge signs.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub sign: Vec<f64>,
}

impl EdgeSet {
    pub fn new(
        num_nodes: usize,
        src: Vec<usize>,
        dst: Vec<usize>,
        sign: Vec<f64>,
    ) -> Result<Self, TensorError> {
        if src.len() != dst.len() || src.len() != sign.len() {
            return Err(mismatch(
                "edges",
                format!("src {} dst {} sign {}", src.len(), dst.len(), sign.len()),
            ));
        }
        for &v in src.iter().chain(&dst) {
            if v >= num_nodes {
                return Err(TensorError::IndexOutOfRange {
                    op: "edges",
                    index: v,
                    len: num_nodes,
                });
            }
        }
        Ok(EdgeSet {
            num_nodes,
            src,
            dst,
            sign,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &d in &self.dst {
            deg[d] += 1;
        }
        deg
    }

    /// `sign / in_degree(dst)`: the signed-mean coefficients.
    pub fn signed_mean_coeffs(&self) -> Vec<f64> {
        let deg = self.in_degree();
        self.dst
            .iter()
            .zip(&self.sign)
            .map(|(&d, &s)| s / deg[d] as f64)
            .collect()
    }

    /// `1 / sqrt(deg(src) * deg(dst))` with in-degrees, ignoring signs.
    pub fn symmetric_norm_coeffs(&self) -> Vec<f64> {
        let deg = self.in_degree();
        self.src
            .iter()
            .zip(&self.dst)
            .map(|(&s, &d)| {
                let p = (deg[s].max(1) * deg[d].max(1)) as f64;
                1.0 / p.sqrt()
            })
            .collect()
    }
}

/// Contiguous row ranges, one per graph of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    offsets: Vec<usize>,
    graph_of_row: Vec<usize>,
}

impl Segments {
    /// `offsets` starts at 0, is non-decreasing and ends at the row count.
    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self, TensorError> {
        if offsets.first() != Some(&0) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(TensorError::InvalidArgument(format!(
                "segment offsets must start at 0 and be sorted: {offsets:?}"
            )));
        }
        let mut graph_of_row = Vec::with_capacity(*offsets.last().unwrap());
        for (g, w) in offsets.windows(2).enumerate() {
            graph_of_row.extend(std::iter::repeat_n(g, w[1] - w[0]));
        }
        Ok(Segments {
            offsets,
            graph_of_row,
        })
    }

    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut offsets = vec![0];
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        Self::from_offsets(offsets).expect("sizes give sorted offsets")
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_rows(&self) -> usize {
        self.graph_of_row.len()
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn graph_of_row(&self) -> &[usize] {
        &self.graph_of_row
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type ScalarFn = fn(f64) -> f64;

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    EdgeScatter {
        x: Var,
        edges: Arc<EdgeSet>,
        coeff: Arc<[f64]>,
    },
    Map {
        x: Var,
        df: ScalarFn,
    },
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GraphStandardize {
        x: Var,
        segments: Arc<Segments>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale {
        x: Var,
        s: Var,
    },
    GatherRows {
        x: Var,
        index: Arc<[usize]>,
    },
    Sum(Var),
    MeanAbsError {
        x: Var,
        target: Arc<[f64]>,
    },
    PairCosineDistance {
        z: Var,
        pairs: Arc<[(usize, usize)]>,
    },
    ZeroNorm {
        x: Var,
        y: Vec<f64>,
        std: Option<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records one forward computation. Single-writer; build a fresh tape per
/// forward/backward pair.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

fn relu_scalar(x: f64) -> f64 {
    x.max(0.0)
}

fn relu_grad_scalar(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is populated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` if `v` does not influence
    /// the loss or needs no gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// `x @ w + b` with `x: N x a`, `w: a x b`, `b: [b]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (n, a) = self.dims(x);
        let (wa, wb) = self.dims(w);
        if a != wa {
            return Err(mismatch("linear", format!("x is {n}x{a}, w is {wa}x{wb}")));
        }
        let mut out = vec![0.0; n * wb];
        if let Some(b) = b {
            let bias = self.data(b);
            if bias.len() != wb {
                return Err(mismatch(
                    "linear",
                    format!("bias has {} entries, expected {wb}", bias.len()),
                ));
            }
            for row in out.chunks_mut(wb.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        gemm(n, a, wb, self.data(x), false, self.data(w), false, &mut out, 1.0);
        let value = Tensor::matrix(n, wb, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// `out[dst] += coeff[e] * x[src]` over every edge `e`.
    pub fn edge_scatter(
        &mut self,
        x: Var,
        edges: &Arc<EdgeSet>,
        coeff: Arc<[f64]>,
    ) -> Result<Var, TensorError> {
        let (n, d) = self.dims(x);
        if n != edges.num_nodes {
            return Err(mismatch(
                "edge_scatter",
                format!("x has {n} rows, edges span {} nodes", edges.num_nodes),
            ));
        }
        if coeff.len() != edges.len() {
            return Err(mismatch(
                "edge_scatter",
                format!("{} coefficients for {} edges", coeff.len(), edges.len()),
            ));
        }
        let xs = self.data(x);
        let mut out = vec![0.0; n * d];
        for e in 0..edges.len() {
            let (s, t, c) = (edges.src[e], edges.dst[e], coeff[e]);
            let src = &xs[s * d..(s + 1) * d];
            for (o, v) in out[t * d..(t + 1) * d].iter_mut().zip(src) {
                *o += c * v;
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.push(
            value,
            Op::EdgeScatter {
                x,
                edges: Arc::clone(edges),
                coeff,
            },
            &[x],
        ))
    }

    /// Mean over incoming edges of `sign * x[src]`; rows without incoming
    /// edges are zero.
    pub fn signed_scatter_mean(&mut self, x: Var, edges: &Arc<EdgeSet>) -> Result<Var, TensorError> {
        let coeff: Arc<[f64]> = edges.signed_mean_coeffs().into();
        self.edge_scatter(x, edges, coeff)
    }

    /// Unsigned, unnormalized sum over incoming edges.
    pub fn scatter_sum(&mut self, x: Var, edges: &Arc<EdgeSet>) -> Result<Var, TensorError> {
        let coeff: Arc<[f64]> = vec![1.0; edges.len()].into();
        self.edge_scatter(x, edges, coeff)
    }

    /// Elementwise `f` with derivative `df`.
    pub fn map(&mut self, x: Var, f: ScalarFn, df: ScalarFn) -> Var {
        let value = Tensor {
            shape: self.nodes[x.0].value.shape.clone(),
            data: self.data(x).iter().map(|&v| f(v)).collect(),
        };
        self.push(value, Op::Map { x, df }, &[x])
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu_scalar, gelu_grad_scalar)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, relu_scalar, relu_grad_scalar)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = Tensor {
            shape: self.nodes[x.0].value.shape.clone(),
            data: self.data(x).iter().map(|&v| sigmoid_scalar(v)).collect(),
        };
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Per-row standardization followed by `* gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims(x);
        if d == 0 {
            return Err(TensorError::InvalidArgument("layer_norm needs d >= 1".into()));
        }
        if self.data(gamma).len() != d || self.data(beta).len() != d {
            return Err(mismatch("layer_norm", format!("gamma/beta must have {d} entries")));
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Per-graph, per-column standardization `(x - mu) / sqrt(var + eps)`.
    pub fn graph_standardize(
        &mut self,
        x: Var,
        segments: &Arc<Segments>,
    ) -> Result<Var, TensorError> {
        let (n, d) = self.dims(x);
        if n != segments.num_rows() {
            return Err(mismatch(
                "graph_standardize",
                format!("x has {n} rows, segments cover {}", segments.num_rows()),
            ));
        }
        let xs = self.data(x);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; segments.num_graphs() * d];
        for g in 0..segments.num_graphs() {
            let rows = segments.range(g);
            let count = rows.len() as f64;
            if rows.is_empty() {
                continue;
            }
            for c in 0..d {
                let mean = rows.clone().map(|r| xs[r * d + c]).sum::<f64>() / count;
                let var = rows
                    .clone()
                    .map(|r| (xs[r * d + c] - mean).powi(2))
                    .sum::<f64>()
                    / count;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[g * d + c] = inv;
                for r in rows.clone() {
                    xhat[r * d + c] = (xs[r * d + c] - mean) * inv;
                }
            }
        }
        let value = Tensor::matrix(n, d, xhat.clone())?;
        Ok(self.push(
            value,
            Op::GraphStandardize {
                x,
                segments: Arc::clone(segments),
                xhat,
                inv_std,
            },
            &[x],
        ))
    }

    /// Inverted dropout: in training, zero each element with probability
    /// `rate` and scale survivors by `1 / (1 - rate)`; identity otherwise.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        seed: u64,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = Tensor {
            shape: self.nodes[x.0].value.shape.clone(),
            data: self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Column-wise concatenation in argument order.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let n = self.dims(first).0;
        let widths: Vec<usize> = xs.iter().map(|&v| self.dims(v).1).collect();
        for &v in xs {
            if self.dims(v).0 != n {
                return Err(mismatch(
                    "concat_cols",
                    format!("row counts {} and {n} differ", self.dims(v).0),
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::matrix(n, total, out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.data(a).len() != self.data(b).len() || self.dims(a) != self.dims(b) {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value = Tensor {
            shape: self.nodes[a.0].value.shape.clone(),
            data: self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = Tensor {
            shape: self.nodes[a.0].value.shape.clone(),
            data: self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect(),
        };
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        x: Var,
        row: Var,
        f: fn(f64, f64) -> f64,
    ) -> Result<(Tensor, (usize, usize)), TensorError> {
        let (n, d) = self.dims(x);
        if self.data(row).len() != d {
            return Err(mismatch(
                op,
                format!("row has {} entries, x has {d} columns", self.data(row).len()),
            ));
        }
        let r = self.data(row);
        let data = self
            .data(x)
            .chunks(d.max(1))
            .flat_map(|xr| xr.iter().zip(r).map(move |(a, b)| f(*a, *b)))
            .collect();
        Ok((Tensor::matrix(n, d, data)?, (n, d)))
    }

    /// `x + row` with `row` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (value, _) = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    /// `x * row` with `row` broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (value, _) = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        Ok(self.push(value, Op::MulRow(x, row), &[x, row]))
    }

    /// `s * x` for a one-element `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.data(s).len() != 1 {
            return Err(mismatch("scale", "scale factor must have one element".into()));
        }
        let k = self.data(s)[0];
        let value = Tensor {
            shape: self.nodes[x.0].value.shape.clone(),
            data: self.data(x).iter().map(|v| k * v).collect(),
        };
        Ok(self.push(value, Op::Scale { x, s }, &[x, s]))
    }

    /// `out[i] = x[index[i]]` row-wise.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let (n, d) = self.dims(x);
        let xs = self.data(x);
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index.iter() {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        let value = Tensor::matrix(index.len(), d, out)?;
        Ok(self.push(value, Op::GatherRows { x, index }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.data(x).iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// `mean |x - target|`.
    pub fn mean_abs_error(&mut self, x: Var, target: Arc<[f64]>) -> Result<Var, TensorError> {
        let xs = self.data(x);
        if xs.len() != target.len() || xs.is_empty() {
            return Err(mismatch(
                "mean_abs_error",
                format!("{} predictions, {} targets", xs.len(), target.len()),
            ));
        }
        let mae = xs.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / xs.len() as f64;
        Ok(self.push(Tensor::scalar(mae), Op::MeanAbsError { x, target }, &[x]))
    }

    /// `1 - cos(z_i, z_j)` for every pair, as a vector. Callers must ensure
    /// no referenced row has zero norm.
    pub fn pair_cosine_distance(
        &mut self,
        z: Var,
        pairs: Arc<[(usize, usize)]>,
    ) -> Result<Var, TensorError> {
        let (n, d) = self.dims(z);
        let zs = self.data(z);
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            if i >= n || j >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "pair_cosine_distance",
                    index: i.max(j),
                    len: n,
                });
            }
            let (a, b) = (&zs[i * d..(i + 1) * d], &zs[j * d..(j + 1) * d]);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.push(1.0 - dot / (na * nb));
        }
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::PairCosineDistance { z, pairs }, &[z]))
    }

    /// Standardizes a vector to zero mean and unit population std; below a
    /// std of `1e-12` it only centers.
    pub fn zero_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.data(x);
        if xs.len() < 2 {
            return Err(TensorError::InvalidArgument(format!(
                "zero_norm needs at least 2 values, got {}",
                xs.len()
            )));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let (y, std): (Vec<f64>, Option<f64>) = if std < ZERO_NORM_STD_FLOOR {
            (xs.iter().map(|v| v - mean).collect(), None)
        } else {
            (xs.iter().map(|v| (v - mean) / std).collect(), Some(std))
        };
        let value = Tensor {
            shape: self.nodes[x.0].value.shape.clone(),
            data: y.clone(),
        };
        Ok(self.push(value, Op::ZeroNorm { x, y, std }, &[x]))
    }

    /// Reverse pass from a one-element `loss`. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].value.shape.clone()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dv) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, a) = self.dims(*x);
                let m = self.dims(*w).1;
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * a];
                    gemm(n, m, a, g, false, self.data(*w), true, &mut dx, 0.0);
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; a * m];
                    gemm(a, n, m, self.data(*x), true, g, false, &mut dw, 0.0);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; m];
                        for row in g.chunks(m.max(1)) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        out.push((*b, db));
                    }
                }
            }
            Op::EdgeScatter { x, edges, coeff } => {
                if self.wants(*x) {
                    let (n, d) = self.dims(*x);
                    let mut dx = vec![0.0; n * d];
                    for e in 0..edges.len() {
                        let (s, t, c) = (edges.src[e], edges.dst[e], coeff[e]);
                        let gt = &g[t * d..(t + 1) * d];
                        for (o, v) in dx[s * d..(s + 1) * d].iter_mut().zip(gt) {
                            *o += c * v;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Map { x, df } => {
                if self.wants(*x) {
                    let dx = self.data(*x).iter().zip(g).map(|(&v, gv)| df(v) * gv).collect();
                    out.push((*x, dx));
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let y = &self.nodes[i].value.data;
                    let dx = y.iter().zip(g).map(|(s, gv)| s * (1.0 - s) * gv).collect();
                    out.push((*x, dx));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = self.dims(*x);
                let gm = self.data(*gamma);
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let span = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let dh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        for c in 0..d {
                            dx[r * d + c] = k * (d as f64 * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (k, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[k % d] += gv * h;
                    }
                    out.push((*gamma, dg));
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; d];
                    for (k, gv) in g.iter().enumerate() {
                        db[k % d] += gv;
                    }
                    out.push((*beta, db));
                }
            }
            Op::GraphStandardize {
                x,
                segments,
                xhat,
                inv_std,
            } => {
                if self.wants(*x) {
                    let (n, d) = self.dims(*x);
                    let mut dx = vec![0.0; n * d];
                    for gi in 0..segments.num_graphs() {
                        let rows = segments.range(gi);
                        let count = rows.len() as f64;
                        for c in 0..d {
                            let (mut sum_g, mut sum_gh) = (0.0, 0.0);
                            for r in rows.clone() {
                                sum_g += g[r * d + c];
                                sum_gh += g[r * d + c] * xhat[r * d + c];
                            }
                            let k = inv_std[gi * d + c] / count;
                            for r in rows.clone() {
                                let idx = r * d + c;
                                dx[idx] = k * (count * g[idx] - sum_g - xhat[idx] * sum_gh);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    out.push((*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()));
                }
            }
            Op::Concat(xs) => {
                let n = self.dims(xs[0]).0;
                let total: usize = xs.iter().map(|&v| self.dims(v).1).sum();
                let mut offset = 0;
                for &v in xs {
                    let w = self.dims(v).1;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(n * w);
                        for r in 0..n {
                            dv.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push((v, dv));
                    }
                    offset += w;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.wants(*row) {
                    let d = self.data(*row).len();
                    let mut dr = vec![0.0; d];
                    for (k, gv) in g.iter().enumerate() {
                        dr[k % d] += gv;
                    }
                    out.push((*row, dr));
                }
            }
            Op::MulRow(x, row) => {
                let d = self.data(*row).len();
                if self.wants(*x) {
                    let r = self.data(*row);
                    out.push((*x, g.iter().enumerate().map(|(k, gv)| gv * r[k % d]).collect()));
                }
                if self.wants(*row) {
                    let mut dr = vec![0.0; d];
                    for (k, (gv, xv)) in g.iter().zip(self.data(*x)).enumerate() {
                        dr[k % d] += gv * xv;
                    }
                    out.push((*row, dr));
                }
            }
            Op::Scale { x, s } => {
                if self.wants(*x) {
                    let k = self.data(*s)[0];
                    out.push((*x, g.iter().map(|v| k * v).collect()));
                }
                if self.wants(*s) {
                    let ds = g.iter().zip(self.data(*x)).map(|(a, b)| a * b).sum();
                    out.push((*s, vec![ds]));
                }
            }
            Op::GatherRows { x, index } => {
                if self.wants(*x) {
                    let (n, d) = self.dims(*x);
                    let mut dx = vec![0.0; n * d];
                    for (r, &src) in index.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        dx[src * d..(src + 1) * d]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, b)| *a += b);
                    }
                    out.push((*x, dx));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    out.push((*x, vec![g[0]; self.data(*x).len()]));
                }
            }
            Op::MeanAbsError { x, target } => {
                if self.wants(*x) {
                    let k = g[0] / target.len() as f64;
                    let dx = self
                        .data(*x)
                        .iter()
                        .zip(target.iter())
                        .map(|(a, b)| {
                            let diff = a - b;
                            if diff > 0.0 {
                                k
                            } else if diff < 0.0 {
                                -k
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::PairCosineDistance { z, pairs } => {
                if self.wants(*z) {
                    let (n, d) = self.dims(*z);
                    let zs = self.data(*z);
                    let mut dz = vec![0.0; n * d];
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let (a, b) = (&zs[i * d..(i + 1) * d], &zs[j * d..(j + 1) * d]);
                        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let cos = dot / (na * nb);
                        // d(1 - cos) = -dcos
                        let gp = -g[p];
                        for c in 0..d {
                            dz[i * d + c] += gp * (b[c] / (na * nb) - cos * a[c] / (na * na));
                            dz[j * d + c] += gp * (a[c] / (na * nb) - cos * b[c] / (nb * nb));
                        }
                    }
                    out.push((*z, dz));
                }
            }
            Op::ZeroNorm { x, y, std } => {
                if self.wants(*x) {
                    let n = g.len() as f64;
                    let mean_g = g.iter().sum::<f64>() / n;
                    let dx = match std {
                        None => g.iter().map(|v| v - mean_g).collect(),
                        Some(s) => {
                            let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                            g.iter()
                                .zip(y)
                                .map(|(gv, yv)| (gv - mean_g - yv * mean_gy) / s)
                                .collect()
                        }
                    };
                    out.push((*x, dx));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    fn chain_edges(n: usize, edges: &[(usize, usize, f64)]) -> Arc<EdgeSet> {
        Arc::new(
            EdgeSet::new(
                n,
                edges.iter().map(|e| e.0).collect(),
                edges.iter().map(|e| e.1).collect(),
                edges.iter().map(|e| e.2).collect(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn linear_values() {
        let mut t = Tape::new();
        let x = t.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let w = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = t.constant(m(1, 2, &[1.0, 2.0]));
        let w = t.constant(m(2, 1, &[1.0, 1.0]));
        let b = t.constant(Tensor::vector(vec![0.0]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[3.0]);

        let bad = t.constant(m(3, 1, &[1.0, 1.0, 1.0]));
        assert!(matches!(t.linear(x, bad, None), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn scatter_values() {
        let mut t = Tape::new();
        let x = t.constant(m(2, 1, &[2.0, 0.0]));
        let e = chain_edges(2, &[(0, 1, 1.0)]);
        let y = t.signed_scatter_mean(x, &e).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);

        let x = t.constant(m(3, 1, &[5.0, 5.0, 0.0]));
        let e = chain_edges(3, &[(0, 2, 1.0), (1, 2, -1.0)]);
        let y = t.signed_scatter_mean(x, &e).unwrap();
        assert_eq!(t.value(y).data()[2], 0.0);

        let x = t.constant(m(4, 1, &[1.0, 2.0, 6.0, 0.0]));
        let e = chain_edges(4, &[(0, 3, 1.0), (1, 3, 1.0), (2, 3, -1.0)]);
        let y = t.signed_scatter_mean(x, &e).unwrap();
        assert_eq!(t.value(y).data()[3], -1.0);

        let x = t.constant(m(3, 1, &[1.0, 2.0, 0.0]));
        let e = chain_edges(3, &[(0, 2, -1.0), (1, 2, 1.0)]);
        let y = t.scatter_sum(x, &e).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 3.0]);

        assert!(matches!(
            EdgeSet::new(2, vec![0], vec![2], vec![1.0]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn activations() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, -1.0, 1.0]));
        let g = t.gelu(x);
        let r = t.relu(x);
        let s = t.sigmoid(x);
        assert_eq!(t.value(g).data()[0], 0.0);
        assert_eq!(t.value(r).data()[1], 0.0);
        assert_eq!(t.value(s).data()[0], 0.5);
        // Phi(1) = 0.841344746...
        assert!((t.value(g).data()[2] - 0.841_344_746).abs() < 1e-8);
    }

    #[test]
    fn layer_norm_values() {
        let mut t = Tape::new();
        let x = t.constant(m(2, 2, &[3.0, 3.0, 0.0, 2.0]));
        let g = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = t.constant(Tensor::vector(vec![0.5, -0.5]));
        let y = t.layer_norm(x, g, b).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[0..2], &[0.5, -0.5]);
        assert!((v[2] + 0.5).abs() < 1e-4);
        assert!((v[3] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn graph_standardize_values() {
        let mut t = Tape::new();
        let seg = Arc::new(Segments::from_sizes(&[3]));
        let x = t.constant(m(3, 1, &[1.0, 1.0, 1.0]));
        let y = t.graph_standardize(x, &seg).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

        let seg = Arc::new(Segments::from_sizes(&[2]));
        let x = t.constant(m(2, 1, &[0.0, 2.0]));
        let y = t.graph_standardize(x, &seg).unwrap();
        let v = t.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn graph_standardize_is_segment_local() {
        let a = [1.0, 5.0, 2.0, 0.5, 7.0, -3.0];
        let b = [10.0, 20.0, -4.0, 4.0];
        let run = |data: Vec<f64>, sizes: &[usize]| {
            let mut t = Tape::new();
            let seg = Arc::new(Segments::from_sizes(sizes));
            let x = t.constant(Tensor::matrix(data.len() / 2, 2, data).unwrap());
            let y = t.graph_standardize(x, &seg).unwrap();
            t.value(y).data().to_vec()
        };
        let ab = run([a.as_slice(), &b].concat(), &[3, 2]);
        let ba = run([b.as_slice(), &a].concat(), &[2, 3]);
        assert_eq!(&ab[..6], &ba[4..]);
        assert_eq!(&ab[6..], &ba[..4]);
    }

    #[test]
    fn dropout_modes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[100_000], 1.0));
        assert_eq!(t.dropout(x, 0.0, true, 1).unwrap(), x);
        assert_eq!(t.dropout(x, 0.7, false, 1).unwrap(), x);
        let y = t.dropout(x, 0.5, true, 1).unwrap();
        let kept = t.value(y).data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        // sd of the kept fraction at n = 1e5 is 0.0016
        assert!((0.49..=0.51).contains(&kept), "{kept}");
        assert!(t.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let y2 = t.dropout(x, 0.5, true, 1).unwrap();
        assert_eq!(t.value(y).data(), t.value(y2).data());
        assert!(t.dropout(x, 1.0, true, 1).is_err());
    }

    #[test]
    fn concat_layout() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(m(2, 3, &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let only = t.concat_cols(&[a]).unwrap();
        assert_eq!(t.value(only), t.value(a));
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 5]);
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let short = t.constant(m(1, 1, &[0.0]));
        assert!(t.concat_cols(&[a, short]).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(t.backward(s), Err(TensorError::DoubleBackward));

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let xx = t.mul(x, x).unwrap();
        let s = t.sum(xx);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 6.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn zero_norm_degenerate_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.3, 0.3, 0.3]));
        let y = t.zero_norm(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
        let w = t.constant(Tensor::vector(vec![1.0, 2.0, 6.0]));
        let p = t.mul(y, w).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[-2.0, -1.0, 3.0]);
    }
}
