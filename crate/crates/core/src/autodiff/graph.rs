//! Define-by-run reverse-mode differentiation over [`Array`] values.
//!
//! A [`Graph`] is built fresh for every mini-batch. Each op appends a node
//! holding its forward value and enough information to push an output
//! adjoint back to its parents. Nodes are appended in evaluation order, so
//! walking the node list backwards is a valid reverse topological order.

use std::collections::BTreeMap;

use rand::Rng as _;

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize { input: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    Embedding { table: Var, indices: Vec<usize> },
    Dropout { input: Var, mask: Array },
    Pick { input: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: BTreeMap<String, Var>,
    signature: u64,
}

/// Row/column view used by the broadcasting element-wise ops.
#[derive(Clone, Copy)]
struct Dims {
    rows: usize,
    cols: usize,
}

impl Dims {
    fn of(a: &Array) -> Self {
        Self {
            rows: a.rows(),
            cols: a.cols(),
        }
    }

    fn index(self, r: usize, c: usize) -> usize {
        let r = if self.rows == 1 { 0 } else { r };
        let c = if self.cols == 1 { 0 } else { c };
        r * self.cols + c
    }
}

fn broadcast(op: &'static str, a: &Array, b: &Array) -> Result<(Dims, Vec<usize>)> {
    let (da, db) = (Dims::of(a), Dims::of(b));
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(da.rows, db.rows), dim(da.cols, db.cols)) {
        (Some(rows), Some(cols)) => {
            let shape = if a.shape() == b.shape() || (da.rows, da.cols) == (rows, cols) {
                a.shape().to_vec()
            } else if (db.rows, db.cols) == (rows, cols) {
                b.shape().to_vec()
            } else {
                vec![rows, cols]
            };
            Ok((Dims { rows, cols }, shape))
        }
        _ => Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

/// `c[n x m] += a[n x k] * b[k x m]`
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    let mut i = 0;
    while i + 4 <= n {
        let (c0, rest) = c[i * m..(i + 4) * m].split_at_mut(m);
        let (c1, rest) = rest.split_at_mut(m);
        let (c2, c3) = rest.split_at_mut(m);
        for p in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            );
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da[n x k] += g[n x m] * b[k x m]^T`
fn matmul_grad_lhs(g: &[f64], b: &[f64], da: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            da[i * k + p] += dot(grow, &b[p * m..(p + 1) * m]);
        }
    }
}

/// Dot product with independent partial sums so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// `db[k x m] += a[n x k]^T * g[n x m]`
fn matmul_grad_rhs(a: &[f64], g: &[f64], db: &mut [f64], n: usize, k: usize, m: usize) {
    let mut i = 0;
    while i + 4 <= n {
        let (g0, g1, g2, g3) = (
            &g[i * m..(i + 1) * m],
            &g[(i + 1) * m..(i + 2) * m],
            &g[(i + 2) * m..(i + 3) * m],
            &g[(i + 3) * m..(i + 4) * m],
        );
        for p in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            );
            let drow = &mut db[p * m..(p + 1) * m];
            for j in 0..m {
                drow[j] += a0 * g0[j];
                drow[j] += a1 * g1[j];
                drow[j] += a2 * g2[j];
                drow[j] += a3 * g3[j];
            }
        }
        i += 4;
    }
    for i in i..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let drow = &mut db[p * m..(p + 1) * m];
            for (dv, gv) in drow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
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

fn fnv_mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3)
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            params: BTreeMap::new(),
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient; `None` when nothing has flowed into the node.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Array {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(self.value(v).shape()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every discrete branch taken while building the graph
    /// (rectifier signs and sampled tokens). Two builds with equal signatures
    /// followed the same piecewise-smooth branch.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn record_discrete(&mut self, v: u64) {
        self.signature = fnv_mix(self.signature, v.wrapping_add(1));
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Binds a stored parameter into the graph, once per name. Parameters from
    /// a frozen store enter as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let v = self.leaf(value, !store.is_frozen());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, in name order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        let (k2, m) = (bv.rows(), bv.cols());
        if k != k2 || bv.shape().len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        matmul_into(av.data(), bv.data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        let (dims, shape) = broadcast(op, av, bv)?;
        if av.len() == bv.len() && av.rows() == bv.rows() {
            let out = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| f(*x, *y))
                .collect();
            return Array::new(shape, out);
        }
        let (da, db) = (Dims::of(av), Dims::of(bv));
        let mut out = Vec::with_capacity(dims.rows * dims.cols);
        for r in 0..dims.rows {
            for c in 0..dims.cols {
                out.push(f(av.data()[da.index(r, c)], bv.data()[db.index(r, c)]));
            }
        }
        Array::new(shape, out)
    }

    /// Element-wise sum; either operand may broadcast along rows or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Element-wise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat inputs"))?;
        let rows = self.value(first).rows();
        let one_d = inputs.iter().all(|v| self.value(*v).shape().len() == 1);
        let mut total = 0;
        for v in inputs {
            let a = self.value(*v);
            if a.rows() != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: a.shape().to_vec(),
                });
            }
            total += a.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in inputs {
                out.extend_from_slice(self.value(*v).row(r));
            }
        }
        let shape = if one_d {
            vec![total]
        } else {
            vec![rows, total]
        };
        let rg = self.rg(inputs);
        Ok(self.push(Array::new(shape, out)?, Op::Concat(inputs.to_vec()), rg))
    }

    /// Columns `start..end` of every row.
    pub fn slice(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let a = self.value(input);
        if start > end || end > a.cols() {
            return Err(Error::Shape {
                op: "slice",
                lhs: a.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let rows = a.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&a.row(r)[start..end]);
        }
        let shape = if a.shape().len() == 1 {
            vec![end - start]
        } else {
            vec![rows, end - start]
        };
        let rg = self.rg(&[input]);
        Ok(self.push(Array::new(shape, out)?, Op::Slice { input, start }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `max(0, x)`; also serves as the hinge of the margin losses.
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut sig = self.signature;
        for (i, &v) in xv.data().iter().enumerate() {
            if v > 0.0 {
                sig = fnv_mix(sig, i as u64 + 1);
            }
        }
        let out = xv.map(|v| v.max(0.0));
        self.signature = fnv_mix(sig, xv.len() as u64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn hinge(&mut self, x: Var) -> Var {
        self.relu(x)
    }

    fn row_softmax(a: &Array, log: bool) -> Result<Array> {
        let cols = a.cols();
        if cols == 0 {
            return Err(Error::EmptyAxis {
                op: if log { "log_softmax" } else { "softmax" },
            });
        }
        let mut out = Vec::with_capacity(a.len());
        for r in 0..a.rows() {
            let row = a.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            if log {
                let lse = max + sum.ln();
                out.extend(row.iter().map(|v| v - lse));
            } else {
                out.extend(row.iter().map(|v| (v - max).exp() / sum));
            }
        }
        Array::new(a.shape().to_vec(), out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = Self::row_softmax(self.value(x), false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = Self::row_softmax(self.value(x), true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let mut norms = Vec::with_capacity(a.rows());
        let mut out = Vec::with_capacity(a.len());
        for r in 0..a.rows() {
            let row = a.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::ZeroNorm {
                    op: "l2_normalize",
                    row: r,
                });
            }
            out.extend(row.iter().map(|v| v / n));
            norms.push(n);
        }
        let out = Array::new(a.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2Normalize { input: x, norms }, rg))
    }

    /// Row-wise inner product of two equally shaped operands.
    pub fn inner_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "inner_product",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let rows = av.rows();
        let out: Vec<f64> = (0..rows)
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let shape = if av.shape().len() == 1 {
            vec![1]
        } else {
            vec![rows, 1]
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::new(shape, out)?, Op::RowDot(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        if a.is_empty() {
            return Err(Error::EmptyAxis { op: "mean" });
        }
        let s = a.data().iter().sum::<f64>() / a.len() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Array::scalar(s), Op::Mean(x), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Gathers rows of `table` (a `vocab x dim` matrix).
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, dim) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    op: "embedding",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Array::new(vec![indices.len(), dim], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies by a pre-sampled mask. Identity in evaluation mode.
    pub fn dropout_mask_apply(&mut self, x: Var, mask: Array) -> Result<Var> {
        if !self.is_train() {
            return Ok(x);
        }
        let a = self.value(x);
        if a.shape() != mask.shape() {
            return Err(Error::Shape {
                op: "dropout",
                lhs: a.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let out = Array::new(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(mask.data())
                .map(|(v, m)| v * m)
                .collect(),
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { input: x, mask }, rg))
    }

    /// Inverted dropout with drop probability `p`: kept entries are scaled by
    /// `1 / (1 - p)` so evaluation needs no rescaling.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !self.is_train() || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let shape = self.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.dropout_mask_apply(x, Array::new(shape, mask)?)
    }

    /// Picks column `indices[r]` from every row `r`, giving an `n x 1` result.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let a = self.value(x);
        if indices.len() != a.rows() {
            return Err(Error::Shape {
                op: "pick",
                lhs: a.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let cols = a.cols();
        let mut out = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            if i >= cols {
                return Err(Error::Index {
                    op: "pick",
                    index: i,
                    size: cols,
                });
            }
            out.push(a.row(r)[i]);
        }
        let out = Array::new(vec![indices.len(), 1], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Pick {
                input: x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Accumulates `d(root)/d(node)` into every reachable node that requires a
    /// gradient. Calling twice without [`Graph::zero_grad`] doubles the result.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut adj: Vec<Option<Array>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Array::filled(&shape, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn contribution<'a>(&self, adj: &'a mut [Option<Array>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut adj[v.0];
        if slot.is_none() {
            *slot = Some(Array::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|a| a.data_mut())
    }

    fn propagate(&self, i: usize, g: &Array, adj: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = self.contribution(adj, *a) {
                    matmul_grad_lhs(gd, bv.data(), da, n, k, m);
                }
                if let Some(db) = self.contribution(adj, *b) {
                    matmul_grad_rhs(av.data(), gd, db, n, k, m);
                }
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_mul = matches!(node.op, Op::Mul(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da_dims, db_dims) = (Dims::of(av), Dims::of(bv));
                let (rows, cols) = (y.rows(), y.cols());
                let same = av.len() == gd.len() && bv.len() == gd.len();
                if same {
                    if let Some(da) = self.contribution(adj, *a) {
                        if is_mul {
                            for ((dv, gv), f) in da.iter_mut().zip(gd).zip(bv.data()) {
                                *dv += gv * f;
                            }
                        } else {
                            for (dv, gv) in da.iter_mut().zip(gd) {
                                *dv += gv * 1.0;
                            }
                        }
                    }
                    if let Some(db) = self.contribution(adj, *b) {
                        if is_mul {
                            for ((dv, gv), f) in db.iter_mut().zip(gd).zip(av.data()) {
                                *dv += gv * f;
                            }
                        } else {
                            for (dv, gv) in db.iter_mut().zip(gd) {
                                *dv += gv * 1.0;
                            }
                        }
                    }
                    return;
                }
                if let Some(da) = self.contribution(adj, *a) {
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = gd[r * cols + c];
                            let f = if is_mul {
                                bv.data()[db_dims.index(r, c)]
                            } else {
                                1.0
                            };
                            da[da_dims.index(r, c)] += gv * f;
                        }
                    }
                }
                if let Some(db) = self.contribution(adj, *b) {
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = gd[r * cols + c];
                            let f = if is_mul {
                                av.data()[da_dims.index(r, c)]
                            } else {
                                1.0
                            };
                            db[db_dims.index(r, c)] += gv * f;
                        }
                    }
                }
            }
            Op::Concat(inputs) => {
                let (rows, total) = (y.rows(), y.cols());
                let mut offset = 0;
                for v in inputs {
                    let w = self.value(*v).cols();
                    if let Some(d) = self.contribution(adj, *v) {
                        for r in 0..rows {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            for (dv, sv) in d[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *dv += sv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { input, start } => {
                let in_cols = self.value(*input).cols();
                let (rows, w) = (y.rows(), y.cols());
                if let Some(d) = self.contribution(adj, *input) {
                    for r in 0..rows {
                        let dst = &mut d[r * in_cols + start..r * in_cols + start + w];
                        for (dv, sv) in dst.iter_mut().zip(&gd[r * w..(r + 1) * w]) {
                            *dv += sv;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.contribution(adj, *x) {
                    for ((dv, gv), yv) in d.iter_mut().zip(gd).zip(y.data()) {
                        *dv += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.contribution(adj, *x) {
                    for ((dv, gv), yv) in d.iter_mut().zip(gd).zip(y.data()) {
                        *dv += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(d) = self.contribution(adj, *x) {
                    for ((dv, gv), xi) in d.iter_mut().zip(gd).zip(xv.data()) {
                        if *xi > 0.0 {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = y.cols();
                if let Some(d) = self.contribution(adj, *x) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            d[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = y.cols();
                if let Some(d) = self.contribution(adj, *x) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            d[r * cols + c] += gr[c] - yr[c].exp() * gsum;
                        }
                    }
                }
            }
            Op::L2Normalize { input, norms } => {
                let cols = y.cols();
                if let Some(d) = self.contribution(adj, *input) {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            d[r * cols + c] += (gr[c] - yr[c] * dot) / n;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                if let Some(da) = self.contribution(adj, *a) {
                    for (r, gv) in gd.iter().enumerate() {
                        for (dv, bx) in da[r * cols..(r + 1) * cols].iter_mut().zip(bv.row(r)) {
                            *dv += gv * bx;
                        }
                    }
                }
                if let Some(db) = self.contribution(adj, *b) {
                    for (r, gv) in gd.iter().enumerate() {
                        for (dv, ax) in db[r * cols..(r + 1) * cols].iter_mut().zip(av.row(r)) {
                            *dv += gv * ax;
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.value(*x).len();
                let gv = if matches!(node.op, Op::Mean(_)) {
                    gd[0] / n as f64
                } else {
                    gd[0]
                };
                if let Some(d) = self.contribution(adj, *x) {
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.contribution(adj, *x) {
                    for (dv, gv) in d.iter_mut().zip(gd) {
                        *dv += c * gv;
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let dim = y.cols();
                if let Some(d) = self.contribution(adj, *table) {
                    for (r, &i) in indices.iter().enumerate() {
                        for (dv, gv) in d[i * dim..(i + 1) * dim]
                            .iter_mut()
                            .zip(&gd[r * dim..(r + 1) * dim])
                        {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(d) = self.contribution(adj, *input) {
                    for ((dv, gv), m) in d.iter_mut().zip(gd).zip(mask.data()) {
                        *dv += gv * m;
                    }
                }
            }
            Op::Pick { input, indices } => {
                let cols = self.value(*input).cols();
                if let Some(d) = self.contribution(adj, *input) {
                    for (r, &c) in indices.iter().enumerate() {
                        d[r * cols + c] += gd[r];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::eval();
        let x = g.constant(Array::vector(vec![3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        close(g.value(y).data(), &[0.6, 0.8]);
        let d = g.inner_product(y, y).unwrap();
        assert!((g.value(d).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::eval();
        let x = g.constant(Array::vector(vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        close(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_over_empty_axis_is_an_error() {
        let mut g = Graph::eval();
        let x = g.constant(Array::zeros(&[2, 0]));
        assert!(matches!(g.softmax(x), Err(Error::EmptyAxis { .. })));
        assert!(g.log_softmax(x).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::train();
        let x = g.leaf(Array::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq);
        g.backward(root).unwrap();
        close(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_leaves_zero_grads() {
        let mut g = Graph::train();
        let x = g.leaf(Array::vector(vec![1.0, 2.0]), true);
        let c = g.scalar(3.0);
        g.backward(c).unwrap();
        close(g.grad_or_zeros(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::train();
        let x = g.leaf(Array::vector(vec![1.5, -2.0]), true);
        let y = g.add(x, x).unwrap();
        let root = g.sum(y);
        g.backward(root).unwrap();
        close(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.backward(root).unwrap();
        close(g.grad(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::train();
        let x = g.leaf(Array::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::eval();
        let a = g.constant(Array::zeros(&[2, 3]));
        let b = g.constant(Array::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Array::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::eval();
        let x = g.constant(Array::vector(vec![1.0, 2.0]));
        let mut rng = crate::rng::seeded(0);
        assert_eq!(g.dropout(x, 0.5, &mut rng).unwrap(), x);
    }

    #[test]
    fn inverted_dropout_scales_kept_units() {
        let mut g = Graph::train();
        let x = g.constant(Array::filled(&[1, 1000], 1.0));
        let mut rng = crate::rng::seeded(1);
        let y = g.dropout(x, 0.2, &mut rng).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn row_broadcast_bias_gradient_sums_rows() {
        let mut g = Graph::train();
        let x = g.constant(Array::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let b = g.leaf(Array::vector(vec![0.5, -0.5]), true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 2]);
        let root = g.sum(y);
        g.backward(root).unwrap();
        close(g.grad(b).unwrap().data(), &[3.0, 3.0]);
    }
}
