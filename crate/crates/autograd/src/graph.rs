use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use crate::gemm::gemm;
use crate::tensor::softmax_in_place;
use crate::{logsumexp, Error, ParamId, ParamStore, Result, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward value is computed by the caller and whose
/// backward rule is supplied as a trait object.
///
/// `backward` returns one entry per input, in the order the inputs were
/// passed to [`Graph::custom`]. `None` means "no gradient for this input".
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Select(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    Dropout(Var, Vec<f64>),
    SparseMatMul {
        weight: Var,
        rows: Vec<Vec<(usize, f64)>>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A dynamically recorded computation over the parameters of one store.
///
/// Parameters are read through the borrowed store and never copied into the
/// graph; the store cannot be mutated while a graph built on it is alive.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients of a scalar root with respect to the parameters it reached.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Gradient for `id`, or zeros of the parameter's shape when unreachable.
    pub fn get_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.by_param
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.values().all(Tensor::is_finite)
    }
}

impl fmt::Debug for Graph<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A node holding a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// The node for parameter `id`. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = require_2d("transpose", t)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the vector `b` (length = last axis of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % c])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|x| x * factor).collect(),
        )?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, factor), rg))
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::Invalid("add_n of zero tensors".into()))?;
        let mut acc = self.value(first).clone();
        for v in &vars[1..] {
            let t = self.value(*v);
            if t.shape() != acc.shape() {
                return Err(shape_err("add_n", &acc, t));
            }
            acc.add_assign(t);
        }
        let rg = self.rg(vars);
        Ok(self.push(acc, Op::AddN(vars.to_vec()), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, |x| x.max(0.0))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, gelu)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gelu(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, f64::exp)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, f64::ln)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// `log(sum(exp(.)))` over the last axis, which is removed from the shape.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols() == 0 {
            return Err(Error::Invalid("logsumexp over an empty axis".into()));
        }
        let data: Vec<f64> = (0..t.rows()).map(|r| logsumexp(t.row(r))).collect();
        let shape = t.shape()[..t.shape().len().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSumExp(a), rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
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

    /// Concatenates 2-D tensors with equal row counts along the columns.
    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Invalid("concat_cols of zero tensors".into()));
        }
        let rows = require_2d("concat_cols", self.value(vars[0]))?.0;
        let mut widths = Vec::with_capacity(vars.len());
        for v in vars {
            let t = self.value(*v);
            let (r, c) = require_2d("concat_cols", t)?;
            if r != rows {
                return Err(shape_err("concat_cols", self.value(vars[0]), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in vars {
                out.extend_from_slice(self.value(*v).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(vars);
        Ok(self.push(out, Op::ConcatCols(vars.to_vec()), rg))
    }

    /// Stacks 2-D tensors with equal column counts along the rows.
    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Invalid("concat_rows of zero tensors".into()));
        }
        let cols = require_2d("concat_rows", self.value(vars[0]))?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for v in vars {
            let t = self.value(*v);
            let (r, c) = require_2d("concat_rows", t)?;
            if c != cols {
                return Err(shape_err("concat_rows", self.value(vars[0]), t));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(vars);
        Ok(self.push(out, Op::ConcatRows(vars.to_vec()), rg))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_2d("slice_rows", t)?;
        if start > end || end > r {
            return Err(Error::Index {
                op: "slice_rows",
                index: end,
                extent: r,
            });
        }
        let out = Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_2d("slice_cols", t)?;
        if start > end || end > c {
            return Err(Error::Index {
                op: "slice_cols",
                index: end,
                extent: c,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let out = Tensor::new(vec![r, w], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Embedding lookup: output row `i` is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_2d("gather_rows", t)?;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Picks elements by flat index into a 1-D tensor of `indices.len()` values.
    pub fn select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= t.len() {
                return Err(Error::Index {
                    op: "select",
                    index: i,
                    extent: t.len(),
                });
            }
            out.push(t.data()[i]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), Op::Select(a, indices.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Invalid("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a), rg))
    }

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 - rate)`. A zero rate records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Dropout(a, mask), rg))
    }

    /// Multiplies a sparse `[rows.len(), weight.rows]` matrix given as
    /// `(column, value)` lists by a dense 2-D `weight`.
    pub fn sparse_matmul(&mut self, rows: Vec<Vec<(usize, f64)>>, weight: Var) -> Result<Var> {
        let w = self.value(weight);
        let (vocab, dim) = require_2d("sparse_matmul", w)?;
        let mut out = vec![0.0; rows.len() * dim];
        for (r, feats) in rows.iter().enumerate() {
            let dst = &mut out[r * dim..(r + 1) * dim];
            for &(idx, val) in feats {
                if idx >= vocab {
                    return Err(Error::Index {
                        op: "sparse_matmul",
                        index: idx,
                        extent: vocab,
                    });
                }
                for (d, s) in dst.iter_mut().zip(w.row(idx)) {
                    *d += val * s;
                }
            }
        }
        let out = Tensor::new(vec![rows.len(), dim], out)?;
        let rg = self.rg(&[weight]);
        Ok(self.push(out, Op::SparseMatMul { weight, rows }, rg))
    }

    /// Records an operation whose value the caller already computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let value = self.value(Var(idx));
            self.propagate(&node.op, value, &grad, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.value(v).shape().to_vec();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64]) {
        if let Some(b) = self.buf(grads, v) {
            for (d, s) in b.data_mut().iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    fn propagate(
        &self,
        op: &Op,
        value: &Tensor,
        grad: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let g = grad.data();
        match op {
            Op::Constant => {}
            Op::Param(id) => {
                out.by_param
                    .entry(*id)
                    .and_modify(|t| t.add_assign(grad))
                    .or_insert_with(|| grad.clone());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(da) = self.buf(grads, *a) {
                    // dA = dC @ B^T
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        (n as isize, 1),
                        tb.data(),
                        (1, n as isize),
                        1.0,
                        da.data_mut(),
                    );
                }
                if let Some(db) = self.buf(grads, *b) {
                    // dB = A^T @ dC
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        ta.data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        1.0,
                        db.data_mut(),
                    );
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (value.shape()[0], value.shape()[1]);
                if let Some(da) = self.buf(grads, *a) {
                    let d = da.data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            d[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, &ga);
                self.accumulate(grads, *b, &gb);
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g);
                if let Some(db) = self.buf(grads, *b) {
                    let c = db.len();
                    for (i, x) in g.iter().enumerate() {
                        db.data_mut()[i % c] += x;
                    }
                }
            }
            Op::Scale(a, f) => {
                let gs: Vec<f64> = g.iter().map(|x| x * f).collect();
                self.accumulate(grads, *a, &gs);
            }
            Op::AddN(vars) => {
                for v in vars {
                    self.accumulate(grads, *v, g);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let gs: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &gs);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let gs: Vec<f64> = g.iter().zip(x).map(|(d, v)| d * gelu_grad(*v)).collect();
                self.accumulate(grads, *a, &gs);
            }
            Op::Exp(a) => {
                let gs: Vec<f64> = g.iter().zip(value.data()).map(|(d, y)| d * y).collect();
                self.accumulate(grads, *a, &gs);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let gs: Vec<f64> = g.iter().zip(x).map(|(d, v)| d / v).collect();
                self.accumulate(grads, *a, &gs);
            }
            Op::Softmax(a) => {
                let c = value.cols();
                let mut gs = vec![0.0; value.len()];
                for r in 0..value.rows() {
                    let y = value.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for j in 0..c {
                        gs[r * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, &gs);
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut gs = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let lse = value.data()[r];
                    for j in 0..c {
                        gs[r * c + j] = g[r] * (x.data()[r * c + j] - lse).exp();
                    }
                }
                self.accumulate(grads, *a, &gs);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma).data();
                let c = tg.len();
                let rows = inv_std.len();
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; rows * c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let gh: Vec<f64> = gr.iter().zip(tg).map(|(d, w)| d * w).collect();
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghh =
                            gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = inv_std[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
                if let Some(dg) = self.buf(grads, *gamma) {
                    for (i, d) in g.iter().enumerate() {
                        dg.data_mut()[i % c] += d * xhat[i];
                    }
                }
                if let Some(db) = self.buf(grads, *beta) {
                    for (i, d) in g.iter().enumerate() {
                        db.data_mut()[i % c] += d;
                    }
                }
            }
            Op::ConcatCols(vars) => {
                let total = value.cols();
                let rows = value.rows();
                let mut offset = 0;
                for v in vars {
                    let w = self.value(*v).cols();
                    if let Some(dv) = self.buf(grads, *v) {
                        let d = dv.data_mut();
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(vars) => {
                let mut offset = 0;
                for v in vars {
                    let n = self.value(*v).len();
                    self.accumulate(grads, *v, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = value.cols();
                if let Some(da) = self.buf(grads, *a) {
                    let dst = &mut da.data_mut()[start * c..start * c + g.len()];
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let w = value.cols();
                if let Some(da) = self.buf(grads, *a) {
                    let c = da.cols();
                    let d = da.data_mut();
                    for r in 0..value.rows() {
                        for j in 0..w {
                            d[r * c + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                let c = value.cols();
                if let Some(da) = self.buf(grads, *a) {
                    let d = da.data_mut();
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Select(a, indices) => {
                if let Some(da) = self.buf(grads, *a) {
                    let d = da.data_mut();
                    for (r, &i) in indices.iter().enumerate() {
                        d[i] += g[r];
                    }
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::Dropout(a, mask) => {
                let gs: Vec<f64> = g.iter().zip(mask).map(|(d, m)| d * m).collect();
                self.accumulate(grads, *a, &gs);
            }
            Op::SparseMatMul { weight, rows } => {
                if let Some(dw) = self.buf(grads, *weight) {
                    let dim = dw.cols();
                    let d = dw.data_mut();
                    for (r, feats) in rows.iter().enumerate() {
                        let gr = &g[r * dim..(r + 1) * dim];
                        for &(idx, val) in feats {
                            for (dst, s) in d[idx * dim..(idx + 1) * dim].iter_mut().zip(gr) {
                                *dst += val * s;
                            }
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let input_grads = op.backward(&tensors, value, grad);
                if input_grads.len() != inputs.len() {
                    return Err(Error::Invalid(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        input_grads.len(),
                        inputs.len()
                    )));
                }
                for (v, ig) in inputs.iter().zip(input_grads) {
                    if let Some(ig) = ig {
                        if ig.len() != self.value(*v).len() {
                            return Err(shape_err(op.name(), self.value(*v), &ig));
                        }
                        self.accumulate(grads, *v, ig.data());
                    }
                }
            }
        }
        Ok(())
    }
}
