//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so node indices are already a topological order. [`Tape::backward`] walks
//! the record once in reverse and hands back the gradients of every parameter
//! and input leaf reachable from the loss. The tape is consumed by the call.
//!
//! Parameters are not copied onto the tape: a parameter leaf refers to the
//! [`ParamStore`] the tape borrows, and gradients are folded back into the
//! store with [`ParamStore::accumulate`] once the tape is gone.

mod gradcheck;
pub(crate) mod kernels;
mod params;

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::{Error, Result, Tensor};

pub use gradcheck::{
    grad_check, grad_check_params, relative_error, CoordinateCheck, GradCheckReport, GRAD_FLOOR,
};
pub use params::{ParamGroup, ParamId, ParamStore, Parameter};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used to target the backward-rule fault hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    GroupSoftmax,
    LayerNorm,
    Dropout,
    Gather,
    ConcatCols,
    SliceCols,
    ConcatRows,
    SliceRows,
    Sum,
    Cosine,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        use OpKind::*;
        Some(match name {
            "matmul" => MatMul,
            "transpose" => Transpose,
            "add" => Add,
            "sub" => Sub,
            "mul" => Mul,
            "add_row" => AddRow,
            "scale" => Scale,
            "add_scalar" => AddScalar,
            "relu" => Relu,
            "sigmoid" => Sigmoid,
            "tanh" => Tanh,
            "softmax" => Softmax,
            "group_softmax" => GroupSoftmax,
            "layer_norm" => LayerNorm,
            "dropout" => Dropout,
            "gather" => Gather,
            "concat_cols" => ConcatCols,
            "slice_cols" => SliceCols,
            "concat_rows" => ConcatRows,
            "slice_rows" => SliceRows,
            "sum" => Sum,
            "cosine" => Cosine,
            _ => return None,
        })
    }
}

enum Op {
    Param(ParamId),
    Input,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    GroupSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        frozen: Option<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Cosine {
        u: Var,
        v: Var,
        dot: f64,
        nu: f64,
        nv: f64,
        denom: f64,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Param(_) | Op::Input | Op::Constant => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Softmax(_) => OpKind::Softmax,
            Op::GroupSoftmax(..) => OpKind::GroupSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Gather { .. } => OpKind::Gather,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Cosine { .. } => OpKind::Cosine,
        })
    }
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient of an [`Tape::input`] leaf.
    pub fn input(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var)
    }
}

/// Record of one forward pass.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
    kinks: Option<Vec<bool>>,
    fault: Option<OpKind>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; leaves come from [`Tape::input`] and
    /// [`Tape::constant`].
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            kinks: None,
            fault: None,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records the sign of every ReLU input from now on (see
    /// [`Tape::kink_signature`]).
    pub fn track_kinks(&mut self) {
        self.kinks = Some(Vec::new());
    }

    /// Activation pattern of every ReLU evaluated since [`Tape::track_kinks`].
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> &[bool] {
        self.kinks.as_deref().unwrap_or(&[])
    }

    /// Test hook: the backward rule of `kind` is scaled by 1.5.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("parameter tape").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.params.expect("tape built without a parameter store");
        let requires_grad = store.get(id).requires_grad;
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    fn check_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(op, out, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(op, out, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_2d("matmul", a)?;
        let (k2, n) = self.check_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.check_2d("transpose", x)?;
        let data = kernels::transpose(self.value(x).data(), r, c);
        let out = Tensor::new(&[c, r], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose(x), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `bias` (length = last extent of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(Error::dim("add_row", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddRow(x, bias), out, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |a| a + c)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        if self.kinks.is_some() {
            let signs: Vec<bool> = self.value(x).data().iter().map(|&a| a > 0.0).collect();
            if let Some(k) = &mut self.kinks {
                k.extend(signs);
            }
        }
        self.map(x, Op::Relu(x), |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), math::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), math::tanh)
    }

    /// Softmax along the last axis. `mask` has one entry per column (shared
    /// by every row) or one per element; `false` entries get probability
    /// exactly 0. A row without any `true` entry is an error.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(m) = mask {
            if m.len() != c && m.len() != xv.numel() {
                return Err(Error::dim("softmax", xv.shape(), &[m.len()]));
            }
        }
        let mut data = vec![0.0; xv.numel()];
        for (r, row) in xv.data().chunks(c).enumerate() {
            let valid = |j: usize| match mask {
                None => true,
                Some(m) if m.len() == c => m[j],
                Some(m) => m[r * c + j],
            };
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(Error::DegenerateMask { op: "softmax" });
            }
            let out = &mut data[r * c..(r + 1) * c];
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) {
                    let e = math::exp(v - max);
                    out[j] = e;
                    sum += e;
                }
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax(x), out, rg))
    }

    /// Splits the last axis into `groups` equal slices and normalizes, for
    /// every offset `j`, the values `(x[j], x[d + j], x[2d + j], ...)` with a
    /// softmax. The slices then sum to one elementwise.
    pub fn group_softmax(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::Parameter(alloc::format!(
                "group_softmax: {c} columns not divisible into {groups} groups"
            )));
        }
        let d = c / groups;
        let mut data = vec![0.0; xv.numel()];
        for (row, out) in xv.data().chunks(c).zip(data.chunks_mut(c)) {
            for j in 0..d {
                let max = (0..groups)
                    .map(|g| row[g * d + j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for g in 0..groups {
                    let e = math::exp(row[g * d + j] - max);
                    out[g * d + j] = e;
                    sum += e;
                }
                for g in 0..groups {
                    out[g * d + j] /= sum;
                }
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::GroupSoftmax(x, groups), out, rg))
    }

    /// Normalizes each row to zero mean and unit variance (`eps` added to the
    /// variance) and applies the affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 {
            return Err(Error::Parameter(
                "layer_norm needs at least 2 features".into(),
            ));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                data[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            },
            out,
            rg,
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`. Outside
    /// training (or at rate 0) this is the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(alloc::format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let scale: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Dropout { x, scale }, out, rg))
    }

    /// Row lookup `table[ids[t]]`. Rows equal to `frozen` never receive a
    /// gradient.
    pub fn gather(&mut self, table: Var, ids: &[usize], frozen: Option<usize>) -> Result<Var> {
        let (rows, d) = self.check_2d("gather", table)?;
        if ids.is_empty() {
            return Err(Error::Parameter("gather with no ids".into()));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    op: "gather",
                    index: id,
                    limit: rows,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
                frozen,
            },
            out,
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of nothing".into()))?;
        let (r, _) = self.check_2d("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.check_2d("concat_cols", p)?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.check_2d("slice_cols", x)?;
        if start >= end || end > c {
            return Err(Error::Index {
                op: "slice_cols",
                index: end,
                limit: c,
            });
        }
        let xv = self.value(x);
        let data = (0..r)
            .flat_map(|i| xv.row(i)[start..end].iter().copied())
            .collect();
        let out = Tensor::new(&[r, end - start], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start }, out, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of nothing".into()))?;
        let (_, c) = self.check_2d("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.check_2d("concat_rows", p)?;
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, rg))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.check_2d("slice_rows", x)?;
        if start >= end || end > r {
            return Err(Error::Index {
                op: "slice_rows",
                index: end,
                limit: r,
            });
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let out = Tensor::new(&[end - start, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows { x, start }, out, rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    /// Cosine similarity of two equally sized tensors viewed as flat vectors.
    /// The norm product is floored at `eps`, so zero vectors score 0, and the
    /// result is clamped to `[-1, 1]`.
    pub fn cosine(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        if uv.numel() != vv.numel() {
            return Err(Error::dim("cosine", uv.shape(), vv.shape()));
        }
        let dot: f64 = uv.data().iter().zip(vv.data()).map(|(a, b)| a * b).sum();
        let nu = uv.norm();
        let nv = vv.norm();
        let denom = (nu * nv).max(eps);
        let s = (dot / denom).clamp(-1.0, 1.0);
        let rg = self.rg(u) || self.rg(v);
        Ok(self.push(
            Op::Cosine {
                u,
                v,
                dot,
                nu,
                nv,
                denom,
            },
            Tensor::scalar(s),
            rg,
        ))
    }

    /// Runs the reverse sweep from a one-element `loss` and returns the
    /// gradients of every parameter and input leaf it reaches. Parameters
    /// that are reachable but unaffected get an explicit zero gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not a node of this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let factor = if node.op.kind().is_some() && node.op.kind() == self.fault {
                1.5
            } else {
                1.0
            };
            let emit = |grads: &mut Vec<Option<Tensor>>, v: Var, mut t: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                if factor != 1.0 {
                    t.data_mut().iter_mut().for_each(|x| *x *= factor);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let val = |v: Var| self.value(v);
            match &node.op {
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let da = kernels::matmul_nt(g.data(), bv.data(), m, nn, k);
                    let db = kernels::matmul_tn(av.data(), g.data(), m, k, nn);
                    emit(&mut grads, *a, Tensor::new(&[m, k], da)?);
                    emit(&mut grads, *b, Tensor::new(&[k, nn], db)?);
                }
                Op::Transpose(x) => {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let t = kernels::transpose(g.data(), r, c);
                    emit(&mut grads, *x, Tensor::new(&[c, r], t)?);
                }
                Op::Add(a, b) => {
                    emit(&mut grads, *a, g.clone());
                    emit(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.data().iter().map(|x| -x).collect();
                    emit(&mut grads, *a, g.clone());
                    emit(&mut grads, *b, Tensor::new(g.shape(), neg)?);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    emit(&mut grads, *a, Tensor::new(g.shape(), da)?);
                    emit(&mut grads, *b, Tensor::new(g.shape(), db)?);
                }
                Op::AddRow(x, bias) => {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let bshape = val(*bias).shape().to_vec();
                    emit(&mut grads, *bias, Tensor::new(&bshape, db)?);
                    emit(&mut grads, *x, g);
                }
                Op::Scale(x, c) => {
                    let d = g.data().iter().map(|v| v * c).collect();
                    emit(&mut grads, *x, Tensor::new(g.shape(), d)?);
                }
                Op::AddScalar(x) => emit(&mut grads, *x, g),
                Op::Relu(x) => {
                    let xv = val(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, a)| if *a > 0.0 { *gv } else { 0.0 })
                        .collect();
                    emit(&mut grads, *x, Tensor::new(g.shape(), d)?);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().expect("value");
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    emit(&mut grads, *x, Tensor::new(g.shape(), d)?);
                }
                Op::Tanh(x) => {
                    let y = node.value.as_ref().expect("value");
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, t)| gv * (1.0 - t * t))
                        .collect();
                    emit(&mut grads, *x, Tensor::new(g.shape(), d)?);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("value");
                    let c = y.cols();
                    let mut d = vec![0.0; y.numel()];
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks(c)
                        .zip(g.data().chunks(c))
                        .zip(d.chunks_mut(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    emit(&mut grads, *x, Tensor::new(y.shape(), d)?);
                }
                Op::GroupSoftmax(x, groups) => {
                    let y = node.value.as_ref().expect("value");
                    let c = y.cols();
                    let dd = c / groups;
                    let mut d = vec![0.0; y.numel()];
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks(c)
                        .zip(g.data().chunks(c))
                        .zip(d.chunks_mut(c))
                    {
                        for j in 0..dd {
                            let dot: f64 =
                                (0..*groups).map(|k| yr[k * dd + j] * gr[k * dd + j]).sum();
                            for k in 0..*groups {
                                let idx = k * dd + j;
                                dr[idx] = yr[idx] * (gr[idx] - dot);
                            }
                        }
                    }
                    emit(&mut grads, *x, Tensor::new(y.shape(), d)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    xhat,
                    inv_std,
                    bias,
                } => {
                    let gv = val(*gain);
                    let d = gv.numel();
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    let mut dx = vec![0.0; g.numel()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                            let dh = gr[j] * gv.data()[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv.data()[j];
                            dx[r * d + j] = is * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                        }
                    }
                    let gshape = gv.shape().to_vec();
                    let bshape = val(*bias).shape().to_vec();
                    emit(&mut grads, *gain, Tensor::new(&gshape, dg)?);
                    emit(&mut grads, *bias, Tensor::new(&bshape, db)?);
                    emit(&mut grads, *x, Tensor::new(g.shape(), dx)?);
                }
                Op::Dropout { x, scale } => {
                    let d = g.data().iter().zip(scale).map(|(a, s)| a * s).collect();
                    emit(&mut grads, *x, Tensor::new(g.shape(), d)?);
                }
                Op::Gather { table, ids, frozen } => {
                    let tv = val(*table);
                    let dcols = tv.cols();
                    let mut dt = vec![0.0; tv.numel()];
                    for (t, &id) in ids.iter().enumerate() {
                        if Some(id) == *frozen {
                            continue;
                        }
                        let src = &g.data()[t * dcols..(t + 1) * dcols];
                        for (acc, v) in dt[id * dcols..(id + 1) * dcols].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                    let shape = tv.shape().to_vec();
                    emit(&mut grads, *table, Tensor::new(&shape, dt)?);
                }
                Op::ConcatCols(parts) => {
                    let r = g.shape()[0];
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let d = (0..r)
                            .flat_map(|i| {
                                g.data()[i * total + offset..i * total + offset + w]
                                    .iter()
                                    .copied()
                            })
                            .collect();
                        emit(&mut grads, p, Tensor::new(&[r, w], d)?);
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (r, c) = (xv.shape()[0], xv.shape()[1]);
                    let w = g.cols();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + w]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    emit(&mut grads, *x, Tensor::new(&[r, c], d)?);
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pr = val(p).shape()[0];
                        let d = g.data()[offset * c..(offset + pr) * c].to_vec();
                        emit(&mut grads, p, Tensor::new(&[pr, c], d)?);
                        offset += pr;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let c = xv.cols();
                    let mut d = vec![0.0; xv.numel()];
                    d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    let shape = xv.shape().to_vec();
                    emit(&mut grads, *x, Tensor::new(&shape, d)?);
                }
                Op::Sum(x) => {
                    let shape = val(*x).shape().to_vec();
                    emit(&mut grads, *x, Tensor::full(&shape, g.item()));
                }
                Op::Cosine {
                    u,
                    v,
                    dot,
                    nu,
                    nv,
                    denom,
                } => {
                    let gs = g.item();
                    let (uv, vv) = (val(*u), val(*v));
                    // d(dot/denom): denom = nu*nv unless floored, in which case it is constant.
                    let floored = nu * nv < *denom;
                    let du = uv
                        .data()
                        .iter()
                        .zip(vv.data())
                        .map(|(a, b)| {
                            let mut d = b / denom;
                            if !floored && *nu > 0.0 {
                                d -= dot / (denom * denom) * nv * a / nu;
                            }
                            gs * d
                        })
                        .collect();
                    let dv = vv
                        .data()
                        .iter()
                        .zip(uv.data())
                        .map(|(b, a)| {
                            let mut d = a / denom;
                            if !floored && *nv > 0.0 {
                                d -= dot / (denom * denom) * nu * b / nv;
                            }
                            gs * d
                        })
                        .collect();
                    let (us, vs) = (uv.shape().to_vec(), vv.shape().to_vec());
                    emit(&mut grads, *u, Tensor::new(&us, du)?);
                    emit(&mut grads, *v, Tensor::new(&vs, dv)?);
                }
            }
        }
        Ok(out)
    }
}
