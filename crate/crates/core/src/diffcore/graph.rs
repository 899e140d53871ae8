//! Define-by-run reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an append-only arena of nodes. Each node owns its value,
//! an optional gradient slot, and the operation that produced it. Because
//! parents are always pushed before children, reverse index order is a valid
//! topological order for the backward sweep.
//!
//! Nodes created from constants (or from operations on constants only) are
//! untracked: the backward pass never visits them, which keeps input
//! projections of fixed features cheap.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: ArrayD<f64> },
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize, end: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Slice { .. } => "slice",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
    tracked: bool,
}

/// Epsilon added to the variance in [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: ArrayD<f64>) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Result<Var> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn push_leaf(&mut self, value: ArrayD<f64>, tracked: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        let value = value.as_standard_layout().into_owned();
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Scalar value of a shape-`[]` (or single element) node.
    pub fn item(&self, v: Var) -> f64 {
        let value = &self.nodes[v.0].value;
        debug_assert_eq!(value.len(), 1);
        value.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>) -> Result<Var> {
        check_finite(op.name(), &value)?;
        let tracked = self.parents(&op).iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale(x, _)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::LogSigmoid(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Slice { x, .. } => vec![*x],
        }
    }

    // ----- elementwise with broadcasting -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).mapv(|v| v * factor);
        self.push(Op::Scale(x, factor), out)
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ArrayD<f64>> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| Error::Shape {
            op,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })?;
        if let (Some(x), Some(y)) = (av.as_slice(), bv.as_slice()) {
            // Equal shapes, or a rhs that repeats along the leading axes.
            if av.shape() == bv.shape() {
                let out: Vec<f64> = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
                return Ok(ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap());
            }
            if av.shape() == shape.as_slice() && !y.is_empty() && av.shape().ends_with(bv.shape()) {
                let mut out = Vec::with_capacity(x.len());
                for row in x.chunks_exact(y.len()) {
                    out.extend(row.iter().zip(y).map(|(&p, &q)| f(p, q)));
                }
                return Ok(ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap());
            }
        }
        let dim = IxDyn(&shape);
        let (ab, bb) = (av.broadcast(dim.clone()).unwrap(), bv.broadcast(dim).unwrap());
        let mut out = ArrayD::zeros(IxDyn(&shape));
        ndarray::Zip::from(&mut out)
            .and(&ab)
            .and(&bb)
            .for_each(|o, &x, &y| *o = f(x, y));
        Ok(out)
    }

    // ----- linear algebra -----

    /// Matrix product over the last two axes. Supports `[m,k]@[k,n]`,
    /// batched `[b,m,k]@[b,k,n]`, and `[b,m,k]@[k,n]` with a shared rhs.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || Error::Shape {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        let out = match (av.ndim(), bv.ndim()) {
            (2, 2) => {
                let (x, y) = (as2(av), as2(bv));
                if x.ncols() != y.nrows() {
                    return Err(err());
                }
                x.dot(&y).into_dyn()
            }
            (3, 2) => {
                let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let y = as2(bv);
                if k != y.nrows() {
                    return Err(err());
                }
                let x = av.view().into_shape_with_order((bsz * m, k)).unwrap();
                x.dot(&y)
                    .into_shape_with_order(IxDyn(&[bsz, m, y.ncols()]))
                    .unwrap()
            }
            (3, 3) => {
                let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let (bsz2, k2, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
                if bsz != bsz2 || k != k2 {
                    return Err(err());
                }
                let x = av.view().into_dimensionality::<Ix3>().unwrap();
                let y = bv.view().into_dimensionality::<Ix3>().unwrap();
                let mut out = ndarray::Array3::<f64>::zeros((bsz, m, n));
                for i in 0..bsz {
                    general_mat_mul(
                        1.0,
                        &x.index_axis(Axis(0), i),
                        &y.index_axis(Axis(0), i),
                        0.0,
                        &mut out.index_axis_mut(Axis(0), i),
                    );
                }
                out.into_dyn()
            }
            _ => return Err(err()),
        };
        self.push(Op::MatMul(a, b), out)
    }

    // ----- structural -----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero arrays"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        for p in &parts[1..] {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).map_err(|_| Error::Shape {
            op: "concat",
            lhs: base.clone(),
            rhs: base,
        })?;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            out.as_standard_layout().into_owned(),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.push(Op::Reshape(x), out)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut seen = vec![false; v.ndim()];
        let valid = perm.len() == v.ndim()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Shape {
                op: "permute",
                lhs: v.shape().to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let out = v
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            out,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(x, &perm)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() || start > end || end > v.shape()[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: v.shape().to_vec(),
                rhs: vec![axis, start, end],
            });
        }
        let out = v
            .slice_axis(Axis(axis), Slice::from(start..end))
            .as_standard_layout()
            .into_owned();
        self.push(
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            out,
        )
    }

    // ----- normalisation -----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("softmax", v, axis)?;
        let mut out = v.clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let max = lane.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
            lane.mapv_inplace(|e| (e - max).exp());
            let total = lane.sum();
            lane.mapv_inplace(|e| e / total);
        }
        self.push(Op::Softmax { x, axis }, out)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("log_softmax", v, axis)?;
        let mut out = v.clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let max = lane.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
            let lse = max + lane.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            lane.mapv_inplace(|e| e - lse);
        }
        self.push(Op::LogSoftmax { x, axis }, out)
    }

    /// Normalises the last axis to zero mean and unit variance, without
    /// affine terms. A constant lane maps to zeros.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let last = v.ndim().checked_sub(1).ok_or_else(|| Error::Shape {
            op: "layer_norm",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut out = v.clone();
        let mut inv_std = Vec::with_capacity(v.len() / v.shape()[last].max(1));
        for mut lane in out.lanes_mut(Axis(last)) {
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            lane.mapv_inplace(|e| (e - mean) * r);
            inv_std.push(r);
        }
        let mut stat_shape = v.shape().to_vec();
        stat_shape[last] = 1;
        let inv_std = ArrayD::from_shape_vec(IxDyn(&stat_shape), inv_std).unwrap();
        self.push(Op::LayerNorm { x, inv_std }, out)
    }

    // ----- pointwise -----

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(|e| e.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    /// `log(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(log_sigmoid);
        self.push(Op::LogSigmoid(x), out)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(f64::ln);
        self.push(Op::Log(x), out)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(f64::exp);
        self.push(Op::Exp(x), out)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(f64::abs);
        self.push(Op::Abs(x), out)
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        self.push(Op::Sum(x), out)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::invalid("mean of an empty array"));
        }
        let out = ArrayD::from_elem(IxDyn(&[]), v.sum() / v.len() as f64);
        self.push(Op::Mean(x), out)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("sum_axis", v, axis)?;
        let out = v.sum_axis(Axis(axis));
        self.push(Op::SumAxis { x, axis }, out)
    }

    // ----- reverse sweep -----

    /// Populates gradients of every tracked node reachable from `loss`.
    /// Existing gradients are accumulated into; call [`Graph::zero_grad`]
    /// first to recompute from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if !shape.is_empty() {
            return Err(Error::NotScalar(shape));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.accumulate(loss, ArrayD::from_elem(IxDyn(&[]), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            check_finite("backward", &g)?;
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn accumulate(&mut self, v: Var, g: ArrayD<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.tracked {
            return;
        }
        debug_assert_eq!(node.value.shape(), g.shape(), "gradient shape for {:?}", node.op);
        match &mut node.grad {
            Some(existing) => *existing += &g,
            None => node.grad = Some(g),
        }
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &ArrayD<f64>) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let gv = unbroadcast(g, self.shape(v));
                        self.accumulate(v, gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let ga = unbroadcast(g, self.shape(*a));
                    self.accumulate(*a, ga);
                }
                if self.wants(*b) {
                    let gb = unbroadcast(g, self.shape(*b));
                    self.accumulate(*b, -gb);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let prod = mul_broadcast(g, self.value(b));
                    let ga = unbroadcast(&prod, self.shape(a));
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let prod = mul_broadcast(g, self.value(a));
                    let gb = unbroadcast(&prod, self.shape(b));
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(x, factor) => {
                let gx = g.mapv(|e| e * factor);
                self.accumulate(*x, gx);
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g),
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        let gp = g
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .as_standard_layout()
                            .into_owned();
                        self.accumulate(*p, gp);
                    }
                    offset += len;
                }
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let gy = g * y;
                let dot = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                let gx = &gy - &(y * &dot);
                self.accumulate(*x, gx);
            }
            Op::LogSoftmax { x, axis } => {
                let y = &self.nodes[i].value;
                let total = g.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                let p = y.mapv(f64::exp);
                let gx = g - &(&p * &total);
                self.accumulate(*x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &self.nodes[i].value;
                let last = Axis(y.ndim() - 1);
                let n = y.shape()[y.ndim() - 1] as f64;
                let mean_g = g.sum_axis(last).insert_axis(last) / n;
                let mean_gy = (g * y).sum_axis(last).insert_axis(last) / n;
                let gx = &(&(g - &mean_g) - &(y * &mean_gy)) * inv_std;
                self.accumulate(*x, gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(xv).for_each(|gv, &e| {
                    if e <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.accumulate(*x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let gx = g * &y.mapv(|s| s * (1.0 - s));
                self.accumulate(*x, gx);
            }
            Op::LogSigmoid(x) => {
                let gx = g * &self.value(*x).mapv(|e| sigmoid(-e));
                self.accumulate(*x, gx);
            }
            Op::Log(x) => {
                let gx = g / self.value(*x);
                self.accumulate(*x, gx);
            }
            Op::Exp(x) => {
                let gx = g * &self.nodes[i].value;
                self.accumulate(*x, gx);
            }
            Op::Abs(x) => {
                let gx = g * &self.value(*x).mapv(|e| {
                    if e > 0.0 {
                        1.0
                    } else if e < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(*x, gx);
            }
            Op::Sum(x) => {
                let s = g.iter().next().copied().unwrap_or(0.0);
                let gx = ArrayD::from_elem(self.shape(*x), s);
                self.accumulate(*x, gx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let s = g.iter().next().copied().unwrap_or(0.0) / n;
                let gx = ArrayD::from_elem(self.shape(*x), s);
                self.accumulate(*x, gx);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let gx = g
                    .view()
                    .insert_axis(Axis(*axis))
                    .broadcast(IxDyn(&shape))
                    .unwrap()
                    .to_owned();
                self.accumulate(*x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                let gx = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .unwrap();
                self.accumulate(*x, gx);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gx = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned();
                self.accumulate(*x, gx);
            }
            Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let mut gx = ArrayD::zeros(self.shape(*x));
                gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*end))
                    .assign(g);
                self.accumulate(*x, gx);
            }
        }
    }

    fn backprop_matmul(&mut self, a: Var, b: Var, g: &ArrayD<f64>) {
        let (want_a, want_b) = (self.wants(a), self.wants(b));
        let (av, bv) = (self.value(a), self.value(b));
        match (av.ndim(), bv.ndim()) {
            (2, 2) => {
                let (x, y, gg) = (as2(av), as2(bv), as2(g));
                let ga = want_a.then(|| gg.dot(&y.t()).into_dyn());
                let gb = want_b.then(|| x.t().dot(&gg).into_dyn());
                self.accumulate_opt(a, ga);
                self.accumulate_opt(b, gb);
            }
            (3, 2) => {
                let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[1];
                let x = av.view().into_shape_with_order((bsz * m, k)).unwrap();
                let gg = g.view().into_shape_with_order((bsz * m, n)).unwrap();
                let y = as2(bv);
                let ga = want_a.then(|| {
                    gg.dot(&y.t())
                        .into_shape_with_order(IxDyn(&[bsz, m, k]))
                        .unwrap()
                });
                let gb = want_b.then(|| x.t().dot(&gg).into_dyn());
                self.accumulate_opt(a, ga);
                self.accumulate_opt(b, gb);
            }
            (3, 3) => {
                let x = av.view().into_dimensionality::<Ix3>().unwrap();
                let y = bv.view().into_dimensionality::<Ix3>().unwrap();
                let gg = g.view().into_dimensionality::<Ix3>().unwrap();
                let ga = want_a.then(|| {
                    let mut out = ndarray::Array3::<f64>::zeros(x.raw_dim());
                    for i in 0..x.shape()[0] {
                        mm_into(
                            gg.index_axis(Axis(0), i),
                            y.index_axis(Axis(0), i).t(),
                            out.index_axis_mut(Axis(0), i),
                        );
                    }
                    out.into_dyn()
                });
                let gb = want_b.then(|| {
                    let mut out = ndarray::Array3::<f64>::zeros(y.raw_dim());
                    for i in 0..y.shape()[0] {
                        mm_into(
                            x.index_axis(Axis(0), i).t(),
                            gg.index_axis(Axis(0), i),
                            out.index_axis_mut(Axis(0), i),
                        );
                    }
                    out.into_dyn()
                });
                self.accumulate_opt(a, ga);
                self.accumulate_opt(b, gb);
            }
            _ => unreachable!("matmul shapes validated in forward"),
        }
    }

    fn accumulate_opt(&mut self, v: Var, g: Option<ArrayD<f64>>) {
        if let Some(g) = g {
            self.accumulate(v, g);
        }
    }
}

fn mm_into(a: ArrayView2<f64>, b: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().unwrap()
}

fn check_finite(op: &'static str, value: &ArrayD<f64>) -> Result<()> {
    let finite = match value.as_slice_memory_order() {
        Some(x) => x.iter().all(|v| v.is_finite()),
        None => value.iter().all(|v| v.is_finite()),
    };
    if finite {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn check_axis(op: &'static str, v: &ArrayD<f64>, axis: usize) -> Result<()> {
    if axis < v.ndim() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: v.shape().to_vec(),
            rhs: vec![axis],
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn mul_broadcast(g: &ArrayD<f64>, other: &ArrayD<f64>) -> ArrayD<f64> {
    let other = other.broadcast(g.raw_dim()).unwrap();
    g * &other
}

/// Sums `g` down to `shape`, undoing a broadcast.
fn unbroadcast(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if g.shape() == shape {
        return g.clone();
    }
    if let Some(x) = g.as_slice() {
        let n: usize = shape.iter().product();
        if n > 0 && shape.len() <= g.ndim() && g.shape().ends_with(shape) {
            let mut out = vec![0.0; n];
            for row in x.chunks_exact(n) {
                out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
            }
            return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        }
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[i] != 1 {
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    out
}
