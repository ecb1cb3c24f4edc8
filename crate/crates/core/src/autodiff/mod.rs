//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive application in topological order as the
//! forward pass runs. [`Tape::backward`] replays the record in reverse,
//! accumulating gradients (sum semantics on reuse) into every leaf created
//! with `requires_grad = true`. Everything is 64-bit and single-threaded;
//! identical inputs produce bit-identical gradients.
//!
//! Broadcast rules for the binary elementwise primitives (`add`, `sub`,
//! `mul`, `div`): operands must have identical shapes, or one operand is a
//! scalar (`[1]`), or one operand is a 1-D vector matching the other's last
//! axis (row broadcast). Nothing fancier is supported.

pub mod check;

pub use check::{finite_diff_check, FiniteDiffReport};

use crate::error::{Error, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

/// Handle to a value on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    /// Softmax whose blocked positions carry exactly zero output weight.
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    GatherRows {
        src: Var,
        indices: Vec<usize>,
    },
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    SliceAxis {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    L1Dist(Var, Var),
    SqL2Dist(Var, Var),
    L2Norm(Var),
    Dot(Var, Var),
    CrossEntropyMean {
        logits: Var,
        targets: Vec<usize>,
    },
    Conv1dSame {
        x: Var,
        w: Var,
        b: Var,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Wengert tape: the computation record plus node values.
///
/// Nodes are appended in topological order by construction, so the backward
/// sweep is a single reverse iteration that visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.by_node[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.by_node[v.0].take()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    LhsRow,
    RhsRow,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn classify_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if numel(rhs) == 1 {
        return Ok(Broadcast::RhsScalar);
    }
    if numel(lhs) == 1 {
        return Ok(Broadcast::LhsScalar);
    }
    if rhs.len() == 1 && lhs.last() == Some(&rhs[0]) {
        return Ok(Broadcast::RhsRow);
    }
    if lhs.len() == 1 && rhs.last() == Some(&lhs[0]) {
        return Ok(Broadcast::LhsRow);
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn slice_of(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice().expect("tape arrays are contiguous row-major")
}

/// Applies `f(lhs_elem, rhs_elem)` elementwise under the supported broadcasts,
/// returning a contiguous array shaped like the wider operand.
fn apply_binary(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    kind: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let (wide, narrow, flipped) = match kind {
        Broadcast::Same | Broadcast::RhsScalar | Broadcast::RhsRow => (a, b, false),
        Broadcast::LhsScalar | Broadcast::LhsRow => (b, a, true),
    };
    let ws = slice_of(wide);
    let ns = slice_of(narrow);
    let mut out = Vec::with_capacity(ws.len());
    match kind {
        Broadcast::Same => {
            for (x, y) in ws.iter().zip(ns) {
                out.push(f(*x, *y));
            }
        }
        Broadcast::RhsScalar | Broadcast::LhsScalar => {
            let c = ns[0];
            for x in ws {
                if flipped {
                    out.push(f(c, *x));
                } else {
                    out.push(f(*x, c));
                }
            }
        }
        Broadcast::RhsRow | Broadcast::LhsRow => {
            let n = ns.len();
            for (i, x) in ws.iter().enumerate() {
                let y = ns[i % n];
                if flipped {
                    out.push(f(y, *x));
                } else {
                    out.push(f(*x, y));
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(wide.shape()), out).expect("shape preserved")
}

/// Reduces `grad` (shaped like the binary op's output) back to the shape of
/// the narrow operand for the given broadcast kind.
fn reduce_for_broadcast(grad: &ArrayD<f64>, kind_is_scalar: bool, target: &[usize]) -> ArrayD<f64> {
    let gs = slice_of(grad);
    if kind_is_scalar {
        let s: f64 = gs.iter().sum();
        return ArrayD::from_shape_vec(IxDyn(target), vec![s]).expect("scalar");
    }
    let n = target[0];
    let mut acc = vec![0.0; n];
    for (i, g) in gs.iter().enumerate() {
        acc[i % n] += *g;
    }
    ArrayD::from_shape_vec(IxDyn(target), acc).expect("row")
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("2-D operand required")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input that will not receive a gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_shape_vec(IxDyn(&[1]), vec![value]).unwrap())
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reads a scalar (`numel == 1`) value off the tape.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        slice_of(&self.nodes[v.0].value)[0]
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.as_slice().is_some(), "non-contiguous node value");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Primitives ──────────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, n) = (sa[0], sb[1]);
        let mut out = Array2::<f64>::zeros((m, n));
        general_mat_mul(
            1.0,
            &as2(self.value(a)),
            &as2(self.value(b)),
            0.0,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out.into_dyn(), Op::Matmul(a, b), rg))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let kind = classify_broadcast(op_name, self.shape(a), self.shape(b))?;
        let out = apply_binary(self.value(a), self.value(b), kind, f);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise division. The caller is responsible for keeping the
    /// denominator away from zero (guard with an epsilon where needed).
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::MulScalar(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(min) = self
            .value(a)
            .iter()
            .cloned()
            .fold(None::<f64>, |m, x| Some(m.map_or(x, |m| m.min(x))))
        {
            if min <= 0.0 {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {min}"),
                });
            }
        }
        let out = self.value(a).mapv(f64::ln);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut lane in out.lanes_mut(Axis(out.ndim() - 1)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in lane.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in lane.iter_mut() {
                *x /= sum;
            }
        }
        let out = out.as_standard_layout().to_owned();
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Softmax over the last axis where blocked positions (mask 0) receive
    /// exactly zero weight. Every lane must keep at least one position.
    pub fn masked_softmax(&mut self, a: Var, mask: &ArrayD<f64>) -> Result<Var> {
        if mask.shape() != self.shape(a) {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape(a).to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let last = Axis(out.ndim() - 1);
        for (mut lane, mlane) in out.lanes_mut(last).into_iter().zip(mask.lanes(last)) {
            let max = lane
                .iter()
                .zip(&mlane)
                .filter(|(_, m)| **m != 0.0)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Domain {
                    op: "masked_softmax",
                    detail: "a softmax lane has every position blocked".into(),
                });
            }
            let mut sum = 0.0;
            for (x, m) in lane.iter_mut().zip(&mlane) {
                *x = if *m != 0.0 { (*x - max).exp() } else { 0.0 };
                sum += *x;
            }
            for x in lane.iter_mut() {
                *x /= sum;
            }
        }
        let out = out.as_standard_layout().to_owned();
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::MaskedSoftmax(a), rg))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let gs = slice_of(self.value(gamma)).to_vec();
        let bs = slice_of(self.value(beta)).to_vec();
        let mut out = self.value(x).clone();
        for mut lane in out.lanes_mut(Axis(out.ndim() - 1)) {
            let mean = lane.iter().sum::<f64>() / n as f64;
            let var = lane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, x) in lane.iter_mut().enumerate() {
                *x = (*x - mean) * inv * gs[i] + bs[i];
            }
        }
        let out = out.as_standard_layout().to_owned();
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    /// Row lookup: `out[i, :] = src[indices[i], :]`.
    ///
    /// Serves both embedding lookup (src is a `[V, D]` table) and the length
    /// regulator (src is a phoneme-state matrix, indices carry repeats). The
    /// backward pass scatter-adds into a dense gradient for `src`.
    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 2 {
            return Err(Error::contract("gather_rows expects a 2-D source"));
        }
        if indices.is_empty() {
            return Err(Error::contract("gather_rows needs at least one index"));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let src_s = slice_of(self.value(src));
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src_s[i * d..(i + 1) * d]);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[indices.len(), d]), out).unwrap();
        let rg = self.any_grad(&[src]);
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero parts"));
        }
        let views: Vec<ArrayViewD<'_, f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).map_err(|e| {
            Error::contract(format!("concat along axis {axis} failed: {e}"))
        })?;
        let out = out.as_standard_layout().to_owned();
        let rg = self.any_grad(parts);
        Ok(self.push(
            out,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous sub-range `[start, end)` along one axis.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::contract(format!(
                "slice [{start}, {end}) on axis {axis} invalid for shape {s:?}"
            )));
        }
        let out = self
            .value(x)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .as_standard_layout()
            .to_owned();
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceAxis { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out =
            ArrayD::from_shape_vec(IxDyn(shape), slice_of(self.value(x)).to_vec()).unwrap();
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::contract("transpose expects a 2-D input"));
        }
        let out = as2(self.value(x)).t().as_standard_layout().to_owned();
        let rg = self.any_grad(&[x]);
        Ok(self.push(out.into_dyn(), Op::Transpose(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = slice_of(self.value(x)).iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![s]).unwrap(),
            Op::SumAll(x),
            rg,
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = slice_of(self.value(x)).iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![s / n]).unwrap(),
            Op::MeanAll(x),
            rg,
        )
    }

    /// Sum of absolute elementwise differences (operands must match in shape).
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pair_reduce("l1_distance", a, b, |xs, ys| {
            xs.iter().zip(ys).map(|(x, y)| (x - y).abs()).sum()
        }, Op::L1Dist)
    }

    /// Sum of squared elementwise differences.
    pub fn sq_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pair_reduce("sq_l2_distance", a, b, |xs, ys| {
            xs.iter().zip(ys).map(|(x, y)| (x - y) * (x - y)).sum()
        }, Op::SqL2Dist)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pair_reduce("dot", a, b, |xs, ys| {
            xs.iter().zip(ys).map(|(x, y)| x * y).sum()
        }, Op::Dot)
    }

    fn pair_reduce(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(&[f64], &[f64]) -> f64,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s = f(slice_of(self.value(a)), slice_of(self.value(b)));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![s]).unwrap(),
            make(a, b),
            rg,
        ))
    }

    /// Euclidean norm of the flattened input. The subgradient at the origin
    /// is taken to be zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s: f64 = slice_of(self.value(a)).iter().map(|x| x * x).sum();
        let rg = self.any_grad(&[a]);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![s.sqrt()]).unwrap(),
            Op::L2Norm(a),
            rg,
        )
    }

    /// Mean over positions of `-log softmax(logits)[target]`, computed via
    /// log-sum-exp so a hard zero posterior never produces `-inf`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_mean",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!(
                "target id {bad} outside vocabulary of size {v}"
            )));
        }
        let xs = slice_of(self.value(logits));
        let mut total = 0.0;
        for (l, &t) in targets.iter().enumerate() {
            let row = &xs[l * v..(l + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let mean = total / targets.len() as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![mean]).unwrap(),
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Same-padded 1-D convolution along axis 0.
    ///
    /// `x: [T, c_in]`, `w: [k, c_in, c_out]` with odd `k`, `b: [c_out]`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 3 || sw[0] % 2 == 0 || sw[1] != sx[1] || sb != [sw[2]] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (t, ci, k, co) = (sx[0], sx[1], sw[0], sw[2]);
        let half = k / 2;
        let xs = slice_of(self.value(x));
        let ws = slice_of(self.value(w));
        let bs = slice_of(self.value(b));
        let mut out = vec![0.0; t * co];
        for ti in 0..t {
            for o in 0..co {
                let mut acc = bs[o];
                for dk in 0..k {
                    let src = ti as isize + dk as isize - half as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = &xs[src as usize * ci..(src as usize + 1) * ci];
                    for (i, xv) in xrow.iter().enumerate() {
                        acc += xv * ws[(dk * ci + i) * co + o];
                    }
                }
                out[ti * co + o] = acc;
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[t, co]), out).unwrap();
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv1dSame { x, w, b }, rg))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulates gradients of the scalar `root` into every differentiable
    /// leaf reachable from it. The reverse sweep walks the record once.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { by_node: grads });
        }
        grads[root.0] = Some(ArrayD::from_shape_vec(IxDyn(&[1]), vec![1.0]).unwrap());

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let grad = grads[id].take().unwrap();
            self.propagate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                let gs = g.as_slice_mut().expect("contiguous grad");
                for (a, b) in gs.iter_mut().zip(slice_of(&delta)) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn binary_backward(
        &self,
        grads: &mut [Option<ArrayD<f64>>],
        a: Var,
        b: Var,
        grad: &ArrayD<f64>,
        da: impl Fn(f64, f64, f64) -> f64,
        db: impl Fn(f64, f64, f64) -> f64,
    ) {
        let kind = classify_broadcast("bwd", self.shape(a), self.shape(b)).expect("checked");
        let av = self.value(a);
        let bv = self.value(b);
        if self.nodes[a.0].requires_grad {
            let full = compute_side(grad, av, bv, kind, true, &da);
            let reduced = match kind {
                Broadcast::LhsScalar => reduce_for_broadcast(&full, true, self.shape(a)),
                Broadcast::LhsRow => reduce_for_broadcast(&full, false, self.shape(a)),
                _ => full,
            };
            self.accumulate(grads, a, reduced);
        }
        if self.nodes[b.0].requires_grad {
            let full = compute_side(grad, av, bv, kind, false, &db);
            let reduced = match kind {
                Broadcast::RhsScalar => reduce_for_broadcast(&full, true, self.shape(b)),
                Broadcast::RhsRow => reduce_for_broadcast(&full, false, self.shape(b)),
                _ => full,
            };
            self.accumulate(grads, b, reduced);
        }
    }

    fn propagate(&self, id: usize, grad: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        let out_val = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let g2 = as2(grad);
                if self.nodes[a.0].requires_grad {
                    let mut da = Array2::<f64>::zeros(as2(self.value(*a)).raw_dim());
                    general_mat_mul(1.0, &g2, &as2(self.value(*b)).t(), 0.0, &mut da);
                    self.accumulate(grads, *a, da.into_dyn());
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = Array2::<f64>::zeros(as2(self.value(*b)).raw_dim());
                    general_mat_mul(1.0, &as2(self.value(*a)).t(), &g2, 0.0, &mut db);
                    self.accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::Add(a, b) => {
                self.binary_backward(grads, *a, *b, grad, |g, _, _| g, |g, _, _| g);
            }
            Op::Sub(a, b) => {
                self.binary_backward(grads, *a, *b, grad, |g, _, _| g, |g, _, _| -g);
            }
            Op::Mul(a, b) => {
                self.binary_backward(grads, *a, *b, grad, |g, _, y| g * y, |g, x, _| g * x);
            }
            Op::Div(a, b) => {
                self.binary_backward(
                    grads,
                    *a,
                    *b,
                    grad,
                    |g, _, y| g / y,
                    |g, x, y| -g * x / (y * y),
                );
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, grad.clone()),
            Op::MulScalar(a, c) => self.accumulate(grads, *a, grad.mapv(|g| g * c)),
            Op::Exp(a) => {
                let delta = grad * out_val;
                self.accumulate(grads, *a, delta);
            }
            Op::Log(a) => {
                let delta = grad / self.value(*a);
                self.accumulate(grads, *a, delta);
            }
            Op::Tanh(a) => {
                let delta = grad * &out_val.mapv(|y| 1.0 - y * y);
                self.accumulate(grads, *a, delta);
            }
            Op::Relu(a) => {
                let delta = grad
                    * &self
                        .value(*a)
                        .mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, delta);
            }
            Op::Sigmoid(a) => {
                let delta = grad * &out_val.mapv(|y| y * (1.0 - y));
                self.accumulate(grads, *a, delta);
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                // dX = (dY - sum(dY * Y, last)) * Y; blocked positions have
                // Y = 0 and therefore receive exactly zero gradient.
                let y = out_val;
                let mut delta = grad * y;
                let last = Axis(delta.ndim() - 1);
                for (mut dlane, ylane) in
                    delta.lanes_mut(last).into_iter().zip(y.lanes(last))
                {
                    let s: f64 = dlane.iter().sum();
                    for (d, yv) in dlane.iter_mut().zip(&ylane) {
                        *d -= s * yv;
                    }
                }
                self.accumulate(grads, *a, delta.as_standard_layout().to_owned());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.layer_norm_backward(grads, *x, *gamma, *beta, *eps, grad);
            }
            Op::GatherRows { src, indices } => {
                if self.nodes[src.0].requires_grad {
                    let s = self.shape(*src);
                    let d = s[1];
                    let mut dsrc = vec![0.0; s[0] * d];
                    let gs = slice_of(grad);
                    for (row, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dsrc[i * d + j] += gs[row * d + j];
                        }
                    }
                    self.accumulate(
                        grads,
                        *src,
                        ArrayD::from_shape_vec(IxDyn(s), dsrc).unwrap(),
                    );
                }
            }
            Op::Concat { axis, parts } => {
                let mut offset = 0;
                for p in parts {
                    let extent = self.shape(*p)[*axis];
                    let piece = grad
                        .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + extent))
                        .as_standard_layout()
                        .to_owned();
                    self.accumulate(grads, *p, piece);
                    offset += extent;
                }
            }
            Op::SliceAxis { x, axis, start } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = ArrayD::<f64>::zeros(IxDyn(self.shape(*x)));
                    let extent = grad.shape()[*axis];
                    dx.slice_axis_mut(
                        Axis(*axis),
                        ndarray::Slice::from(*start..*start + extent),
                    )
                    .assign(grad);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x) => {
                let dx =
                    ArrayD::from_shape_vec(IxDyn(self.shape(*x)), slice_of(grad).to_vec())
                        .unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => {
                let dx = as2(grad).t().as_standard_layout().to_owned();
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::SumAll(x) => {
                let g = slice_of(grad)[0];
                self.accumulate(
                    grads,
                    *x,
                    ArrayD::from_elem(IxDyn(self.shape(*x)), g),
                );
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                let g = slice_of(grad)[0] / n;
                self.accumulate(
                    grads,
                    *x,
                    ArrayD::from_elem(IxDyn(self.shape(*x)), g),
                );
            }
            Op::L1Dist(a, b) => {
                let g = slice_of(grad)[0];
                let diff_sign = |x: f64, y: f64| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if self.nodes[a.0].requires_grad {
                    let da = ndarray::Zip::from(self.value(*a))
                        .and(self.value(*b))
                        .map_collect(|&x, &y| g * diff_sign(x, y));
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = ndarray::Zip::from(self.value(*a))
                        .and(self.value(*b))
                        .map_collect(|&x, &y| -g * diff_sign(x, y));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SqL2Dist(a, b) => {
                let g = slice_of(grad)[0];
                if self.nodes[a.0].requires_grad {
                    let da = ndarray::Zip::from(self.value(*a))
                        .and(self.value(*b))
                        .map_collect(|&x, &y| 2.0 * g * (x - y));
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = ndarray::Zip::from(self.value(*a))
                        .and(self.value(*b))
                        .map_collect(|&x, &y| -2.0 * g * (x - y));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::L2Norm(a) => {
                let g = slice_of(grad)[0];
                let norm = slice_of(out_val)[0];
                if norm > 0.0 {
                    let delta = self.value(*a).mapv(|x| g * x / norm);
                    self.accumulate(grads, *a, delta);
                }
            }
            Op::Dot(a, b) => {
                let g = slice_of(grad)[0];
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, self.value(*b).mapv(|y| g * y));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, self.value(*a).mapv(|x| g * x));
                }
            }
            Op::CrossEntropyMean { logits, targets } => {
                if self.nodes[logits.0].requires_grad {
                    let g = slice_of(grad)[0] / targets.len() as f64;
                    let s = self.shape(*logits);
                    let v = s[1];
                    let xs = slice_of(self.value(*logits));
                    let mut dl = vec![0.0; xs.len()];
                    for (l, &t) in targets.iter().enumerate() {
                        let row = &xs[l * v..(l + 1) * v];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - max).exp() / denom;
                            dl[l * v + j] = g * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    self.accumulate(
                        grads,
                        *logits,
                        ArrayD::from_shape_vec(IxDyn(s), dl).unwrap(),
                    );
                }
            }
            Op::Conv1dSame { x, w, b } => {
                self.conv_backward(grads, *x, *w, *b, grad);
            }
        }
    }

    fn layer_norm_backward(
        &self,
        grads: &mut [Option<ArrayD<f64>>],
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        grad: &ArrayD<f64>,
    ) {
        let n = *self.shape(x).last().unwrap();
        let nf = n as f64;
        let gs = slice_of(self.value(gamma));
        let xv = self.value(x);
        let rows = xv.len() / n;
        let xs = slice_of(xv);
        let dy = slice_of(grad);
        let mut dx = vec![0.0; xs.len()];
        let mut dgamma = vec![0.0; n];
        let mut dbeta = vec![0.0; n];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let dyr = &dy[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / nf;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
            let inv = 1.0 / (var + eps).sqrt();
            // xhat, then the two reduction terms of the layer-norm gradient.
            let mut m1 = 0.0; // mean of dxhat
            let mut m2 = 0.0; // mean of dxhat * xhat
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                let dxhat = dyr[j] * gs[j];
                m1 += dxhat;
                m2 += dxhat * xhat;
                dgamma[j] += dyr[j] * xhat;
                dbeta[j] += dyr[j];
            }
            m1 /= nf;
            m2 /= nf;
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                let dxhat = dyr[j] * gs[j];
                dx[r * n + j] = inv * (dxhat - m1 - xhat * m2);
            }
        }
        if self.nodes[x.0].requires_grad {
            self.accumulate(
                grads,
                x,
                ArrayD::from_shape_vec(IxDyn(self.shape(x)), dx).unwrap(),
            );
        }
        if self.nodes[gamma.0].requires_grad {
            self.accumulate(
                grads,
                gamma,
                ArrayD::from_shape_vec(IxDyn(&[n]), dgamma).unwrap(),
            );
        }
        if self.nodes[beta.0].requires_grad {
            self.accumulate(
                grads,
                beta,
                ArrayD::from_shape_vec(IxDyn(&[n]), dbeta).unwrap(),
            );
        }
    }

    fn conv_backward(
        &self,
        grads: &mut [Option<ArrayD<f64>>],
        x: Var,
        w: Var,
        b: Var,
        grad: &ArrayD<f64>,
    ) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (t, ci, k, co) = (sx[0], sx[1], sw[0], sw[2]);
        let half = k / 2;
        let xs = slice_of(self.value(x));
        let ws = slice_of(self.value(w));
        let gs = slice_of(grad);
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let need_b = self.nodes[b.0].requires_grad;
        let mut dx = vec![0.0; t * ci];
        let mut dw = vec![0.0; k * ci * co];
        let mut db = vec![0.0; co];
        for ti in 0..t {
            let grow = &gs[ti * co..(ti + 1) * co];
            if need_b {
                for o in 0..co {
                    db[o] += grow[o];
                }
            }
            for dk in 0..k {
                let src = ti as isize + dk as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let xrow = &xs[src * ci..(src + 1) * ci];
                for i in 0..ci {
                    let wbase = (dk * ci + i) * co;
                    if need_x {
                        let mut acc = 0.0;
                        for o in 0..co {
                            acc += grow[o] * ws[wbase + o];
                        }
                        dx[src * ci + i] += acc;
                    }
                    if need_w {
                        for o in 0..co {
                            dw[wbase + o] += grow[o] * xrow[i];
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, ArrayD::from_shape_vec(IxDyn(&sx), dx).unwrap());
        }
        if need_w {
            self.accumulate(grads, w, ArrayD::from_shape_vec(IxDyn(&sw), dw).unwrap());
        }
        if need_b {
            self.accumulate(grads, b, ArrayD::from_shape_vec(IxDyn(&[co]), db).unwrap());
        }
    }
}

/// Evaluates one side's elementwise gradient contribution at output extent.
///
/// `f(g, x, y)` receives the upstream gradient plus both (broadcast) operand
/// values at that output position.
fn compute_side(
    grad: &ArrayD<f64>,
    av: &ArrayD<f64>,
    bv: &ArrayD<f64>,
    kind: Broadcast,
    _lhs: bool,
    f: &impl Fn(f64, f64, f64) -> f64,
) -> ArrayD<f64> {
    let gs = slice_of(grad);
    let asl = slice_of(av);
    let bsl = slice_of(bv);
    let mut out = Vec::with_capacity(gs.len());
    match kind {
        Broadcast::Same => {
            for ((g, x), y) in gs.iter().zip(asl).zip(bsl) {
                out.push(f(*g, *x, *y));
            }
        }
        Broadcast::RhsScalar => {
            let y = bsl[0];
            for (g, x) in gs.iter().zip(asl) {
                out.push(f(*g, *x, y));
            }
        }
        Broadcast::LhsScalar => {
            let x = asl[0];
            for (g, y) in gs.iter().zip(bsl) {
                out.push(f(*g, x, *y));
            }
        }
        Broadcast::RhsRow => {
            let n = bsl.len();
            for (i, (g, x)) in gs.iter().zip(asl).enumerate() {
                out.push(f(*g, *x, bsl[i % n]));
            }
        }
        Broadcast::LhsRow => {
            let n = asl.len();
            for (i, (g, y)) in gs.iter().zip(bsl).enumerate() {
                out.push(f(*g, asl[i % n], *y));
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(grad.shape()), out).unwrap()
}

/// Cosine similarity of two flattened tensors, built from tape primitives so
/// it is differentiable. The denominator is `max(|a||b|, eps)`: exact (and
/// with the exact gradient) whenever the norm product exceeds `eps`, and
/// finite at zero vectors. The max comes from `eps + relu(|a||b| - eps)`.
pub fn cosine_similarity(tape: &mut Tape, a: Var, b: Var, eps: f64) -> Result<Var> {
    let num = tape.dot(a, b)?;
    let na = tape.l2_norm(a);
    let nb = tape.l2_norm(b);
    let prod = tape.mul(na, nb)?;
    let shifted = tape.add_scalar(prod, -eps);
    let clamped = tape.relu(shifted);
    let denom = tape.add_scalar(clamped, eps);
    tape.div(num, denom)
}
