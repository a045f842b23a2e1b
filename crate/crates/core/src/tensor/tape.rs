//! Wengert tape: straight-line recording of primitive ops and reverse replay.
//!
//! A tape lives for one forward/backward pass. Leaves may borrow tensor storage
//! (parameters), so the borrow checker keeps them immutable while recorded.

use std::borrow::Cow;

use super::array::{check_shape, numel, Tensor};
use super::error::{Result, TensorError};
use super::kernels::{self, axis_split, ConvGeom};
use super::real::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module (scan, symmetric aggregation).
pub trait BackwardRule<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in input order. `needs[i]` is false when input
    /// `i` does not require a gradient; such slots may be `None`.
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Gelu,
    Square,
    Sqrt,
    Relu,
}

/// Every elementwise primitive, binary and unary, addressed uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Binary(BinaryKind),
    Unary(UnaryKind),
}

enum Op<T: Real> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Shift {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Flip {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    Unfold {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
        offsets: Vec<(isize, isize)>,
    },
    PatchSum {
        weights: Var,
        patches: Var,
        p: usize,
        k: usize,
        c: usize,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule<T>>,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the rank of `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = kernels::strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` over a broadcast pair.
fn for_each_pair(a_shape: &[usize], b_shape: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if a_shape == b_shape {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let na = numel(a_shape);
    let nb = numel(b_shape);
    if nb == 1 {
        (0..n).for_each(|i| f(i, i % na, 0));
        return;
    }
    if na == 1 {
        (0..n).for_each(|i| f(i, 0, i % nb));
        return;
    }
    let sa = broadcast_strides(a_shape, out);
    let sb = broadcast_strides(b_shape, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn unary_forward<T: Real>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Gelu => {
            let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
            T::lit(0.5) * x * (T::one() + u.tanh())
        }
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Relu => x.max(T::zero()),
    }
}

fn unary_derivative<T: Real>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Neg => -T::one(),
        UnaryKind::Exp => y,
        UnaryKind::Log => T::one() / x,
        UnaryKind::Tanh => T::one() - y * y,
        UnaryKind::Sigmoid => y * (T::one() - y),
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Gelu => {
            let c = T::lit(GELU_C);
            let k = T::lit(GELU_K);
            let t = (c * (x + k * x * x * x)).tanh();
            let half = T::lit(0.5);
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
        }
        UnaryKind::Square => T::lit(2.0) * x,
        UnaryKind::Sqrt => T::lit(0.5) / y,
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
    }

    fn node(&self, v: Var) -> Result<&Node<'a, T>> {
        self.nodes.get(v.0).ok_or(TensorError::ForeignVar(v.0))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("recorded shapes are consistent")
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        ensure_finite(name, &value)?;
        Ok(self.push(Cow::Owned(value), shape, requires_grad, op))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor by reference; it becomes a gradient leaf iff it requires grad.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records borrowed storage as a gradient leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), true, Op::Leaf)
    }

    /// Records an owned tensor, keeping its `requires_grad` flag.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, rg, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, false, Op::Leaf)
    }

    pub fn full(&mut self, shape: &[usize], value: T) -> Var {
        self.constant(Tensor::full(shape.to_vec(), value))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn elementwise(&mut self, op: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElemOp::Binary(kind), Some(b)) => self.binary(kind, a, b),
            (ElemOp::Unary(kind), None) => self.unary(kind, a),
            (op, _) => Err(TensorError::UnsupportedOp(format!(
                "{op:?} with {} operand(s)",
                1 + b.is_some() as usize
            ))),
        }
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let out_shape = broadcast_shape(&na.shape, &nb.shape).ok_or_else(|| TensorError::ShapeMismatch {
            op: "binary",
            lhs: na.shape.clone(),
            rhs: nb.shape.clone(),
        })?;
        let mut out = vec![T::zero(); numel(&out_shape)];
        let (av, bv) = (&na.value, &nb.value);
        for_each_pair(&na.shape, &nb.shape, &out_shape, |i, ia, ib| {
            let (x, y) = (av[ia], bv[ib]);
            out[i] = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
        });
        let rg = self.any_grad(&[a, b]);
        self.push_checked("binary", out, out_shape, rg, Op::Binary { kind, a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let out: Vec<T> = n.value.iter().map(|&v| unary_forward(kind, v)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push_checked("unary", out, shape, rg, Op::Unary { kind, x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let n = self.node(x)?;
        let out = n.value.iter().map(|&v| v * factor).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push_checked("scale", out, shape, rg, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let n = self.node(x)?;
        let out = n.value.iter().map(|&v| v + c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push_checked("add_scalar", out, shape, rg, Op::Shift { x })
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let out = kernels::matmul(&na.value, &nb.value, m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push_checked("matmul", out, vec![m, n], rg, Op::MatMul { a, b, m, k, n })
    }

    /// `x[m,k] * w[k,n] + bias[n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (nx, nw) = (self.node(x)?, self.node(w)?);
        if nx.shape.len() != 2 || nw.shape.len() != 2 || nx.shape[1] != nw.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: nx.shape.clone(),
                rhs: nw.shape.clone(),
            });
        }
        let (m, k, n) = (nx.shape[0], nx.shape[1], nw.shape[1]);
        let mut out = kernels::matmul(&nx.value, &nw.value, m, k, n);
        if let Some(b) = bias {
            let nb = self.node(b)?;
            if nb.value.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![n],
                    rhs: nb.shape.clone(),
                });
            }
            for row in out.chunks_exact_mut(n) {
                row.iter_mut().zip(nb.value.iter()).for_each(|(o, &bv)| *o = *o + bv);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push_checked("linear", out, vec![m, n], rg, Op::Linear { x, w, b: bias, m, k, n })
    }

    /// Cross-correlation of `[c_in,h,w]` with `[c_out,c_in,k,k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, dilation: usize, padding: usize) -> Result<Var> {
        let (ni, nk) = (self.node(input)?, self.node(kernel)?);
        if ni.shape.len() != 3 || nk.shape.len() != 4 || nk.shape[1] != ni.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: ni.shape.clone(),
                rhs: nk.shape.clone(),
            });
        }
        if dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "dilation must be >= 1".into(),
            });
        }
        let (cin, h, w) = (ni.shape[0], ni.shape[1], ni.shape[2]);
        let (cout, kh, kw) = (nk.shape[0], nk.shape[2], nk.shape[3]);
        let oh = (h + 2 * padding) as isize - (dilation * (kh - 1)) as isize;
        let ow = (w + 2 * padding) as isize - (dilation * (kw - 1)) as isize;
        if oh < 1 || ow < 1 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("output size {oh}x{ow} is not positive"),
            });
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            dilation,
            padding,
            oh: oh as usize,
            ow: ow as usize,
        };
        let out = kernels::conv2d(&ni.value, &nk.value, &geom);
        let rg = self.any_grad(&[input, kernel]);
        self.push_checked(
            "conv2d",
            out,
            vec![cout, geom.oh, geom.ow],
            rg,
            Op::Conv2d { input, kernel, geom },
        )
    }

    // ---- normalisation and reductions -----------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.node(x)?.shape.len();
        if axis >= rank {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let n = &self.nodes[x.0];
        let (outer, len, inner) = axis_split(&n.shape, axis);
        let mut out = vec![T::zero(); n.value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).fold(T::neg_infinity(), |m, j| m.max(n.value[at(j)]));
                let mut s = T::zero();
                for j in 0..len {
                    let e = (n.value[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s = s + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / s;
                }
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push_checked("softmax", out, shape, rg, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let n = &self.nodes[x.0];
        let (outer, len, inner) = axis_split(&n.shape, axis);
        let mut out = vec![T::zero(); n.value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).fold(T::neg_infinity(), |m, j| m.max(n.value[at(j)]));
                let lse = mx + (0..len).map(|j| (n.value[at(j)] - mx).exp()).sum::<T>().ln();
                for j in 0..len {
                    out[at(j)] = n.value[at(j)] - lse;
                }
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push_checked("log_softmax", out, shape, rg, Op::LogSoftmax { x, axis })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s = n.value.iter().copied().sum::<T>();
        let rg = n.requires_grad;
        self.push_checked("sum", vec![s], vec![], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s = n.value.iter().copied().sum::<T>() / T::lit(n.value.len() as f64);
        let rg = n.requires_grad;
        self.push_checked("mean", vec![s], vec![], rg, Op::Mean { x })
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let n = &self.nodes[x.0];
        let (outer, len, inner) = axis_split(&n.shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &n.value[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        let mut shape = n.shape.clone();
        shape.remove(axis);
        let rg = n.requires_grad;
        self.push_checked("sum_axis", out, shape, rg, Op::SumAxis { x, axis })
    }

    /// Normalises over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let n = self.node(x)?;
        let d = *n.shape.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        let (ng, nb) = (self.node(gamma)?, self.node(beta)?);
        if ng.value.len() != d || nb.value.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: n.shape.clone(),
                rhs: ng.shape.clone(),
            });
        }
        let rows = n.value.len() / d;
        let mut out = vec![T::zero(); n.value.len()];
        let mut normed = vec![T::zero(); n.value.len()];
        let mut inv_std = vec![T::zero(); rows];
        let df = T::lit(d as f64);
        for r in 0..rows {
            let row = &n.value[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                normed[r * d + j] = xh;
                out[r * d + j] = xh * ng.value[j] + nb.value[j];
            }
        }
        let shape = n.shape.clone();
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push_checked(
            "layer_norm",
            out,
            shape,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        check_shape(shape)?;
        if numel(shape) != n.value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = n.value.to_vec();
        let rg = n.requires_grad;
        Ok(self.push(Cow::Owned(value), shape.to_vec(), rg, Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        let rank = n.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let (out, shape) = kernels::permute(&n.value, &n.shape, perm);
        let rg = n.requires_grad;
        Ok(self.push(Cow::Owned(out), shape, rg, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.node(*parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?)?;
        let base = first.shape.clone();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = &self.node(p)?.shape;
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = &self.nodes[p.0];
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("flip", x, axis)?;
        let n = &self.nodes[x.0];
        let out = kernels::flip(&n.value, &n.shape, axis);
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(Cow::Owned(out), shape, rg, Op::Flip { x, axis }))
    }

    /// `[h,w,c] -> [h*w, k*k, c]` dilated "same"-padded patches (zeros outside the grid).
    pub fn unfold(&mut self, x: Var, k: usize, dilation: usize) -> Result<Var> {
        let n = self.node(x)?;
        if n.shape.len() != 3 || k % 2 == 0 || dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: "unfold",
                msg: format!(
                    "need [h,w,c] input, odd k and dilation >= 1 (shape {:?}, k {k}, d {dilation})",
                    n.shape
                ),
            });
        }
        let (h, w, c) = (n.shape[0], n.shape[1], n.shape[2]);
        let offsets = kernels::window_offsets(k, dilation);
        let out = kernels::unfold(&n.value, h, w, c, &offsets);
        let rg = n.requires_grad;
        Ok(self.push(
            Cow::Owned(out),
            vec![h * w, k * k, c],
            rg,
            Op::Unfold { x, h, w, c, offsets },
        ))
    }

    /// `out[p,c] = sum_k weights[p,k] * patches[p,k,c]`.
    pub fn patch_sum(&mut self, weights: Var, patches: Var) -> Result<Var> {
        let (nw, np) = (self.node(weights)?, self.node(patches)?);
        if nw.shape.len() != 2 || np.shape.len() != 3 || nw.shape[..] != np.shape[..2] {
            return Err(TensorError::ShapeMismatch {
                op: "patch_sum",
                lhs: nw.shape.clone(),
                rhs: np.shape.clone(),
            });
        }
        let (p, k, c) = (np.shape[0], np.shape[1], np.shape[2]);
        let mut out = vec![T::zero(); p * c];
        for i in 0..p {
            let dst = &mut out[i * c..(i + 1) * c];
            for j in 0..k {
                let wv = nw.value[i * k + j];
                let src = &np.value[(i * k + j) * c..(i * k + j + 1) * c];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + wv * s);
            }
        }
        let rg = self.any_grad(&[weights, patches]);
        self.push_checked(
            "patch_sum",
            out,
            vec![p, c],
            rg,
            Op::PatchSum {
                weights,
                patches,
                p,
                k,
                c,
            },
        )
    }

    /// Records an externally computed op with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Vec<T>,
        shape: Vec<usize>,
        rule: Box<dyn BackwardRule<T>>,
    ) -> Result<Var> {
        for &v in inputs {
            self.node(v)?;
        }
        if numel(&shape) != value.len() {
            return Err(TensorError::DataLength {
                shape,
                expected: 0,
                actual: value.len(),
            });
        }
        let name = rule.name();
        let rg = self.any_grad(inputs);
        self.push_checked(
            name,
            value,
            shape,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d(loss)/d(leaf) into every leaf that requires a gradient.
    /// Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }

        let mut leaf_grads = std::mem::take(&mut self.leaf_grads);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Err(e) = propagate(&self.nodes, idx, g, &mut grads, &mut leaf_grads) {
                self.leaf_grads = leaf_grads;
                return Err(e);
            }
        }
        self.leaf_grads = leaf_grads;

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && self.leaf_grads[i].is_none() {
                self.leaf_grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }
}

fn propagate<T: Real>(
    nodes: &[Node<'_, T>],
    idx: usize,
    g: Vec<T>,
    grads: &mut [Option<Vec<T>>],
    leaf_grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let node = &nodes[idx];
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    let needs = |v: Var| nodes[v.0].requires_grad;
    let mut send = |v: Var, contribution: Vec<T>| {
        if needs(v) {
            add_into(&mut grads[v.0], contribution);
        }
    };

    match &node.op {
        Op::Leaf => add_into(&mut leaf_grads[idx], g),
        Op::Binary { kind, a, b } => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (av, bv) = (val(*a), val(*b));
            let mut ga = needs(*a).then(|| vec![T::zero(); av.len()]);
            let mut gb = needs(*b).then(|| vec![T::zero(); bv.len()]);
            for_each_pair(sa, sb, &node.shape, |i, ia, ib| {
                let (x, y, gi) = (av[ia], bv[ib], g[i]);
                let (da, db) = match kind {
                    BinaryKind::Add => (gi, gi),
                    BinaryKind::Sub => (gi, -gi),
                    BinaryKind::Mul => (gi * y, gi * x),
                    BinaryKind::Div => (gi / y, -gi * x / (y * y)),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] = ga[ia] + da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] = gb[ib] + db;
                }
            });
            if let Some(ga) = ga {
                send(*a, ga);
            }
            if let Some(gb) = gb {
                send(*b, gb);
            }
        }
        Op::Unary { kind, x } => {
            let xv = val(*x);
            let gx = g
                .iter()
                .zip(xv.iter().zip(node.value.iter()))
                .map(|(&gi, (&xi, &yi))| gi * unary_derivative(*kind, xi, yi))
                .collect();
            send(*x, gx);
        }
        Op::Scale { x, factor } => send(*x, g.iter().map(|&v| v * *factor).collect()),
        Op::Shift { x } => send(*x, g),
        Op::MatMul { a, b, m, k, n } => {
            if needs(*a) {
                send(*a, kernels::matmul_bt(&g, val(*b), *m, *k, *n));
            }
            if needs(*b) {
                send(*b, kernels::matmul_at(val(*a), &g, *m, *k, *n));
            }
        }
        Op::Linear { x, w, b, m, k, n } => {
            if needs(*x) {
                send(*x, kernels::matmul_bt(&g, val(*w), *m, *k, *n));
            }
            if needs(*w) {
                send(*w, kernels::matmul_at(val(*x), &g, *m, *k, *n));
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut gb = vec![T::zero(); *n];
                    for row in g.chunks_exact(*n) {
                        gb.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
                    }
                    send(*b, gb);
                }
            }
        }
        Op::Conv2d { input, kernel, geom } => {
            let (gin, gk) = kernels::conv2d_backward(val(*input), val(*kernel), &g, geom);
            send(*input, gin);
            send(*kernel, gk);
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            let y = &node.value;
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                    for j in 0..len {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            send(*x, gx);
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            let y = &node.value;
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let gs = (0..len).map(|j| g[at(j)]).sum::<T>();
                    for j in 0..len {
                        gx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                    }
                }
            }
            send(*x, gx);
        }
        Op::Sum { x } => send(*x, vec![g[0]; nodes[x.0].value.len()]),
        Op::Mean { x } => {
            let len = nodes[x.0].value.len();
            send(*x, vec![g[0] / T::lit(len as f64); len]);
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = axis_split(&nodes[x.0].shape, *axis);
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    gx[(o * len + j) * inner..(o * len + j + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            send(*x, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normed,
            inv_std,
        } => {
            let d = *node.shape.last().expect("rank >= 1");
            let gv = val(*gamma);
            let rows = g.len() / d;
            if needs(*x) {
                let mut gx = vec![T::zero(); g.len()];
                let df = T::lit(d as f64);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &normed[r * d..(r + 1) * d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        m1 = m1 + gh;
                        m2 = m2 + gh * xh[j];
                    }
                    m1 = m1 / df;
                    m2 = m2 / df;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (gr[j] * gv[j] - m1 - xh[j] * m2);
                    }
                }
                send(*x, gx);
            }
            if needs(*gamma) || needs(*beta) {
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] = gg[j] + g[r * d + j] * normed[r * d + j];
                        gb[j] = gb[j] + g[r * d + j];
                    }
                }
                send(*gamma, gg);
                send(*beta, gb);
            }
        }
        Op::Reshape { x } => send(*x, g),
        Op::Permute { x, perm } => {
            let (gx, _) = kernels::permute(&g, &node.shape, &kernels::invert_perm(perm));
            send(*x, gx);
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(&node.shape, *axis);
            let total = node.shape[*axis] * inner;
            let mut start = 0;
            for &p in parts {
                let chunk = nodes[p.0].shape[*axis] * inner;
                if needs(p) {
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * total + start..o * total + start + chunk]);
                    }
                    send(p, gp);
                }
                start += chunk;
            }
        }
        Op::Flip { x, axis } => send(*x, kernels::flip(&g, &node.shape, *axis)),
        Op::Unfold { x, h, w, c, offsets } => {
            send(*x, kernels::unfold_backward(&g, *h, *w, *c, offsets));
        }
        Op::PatchSum {
            weights,
            patches,
            p,
            k,
            c,
        } => {
            let (wv, pv) = (val(*weights), val(*patches));
            if needs(*weights) {
                let mut gw = vec![T::zero(); p * k];
                for i in 0..*p {
                    let gi = &g[i * c..(i + 1) * c];
                    for j in 0..*k {
                        let src = &pv[(i * k + j) * c..(i * k + j + 1) * c];
                        gw[i * k + j] = gi.iter().zip(src).map(|(&a, &b)| a * b).sum();
                    }
                }
                send(*weights, gw);
            }
            if needs(*patches) {
                let mut gp = vec![T::zero(); p * k * c];
                for i in 0..*p {
                    let gi = &g[i * c..(i + 1) * c];
                    for j in 0..*k {
                        let wv = wv[i * k + j];
                        let dst = &mut gp[(i * k + j) * c..(i * k + j + 1) * c];
                        dst.iter_mut().zip(gi).for_each(|(d, &a)| *d = wv * a);
                    }
                }
                send(*patches, gp);
            }
        }
        Op::Custom { inputs, rule } => {
            let in_vals: Vec<&[T]> = inputs.iter().map(|&v| val(v)).collect();
            let flags: Vec<bool> = inputs.iter().map(|&v| needs(v)).collect();
            let gs = rule.backward(&in_vals, &node.value, &g, &flags);
            if gs.len() != inputs.len() {
                return Err(TensorError::InvalidArgument {
                    op: rule.name(),
                    msg: format!("backward returned {} grads for {} inputs", gs.len(), inputs.len()),
                });
            }
            for (&v, gv) in inputs.iter().zip(gs) {
                if let Some(gv) = gv {
                    send(v, gv);
                }
            }
        }
    }
    Ok(())
}
