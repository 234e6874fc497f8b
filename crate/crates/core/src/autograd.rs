//! Reverse-mode differentiation on an explicit, single-use tape.
//!
//! Every operation evaluates eagerly and appends a node holding its output
//! value, its input handles and (when any input needs a gradient) a
//! [`Backward`] implementation with whatever forward context it saved.
//! Nodes are appended in evaluation order, so the node list is already
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{bail, Error, Result};
use crate::tensor::{Element, MatMut, MatRef, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Inputs handed to a node's backward rule.
pub struct BackwardCtx<'a, T> {
    pub grad_out: &'a [T],
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation. Returned buffers are
/// row-major and match the corresponding input's shape.
pub trait Backward<T: Element> {
    fn name(&self) -> &'static str;

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    leaf: bool,
}

pub struct Tape<T: Element = f32> {
    id: usize,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Gradients are tracked iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        self.push(Node { value, inputs: Vec::new(), op: None, requires_grad, leaf: true })
    }

    /// Registers a constant (never differentiated).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Registers a trainable parameter (gradient tracked).
    pub fn param(&mut self, value: &Tensor<T>) -> Var {
        self.leaf(value.clone().with_requires_grad(true))
    }

    fn push(&mut self, node: Node<T>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(node);
        Var { tape: self.id, index }
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            bail!(Tape, "variable {:?} was not recorded on this tape", var);
        }
        Ok(())
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        &self.nodes[var.index].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    /// Appends the result of an operation. The backward rule is dropped when
    /// no input needs a gradient.
    pub fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: impl Backward<T> + 'static) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        Ok(self.push(Node { value, inputs: inputs.to_vec(), op, requires_grad, leaf: false }))
    }

    /// Reverse sweep from a one-element `loss`. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.consumed {
            bail!(Tape, "tape already consumed by a previous backward pass");
        }
        let loss_node = &self.nodes[loss.index];
        if loss_node.value.numel() != 1 {
            bail!(Shape, "loss must have exactly one element, got shape {:?}", loss_node.value.shape());
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad_out) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                grad_out: &grad_out,
                output: &node.value,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.index].value).collect(),
                needs: node.inputs.iter().map(|v| self.nodes[v.index].requires_grad).collect(),
            };
            let input_grads = op.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{} returned wrong arity", op.name());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.index].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[v.index].value.numel(), "{} gradient size", op.name());
                match &mut grads[v.index] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if node.leaf && node.requires_grad {
                    g.map(|g| Tensor::from_vec(node.value.shape(), g).expect("gradient matches value shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { tape: self.id, grads: leaves })
    }
}

/// Gradients of the loss with respect to each differentiable leaf.
pub struct Gradients<T: Element> {
    tape: usize,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward<T: Element>(loss: Var, tape: &mut Tape<T>) -> Result<Gradients<T>> {
    tape.backward(loss)
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic with scalar broadcast.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

struct Binary {
    op: BinaryOp,
}

fn reduce_if_scalar<T: Element>(g: Vec<T>, input_numel: usize) -> Vec<T> {
    if input_numel == 1 && g.len() != 1 {
        vec![g.into_iter().sum()]
    } else {
        g
    }
}

impl<T: Element> Backward<T> for Binary {
    fn name(&self) -> &'static str {
        "binary"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let go = ctx.grad_out;
        let n = go.len();
        let av = a.values();
        let bv = b.values();
        let at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
        let bt = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
        let ga = ctx.needs[0].then(|| {
            let g: Vec<T> = match self.op {
                BinaryOp::Add | BinaryOp::Sub => go.to_vec(),
                BinaryOp::Mul => (0..n).map(|i| go[i] * bt(i)).collect(),
            };
            reduce_if_scalar(g, av.len())
        });
        let gb = ctx.needs[1].then(|| {
            let g: Vec<T> = match self.op {
                BinaryOp::Add => go.to_vec(),
                BinaryOp::Sub => go.iter().map(|&v| -v).collect(),
                BinaryOp::Mul => (0..n).map(|i| go[i] * at(i)).collect(),
            };
            reduce_if_scalar(g, bv.len())
        });
        vec![ga, gb]
    }
}

struct Sum;

impl<T: Element> Backward<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![ctx.grad_out[0]; ctx.inputs[0].numel()])]
    }
}

struct Mean;

impl<T: Element> Backward<T> for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let n = ctx.inputs[0].numel();
        vec![Some(vec![ctx.grad_out[0] / T::from_f64(n as f64); n])]
    }
}

struct MatMul;

impl<T: Element> Backward<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let av = a.values();
        let bv = b.values();
        let go = ctx.grad_out;
        // dA = dC · Bᵀ, dB = Aᵀ · dC
        let ga = ctx.needs[0].then(|| {
            let mut g = vec![T::zero(); m * k];
            T::gemm(m, n, k, T::one(), MatRef::new(go, n, 1), MatRef::new(&bv, 1, n), T::zero(), MatMut::new(&mut g, k, 1));
            g
        });
        let gb = ctx.needs[1].then(|| {
            let mut g = vec![T::zero(); k * n];
            T::gemm(k, m, n, T::one(), MatRef::new(&av, 1, k), MatRef::new(go, n, 1), T::zero(), MatMut::new(&mut g, n, 1));
            g
        });
        vec![ga, gb]
    }
}

struct Reshape;

impl<T: Element> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad_out.to_vec())]
    }
}

struct ConcatChannels {
    channels: Vec<usize>,
}

impl<T: Element> Backward<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let shape = ctx.output.shape();
        let (n, total, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut start = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if ctx.needs[i] {
                let mut g = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    let from = (b * total + start) * plane;
                    g.extend_from_slice(&ctx.grad_out[from..from + c * plane]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            start += c;
        }
        out
    }
}

impl<T: Element> Tape<T> {
    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            bail!(Shape, "elementwise {:?} of {:?} and {:?} (only scalar broadcast is supported)", op, ta.shape(), tb.shape());
        };
        let av = ta.values();
        let bv = tb.values();
        let n: usize = shape.iter().product();
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let data: Vec<T> = match (av.len(), bv.len()) {
            (la, lb) if la == lb => av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect(),
            (1, _) => bv.iter().map(|&y| f(av[0], y)).collect(),
            _ => av.iter().map(|&x| f(x, bv[0])).collect(),
        };
        debug_assert_eq!(data.len(), n);
        let value = Tensor::from_vec(&shape, data)?;
        self.record(value, &[a, b], Binary { op })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum_all();
        self.record(Tensor::scalar(s), &[x], Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let s = t.sum_all() / T::from_f64(t.numel() as f64);
        self.record(Tensor::scalar(s), &[x], Mean)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 {
            bail!(Shape, "matmul needs 2-d operands, got {:?} and {:?}", ta.shape(), tb.shape());
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        if tb.shape()[0] != k {
            bail!(Shape, "matmul inner dimensions differ: {:?} · {:?}", ta.shape(), tb.shape());
        }
        let av = ta.values();
        let bv = tb.values();
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), MatRef::new(&av, k, 1), MatRef::new(&bv, n, 1), T::zero(), MatMut::new(&mut c, n, 1));
        let value = Tensor::from_vec(&[m, n], c)?;
        self.record(value, &[a, b], MatMul)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).reshape(shape)?.with_requires_grad(false);
        self.record(value, &[x], Reshape)
    }

    /// Concatenates `[N, Cᵢ, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Shape, "concat of zero tensors");
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 4 {
            bail!(Shape, "concat_channels expects [N,C,H,W], got {:?}", first);
        }
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                bail!(Shape, "cannot concatenate {:?} with {:?} along channels", s, first);
            }
            channels.push(s[1]);
        }
        let total: usize = channels.iter().sum();
        let (n, plane) = (first[0], first[2] * first[3]);
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p).values()).collect();
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (v, &c) in vals.iter().zip(&channels) {
                data.extend_from_slice(&v[b * c * plane..(b + 1) * c * plane]);
            }
        }
        drop(vals);
        let value = Tensor::from_vec(&[n, total, first[2], first[3]], data)?;
        self.record(value, parts, ConcatChannels { channels })
    }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle.

/// Largest relative disagreement between the tape gradient of `f` at `x`
/// and central differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`, using
/// `|a − n| / max(|a|, |n|, 1e-8)` per element.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let base = x.contiguous().with_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.leaf(base.clone());
    let out = f(&mut tape, xv)?;
    let value = tape.value(out).values()[0];
    if !value.is_finite() {
        bail!(Numerics, "function value is not finite: {}", value);
    }
    let grads = tape.backward(out)?;
    let analytic = match grads.get(xv) {
        Some(g) => g.to_vec(),
        None => vec![0.0; base.numel()],
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_vec(base.shape(), data)?);
        let out = f(&mut tape, v)?;
        let y = tape.value(out).values()[0];
        if !y.is_finite() {
            return Err(Error::Numerics(format!("function value is not finite: {y}")));
        }
        Ok(y)
    };

    let xs = base.to_vec();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = xs.clone();
        plus[i] += eps;
        let mut minus = xs.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
