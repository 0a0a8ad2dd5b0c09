//! Reverse-mode differentiation over a linear tape of tensor primitives.
//!
//! Every primitive appends one node holding its output value, so the tape is
//! topologically ordered by construction. `backward` walks it once in reverse.
//! Backward rules read only forward values already on the tape (the output
//! for `tanh`/`sigmoid`/`exp`, the input for `log`/`clamp`/`mul`).
//!
//! Nodes built purely from constants are flagged as not requiring gradients
//! and are skipped in the reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{axpy, dot, matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `scale * a + shift`
    Affine { a: NodeId, scale: f64 },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Concat(Vec<NodeId>),
    Slice { src: NodeId, start: usize },
    Sum(NodeId),
    Clamp { a: NodeId, lo: f64, hi: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
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

    /// Drops every node recorded after the first `len`; ids beyond `len`
    /// become invalid. Used to reuse an encoder pass across many samples.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A differentiable input (a parameter).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable input (data, noise, masks).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), m, k, n, &mut out);
        finite("matmul", &out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Op::MatMul { a, b, m, k, n },
            Tensor::new(out_shape, out).expect("matmul shape"),
            rg,
        ))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        finite(name, &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, Tensor::new(shape, out).expect("zip shape"), rg))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        finite(name, &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(op, Tensor::new(shape, out).expect("unary shape"), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise `scale * a + shift`.
    pub fn affine_scalar(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.unary(
            "affine_scalar",
            a,
            |x| scale * x + shift,
            Op::Affine { a, scale },
        )
    }

    pub fn scale(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        self.affine_scalar(a, scale, 0.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, math::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, math::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("log", a, math::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    /// Concatenates flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut out = Vec::with_capacity(parts.iter().map(|p| self.data(*p).len()).sum());
        for p in parts {
            if self.shape(*p).len() > 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(*p).to_vec(),
                    rhs: Vec::new(),
                });
            }
            out.extend_from_slice(self.data(*p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(out), rg))
    }

    /// Contiguous range `[start, start+len)` of the flattened input.
    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.data(src).len();
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: self.shape(src).to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self.data(src)[start..start + len].to_vec();
        let rg = self.rg(&[src]);
        Ok(self.push(Op::Slice { src, start }, Tensor::vector(out), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.data(a).iter().sum();
        finite("sum", &[s])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), rg))
    }

    /// `w · x + b`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matmul(w, x)?;
        self.add(wx, b)
    }

    /// Sum of all elements of `a ⊙ b`.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.data(loss).len() != 1 || shape.len() > 1 {
            return Err(Error::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let av = self.data(*a);
                    let bv = self.data(*b);
                    if self.nodes[a.0].requires_grad {
                        let ga = grad_slot(&mut grads, *a, m * k);
                        // dA = dC · Bᵀ
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            let row = &mut ga[i * k..(i + 1) * k];
                            if n == 1 {
                                axpy(gi[0], bv, row);
                            } else {
                                for (p, r) in row.iter_mut().enumerate() {
                                    *r += dot(gi, &bv[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = grad_slot(&mut grads, *b, k * n);
                        // dB = Aᵀ · dC
                        for i in 0..m {
                            let arow = &av[i * k..(i + 1) * k];
                            let gi = &g[i * n..(i + 1) * n];
                            if n == 1 {
                                axpy(gi[0], arow, gb);
                            } else {
                                for (p, &aip) in arow.iter().enumerate() {
                                    axpy(aip, gi, &mut gb[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |i| g[i]);
                    self.accumulate(&mut grads, *b, |i| g[i]);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |i| g[i]);
                    self.accumulate(&mut grads, *b, |i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.data(*a), self.data(*b));
                    self.accumulate(&mut grads, *a, |i| g[i] * bv[i]);
                    self.accumulate(&mut grads, *b, |i| g[i] * av[i]);
                }
                Op::Affine { a, scale } => {
                    let s = *scale;
                    self.accumulate(&mut grads, *a, |i| s * g[i]);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    self.accumulate(&mut grads, *a, |i| g[i] * (1.0 - y[i] * y[i]));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    self.accumulate(&mut grads, *a, |i| g[i] * y[i] * (1.0 - y[i]));
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    self.accumulate(&mut grads, *a, |i| g[i] * y[i]);
                }
                Op::Log(a) => {
                    let x = self.data(*a);
                    self.accumulate(&mut grads, *a, |i| g[i] / x[i]);
                }
                Op::Clamp { a, lo, hi } => {
                    let x = self.data(*a);
                    let (lo, hi) = (*lo, *hi);
                    self.accumulate(&mut grads, *a, |i| {
                        if x[i] < lo || x[i] > hi {
                            0.0
                        } else {
                            g[i]
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.data(*p).len();
                        let o = offset;
                        self.accumulate(&mut grads, *p, |i| g[o + i]);
                        offset += len;
                    }
                }
                Op::Slice { src, start } => {
                    if self.nodes[src.0].requires_grad {
                        let n = self.data(*src).len();
                        let gs = grad_slot(&mut grads, *src, n);
                        for (dst, v) in gs[*start..*start + g.len()].iter_mut().zip(&g) {
                            *dst += v;
                        }
                    }
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.accumulate(&mut grads, *a, |_| g0);
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, f: impl Fn(usize) -> f64) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let n = self.data(target).len();
        let slot = grad_slot(grads, target, n);
        for (i, s) in slot.iter_mut().enumerate() {
            *s += f(i);
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

/// Adjoints of the leaves reachable from a loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zero when the leaf does not
    /// influence the loss.
    pub fn get(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecn(t: &mut Tape, v: &[f64]) -> NodeId {
        t.variable(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        assert_eq!(t.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn activations_at_zero() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let th = t.tanh(z).unwrap();
        let sg = t.sigmoid(z).unwrap();
        assert_eq!(t.value(th).item(), 0.0);
        assert_eq!(t.value(sg).item(), 0.5);
    }

    #[test]
    fn exp_of_log_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(2.5));
        let l = t.log(x).unwrap();
        let e = t.exp(l).unwrap();
        assert!((t.value(e).item() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let w = vecn(&mut t, &[1.0, 2.0, 3.0]);
        let loss = t.dot(w, w).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let w = t.variable(Tensor::scalar(0.0));
        let s = t.sigmoid(w).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).item(), 0.25);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = vecn(&mut t, &[1.0, 2.0]);
        let b = vecn(&mut t, &[1.0, 2.0, 3.0]);
        match t.add(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = t.variable(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(t.matmul(m, b), Err(Error::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = vecn(&mut t, &[1.0, 2.0]);
        assert!(matches!(t.backward(a), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(0.0));
        assert!(matches!(t.log(a), Err(Error::NonFinite { op: "log" })));
        let big = t.constant(Tensor::scalar(1000.0));
        assert!(matches!(t.exp(big), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = vecn(&mut t, &[1.0, 2.0]);
        let b = vecn(&mut t, &[3.0]);
        let loss = t.sum(a).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(!g.is_reached(b));
        assert_eq!(g.get(b).data(), &[0.0]);
    }

    #[test]
    fn constants_are_skipped() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = vecn(&mut t, &[0.5, 0.5]);
        let p = t.mul(c, w).unwrap();
        let loss = t.sum(p).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(!g.is_reached(c));
        assert_eq!(g.get(w).data(), &[1.0, 2.0]);
    }
}
