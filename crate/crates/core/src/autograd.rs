//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation is a method on [`Tape`] that computes its
//! value eagerly and records a backward rule. [`Tape::backward`] replays the
//! tape in reverse and returns the gradients of all leaves that asked for them.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward rule.
pub(crate) struct Ctx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&Ctx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Recorded forward computation. One tape per forward pass.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by the recorded convolutions and products.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: "leaf", value, inputs: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub(crate) fn record(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&Ctx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { op, value, inputs: inputs.to_vec(), backward, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a `(1,1,1,1)` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {shape}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = Ctx {
                grad: &g,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}: backward arity", node.op);
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.shape(*v), "{}: gradient shape", node.op);
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        // keep leaf gradients only
        for (i, node) in self.nodes.iter().enumerate() {
            if node.backward.is_some() {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the leaf was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when unreachable.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// `(1, c, 1, 1)`
    Channel,
    /// `(n, c, 1, 1)`
    SampleChannel,
}

impl Broadcast {
    fn resolve(op: &'static str, a: Shape, b: Shape) -> Result<Self> {
        if a == b {
            Ok(Broadcast::Same)
        } else if b.is_scalar() {
            Ok(Broadcast::Scalar)
        } else if b.h == 1 && b.w == 1 && b.c == a.c && b.n == 1 {
            Ok(Broadcast::Channel)
        } else if b.h == 1 && b.w == 1 && b.c == a.c && b.n == a.n {
            Ok(Broadcast::SampleChannel)
        } else {
            Err(Error::ShapeMismatch { op, lhs: a, rhs: b })
        }
    }

    /// Index into the right operand for plane `(n, c)` of the left one.
    fn plane_index(self, a: Shape, n: usize, c: usize) -> Option<usize> {
        match self {
            Broadcast::Same => None,
            Broadcast::Scalar => Some(0),
            Broadcast::Channel => Some(c),
            Broadcast::SampleChannel => Some(n * a.c + c),
        }
    }
}

/// Apply `f(a, b)` planewise with broadcasting of `b`.
fn zip_broadcast<T: Real>(a: &Tensor<T>, b: &Tensor<T>, mode: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let s = a.shape();
    let hw = s.hw();
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * hw;
            let pa = &a.data()[base..base + hw];
            match mode.plane_index(s, n, c) {
                None => out.extend(pa.iter().zip(&b.data()[base..base + hw]).map(|(&x, &y)| f(x, y))),
                Some(j) => {
                    let y = b.data()[j];
                    out.extend(pa.iter().map(|&x| f(x, y)));
                }
            }
        }
    }
    Tensor::from_parts(s, out)
}

/// Sum a full-shape gradient down to the broadcast operand's shape.
fn reduce_broadcast<T: Real>(g: &Tensor<T>, mode: Broadcast, target: Shape) -> Tensor<T> {
    if mode == Broadcast::Same {
        return g.clone();
    }
    let s = g.shape();
    let hw = s.hw();
    let mut out = vec![T::zero(); target.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * hw;
            let part: T = g.data()[base..base + hw].iter().copied().sum();
            out[mode.plane_index(s, n, c).unwrap()] += part;
        }
    }
    Tensor::from_parts(target, out)
}

impl<T: Real> Tape<T> {
    /// Elementwise sum; `b` may be a scalar or per-channel.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mode = Broadcast::resolve("add", sa, sb)?;
        let value = zip_broadcast(self.value(a), self.value(b), mode, |x, y| x + y);
        self.record("add", value, &[a, b], move |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.clone()),
                ctx.needs[1].then(|| reduce_broadcast(ctx.grad, mode, sb)),
            ]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mode = Broadcast::resolve("sub", sa, sb)?;
        let value = zip_broadcast(self.value(a), self.value(b), mode, |x, y| x - y);
        self.record("sub", value, &[a, b], move |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.clone()),
                ctx.needs[1].then(|| reduce_broadcast(&ctx.grad.map(|g| -g), mode, sb)),
            ]
        })
    }

    /// Elementwise product; `b` may be a scalar or per-channel.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mode = Broadcast::resolve("mul", sa, sb)?;
        let value = zip_broadcast(self.value(a), self.value(b), mode, |x, y| x * y);
        self.add_macs(sa.numel() as u64);
        self.record("mul", value, &[a, b], move |ctx| {
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            let ga = ctx.needs[0].then(|| zip_broadcast(ctx.grad, y, mode, |g, yv| g * yv));
            let gb = ctx.needs[1].then(|| {
                let full = Tensor::from_parts(
                    sa,
                    ctx.grad.data().iter().zip(x.data()).map(|(&g, &xv)| g * xv).collect(),
                );
                reduce_broadcast(&full, mode, sb)
            });
            vec![ga, gb]
        })
    }

    /// `λ · x` for a learnable `(1,1,1,1)` weight.
    pub fn scalar_weight(&mut self, x: Var, lambda: Var) -> Result<Var> {
        let sl = self.shape(lambda);
        if !sl.is_scalar() {
            return Err(Error::dim("scalar_weight", format!("weight must be (1,1,1,1), got {sl}")));
        }
        self.mul(x, lambda)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * k);
        self.record("scale", value, &[x], move |ctx| vec![Some(ctx.grad.map(|g| g * k))])
    }

    /// Sum of all elements as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let value = Tensor::scalar(self.value(x).sum());
        self.record("sum", value, &[x], move |ctx| vec![Some(Tensor::full(sx, ctx.grad.item()))])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let inv = T::one() / T::from_usize(sx.numel()).unwrap();
        let value = Tensor::scalar(self.value(x).sum() * inv);
        self.record("mean", value, &[x], move |ctx| vec![Some(Tensor::full(sx, ctx.grad.item() * inv))])
    }

    /// Reinterpret the NCHW buffer with a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let sx = self.shape(x);
        let value = self.value(x).reshape(shape)?;
        self.record("reshape", value, &[x], move |ctx| {
            vec![Some(Tensor::from_parts(sx, ctx.grad.data().to_vec()))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_small_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(Shape::new(1, 1, 1, 2), &[3.0, 4.0]), true);
        let b = tape.leaf(t(Shape::new(1, 1, 1, 2), &[1.0, 1.0]), true);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0]);
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 2, 1, 2), &[1.5, -2.0, 0.25, 7.0]), false);
        let z = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 2)), false);
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn mul_small_case_and_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(Shape::new(1, 1, 1, 2), &[2.0, 3.0]), true);
        let b = tape.leaf(t(Shape::new(1, 1, 1, 2), &[4.0, 5.0]), true);
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[8.0, 15.0]);
        let ones = tape.leaf(Tensor::ones(Shape::new(1, 1, 1, 2)), false);
        let z = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(z), tape.value(a));
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn per_channel_broadcast_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, y, w| (n + c + y + w) as f64), true);
        let b = tape.leaf(t(Shape::new(1, 3, 1, 1), &[1.0, 2.0, 3.0]), true);
        let y = tape.add(x, b).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        // each channel bias touches 2 samples x 4 pixels
        assert_eq!(g.get(b).unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn general_broadcast_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 2, 3, 3)), false);
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 3)), false);
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("(1,2,3,3)") && err.contains("(1,1,3,3)"), "{err}");
    }

    #[test]
    fn scalar_weight_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]), true);
        let one = tape.leaf(Tensor::scalar(1.0), true);
        let y1 = tape.scalar_weight(x, one).unwrap();
        assert_eq!(tape.value(y1), tape.value(x));
        let zero = tape.leaf(Tensor::scalar(0.0), true);
        let y0 = tape.scalar_weight(x, zero).unwrap();
        assert_eq!(tape.value(y0).data(), &[0.0, 0.0]);
        let loss = tape.sum(y1).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(one).unwrap().item(), 3.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum(z).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn disconnected_leaf_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]), true);
        let unused = tape.leaf(t(Shape::new(1, 1, 2, 2), &[1.0; 4]), true);
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 1, 2)), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_result_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(Shape::SCALAR, f32::MAX), false);
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }
}
