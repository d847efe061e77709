//! Recorded forward tape with reverse-mode replay.
//!
//! Each op method runs the forward kernel from [`crate::ops`], stores the
//! result as a new node, and remembers its inputs. [`Tape::backward`] walks
//! the nodes in reverse and applies the matching `*_backward` adjoint.

use crate::error::TensorError;
use crate::ops;
use crate::tensor::{Scalar, Tensor};
use crate::train::loss;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    Gelu(Var),
    BroadcastLeading {
        x: Var,
        lead: Vec<usize>,
    },
    /// Mean cross-entropy; holds d(loss)/d(logits).
    CrossEntropy {
        logits: Var,
        grad: Tensor<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A value together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> GradPair<T> {
    pub fn new(value: Tensor<T>, grad: Tensor<T>) -> Result<Self, TensorError> {
        if value.shape() != grad.shape() {
            return Err(TensorError::shapes("grad pair", value.shape(), grad.shape()));
        }
        Ok(GradPair { value, grad })
    }
}

/// Gradients of one scalar root with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros when `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, alpha: T) -> Result<Var, TensorError> {
        let y = ops::scale(self.value(a), alpha)?;
        Ok(self.push(y, Op::Scale(a, alpha)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let y = ops::transpose(self.value(a))?;
        Ok(self.push(y, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let y = self.value(a).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat(&values, axis)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let y = ops::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(y, Op::Narrow { x, axis, start }))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = ops::softmax_lastdim(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x)))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, TensorError> {
        let y = ops::layernorm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = ops::gelu(self.value(x))?;
        Ok(self.push(y, Op::Gelu(x)))
    }

    pub fn broadcast_leading(&mut self, x: Var, lead: &[usize]) -> Result<Var, TensorError> {
        let y = ops::broadcast_leading(self.value(x), lead)?;
        Ok(self.push(y, Op::BroadcastLeading { x, lead: lead.to_vec() }))
    }

    /// Mean cross-entropy of `logits [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (value, grad) = loss::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(value), Op::CrossEntropy { logits, grad }))
    }

    /// Reverse pass seeded with ones of `root`'s shape.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        let seed = Tensor::ones(self.value(root).shape().to_vec());
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>, TensorError> {
        if seed.shape() != self.value(root).shape() {
            return Err(TensorError::shapes("backward seed", seed.shape(), self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, t: Tensor<T>| -> Result<(), TensorError> { accumulate(&mut grads[v.0], t) };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), &g)?;
                    send(*a, ga)?;
                    send(*b, gb)?;
                }
                Op::Add(a, b) => {
                    let (ga, gb) = ops::add_backward(self.value(*a).shape(), self.value(*b).shape(), &g)?;
                    send(*a, ga)?;
                    send(*b, gb)?;
                }
                Op::Scale(a, alpha) => send(*a, ops::scale_backward(node.value.shape(), *alpha, &g)?)?,
                Op::Transpose(a) => send(*a, ops::transpose_backward(node.value.shape(), &g)?)?,
                Op::Reshape(a) => send(*a, ops::reshape_backward(self.value(*a).shape(), node.value.shape(), &g)?)?,
                Op::Concat { parts, axis } => {
                    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
                    for (p, gp) in parts.iter().zip(ops::concat_backward(&shapes, *axis, &g)?) {
                        send(*p, gp)?;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    send(*x, ops::narrow_backward(self.value(*x).shape(), *axis, *start, &g)?)?
                }
                Op::Softmax(x) => send(*x, ops::softmax_backward(&node.value, &g)?)?,
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (gx, ggamma, gbeta) = ops::layernorm_backward(self.value(*x), self.value(*gamma), *eps, &g)?;
                    send(*x, gx)?;
                    send(*gamma, ggamma)?;
                    send(*beta, gbeta)?;
                }
                Op::Gelu(x) => send(*x, ops::gelu_backward(self.value(*x), &g)?)?,
                Op::BroadcastLeading { x, lead } => {
                    send(*x, ops::broadcast_leading_backward(self.value(*x).shape(), lead, &g)?)?
                }
                Op::CrossEntropy { logits, grad } => send(*logits, ops::scale(grad, g.item())?)?,
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    pub fn grad_pair(&self, grads: &Gradients<T>, v: Var) -> GradPair<T> {
        GradPair { value: self.value(v).clone(), grad: grads.wrt(v) }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<(), TensorError> {
    match slot {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(TensorError::shapes("gradient accumulation", existing.shape(), g.shape()));
            }
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *v;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::from_f64(vec![2, 1], &[3.0, 4.0]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let z = tape.add(y, y).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0, 8.0]);
        assert_eq!(grads.wrt(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::ones(vec![2]));
        let b = tape.leaf(Tensor::ones(vec![3]));
        let c = tape.scale(a, 2.0).unwrap();
        let grads = tape.backward(c).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.wrt(b), Tensor::zeros(vec![3]));
        let pair = tape.grad_pair(&grads, a);
        assert_eq!(pair.grad.data(), &[2.0, 2.0]);
        assert!(GradPair::new(Tensor::<f32>::zeros(vec![2]), Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(vec![2]));
        assert!(tape.backward_with(a, Tensor::ones(vec![3])).is_err());
    }
}
