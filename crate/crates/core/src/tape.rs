//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every primitive appends one node holding its output value, the ids of its
//! inputs and an analytic backward rule. [`Tape::backward`] walks the nodes
//! in reverse execution order, so each recorded op is visited exactly once.
//! The tape is never mutated by a backward pass; replaying it yields the same
//! gradients.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    branches: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Gradients are only propagated to leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every branch taken by piecewise ops (ReLU signs, memory-cell
    /// max and clamp choices).
    /// Two evaluations with equal signatures ran on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    pub(crate) fn record_branches(&mut self, taken: impl Iterator<Item = u64>) {
        for b in taken {
            self.branches = (self.branches ^ b.wrapping_add(1)).wrapping_mul(FNV_PRIME);
        }
    }

    /// Appends an op output. Rejects non-finite outputs.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradients of the one-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            );
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut visited = Vec::new();
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let (Some(backward), Some(grad)) = (node.backward.as_ref(), grads[id].as_ref()) else {
                continue;
            };
            visited.push(id);
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                grad,
                needs: node
                    .inputs
                    .iter()
                    .map(|&i| self.nodes[i].requires_grad)
                    .collect(),
            };
            let input_grads = backward(&ctx)?;
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[input].value.shape() {
                    return shape_err(
                        node.op,
                        format!(
                            "backward produced {:?} for input {:?}",
                            g.shape(),
                            self.nodes[input].value.shape()
                        ),
                    );
                }
                g.ensure_finite(node.op)?;
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads, visited })
    }
}

/// Result of one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    /// Node ids whose backward rule ran, in the order they ran.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}

/// Elementwise and structural primitives.
impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.scale(-T::one()))])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.mul(c.inputs[1])).transpose()?;
                let gb = c.needs[1].then(|| c.grad.mul(c.inputs[0])).transpose()?;
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let out = self.value(a).scale(k);
        self.push(
            "scale",
            out,
            &[a],
            Box::new(move |c| Ok(vec![Some(c.grad.scale(k))])),
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = activation(self.value(x), kind)?;
        if kind == Activation::Relu {
            let signs: Vec<u64> = self
                .value(x)
                .data()
                .iter()
                .map(|&v| (v > T::zero()) as u64)
                .collect();
            self.record_branches(signs.into_iter());
        }
        self.push(
            kind.name(),
            out,
            &[x],
            Box::new(move |c| {
                let g = match kind {
                    Activation::Relu => c.grad.zip_map(c.inputs[0], "relu", |g, x| {
                        if x > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    })?,
                    Activation::Sigmoid => c
                        .grad
                        .zip_map(c.output, "sigmoid", |g, y| g * y * (T::one() - y))?,
                    Activation::Exp => c.grad.mul(c.output)?,
                    Activation::Tanh => c
                        .grad
                        .zip_map(c.output, "tanh", |g, y| g * (T::one() - y * y))?,
                };
                Ok(vec![Some(g)])
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Exp)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.push(
            "sum",
            out,
            &[x],
            Box::new(move |c| Ok(vec![Some(Tensor::full(&shape, c.grad.item()))])),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    /// `sum(x * weights)` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mul(weights)?.sum());
        let w = weights.clone();
        self.push(
            "dot_const",
            out,
            &[x],
            Box::new(move |c| Ok(vec![Some(w.scale(c.grad.item()))])),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let orig = self.shape(x).to_vec();
        self.push(
            "reshape",
            out,
            &[x],
            Box::new(move |c| Ok(vec![Some(c.grad.reshape(&orig)?)])),
        )
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let out = self.value(x).transpose(a, b)?;
        self.push(
            "transpose",
            out,
            &[x],
            Box::new(move |c| Ok(vec![Some(c.grad.transpose(a, b)?)])),
        )
    }

    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).flip_axis(axis)?;
        self.push(
            "flip",
            out,
            &[x],
            Box::new(move |c| Ok(vec![Some(c.grad.flip_axis(axis)?)])),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| p.shape().get(axis).copied().unwrap_or(0))
            .collect();
        let out = Tensor::concat(&parts, axis)?;
        self.push(
            "concat",
            out,
            xs,
            Box::new(move |c| Ok(c.grad.split(axis, &sizes)?.into_iter().map(Some).collect())),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Exp,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Exp => "exp",
            Activation::Tanh => "tanh",
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise activation; `exp` overflow is reported as an error.
pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    let out = match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Exp => x.map(|v| v.exp()),
        Activation::Tanh => x.map(|v| v.tanh()),
    };
    if !out.is_finite() {
        return Err(Error::NonFinite { op: kind.name() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn activation_values() {
        let x = t(&[3], &[-3.0, 0.0, 3.0]);
        assert_eq!(
            activation(&x, Activation::Relu).unwrap().data(),
            &[0.0, 0.0, 3.0]
        );
        assert_eq!(activation(&x, Activation::Sigmoid).unwrap().data()[1], 0.5);
        let e = activation(&t(&[1], &[2f64.ln()]), Activation::Exp).unwrap();
        assert!((e.item() - 2.0).abs() < 1e-15);
        assert!(matches!(
            activation(&t(&[1], &[1000.0]), Activation::Exp),
            Err(Error::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let th = tape.leaf(t(&[1], &[3.0]), true);
        let sq = tape.mul(th, th).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(th).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_visits_each_op_once_in_reverse() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, -2.0]), true);
        let b = tape.leaf(t(&[2], &[0.5, 4.0]), true);
        let c = tape.mul(a, b).unwrap();
        let d = tape.relu(c).unwrap();
        let e = tape.add(d, a).unwrap();
        let s = tape.sum(e).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.visited(), &[s.id(), e.id(), d.id(), c.id()]);
        // replay is side-effect free
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g.get(a), g2.get(a));
        assert_eq!(g.get(b), g2.get(b));
        assert_eq!(g.get(a).unwrap().data(), &[1.5, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let k = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(a, k).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(k).is_none());
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[800.0]), true);
        assert!(matches!(tape.exp(a), Err(Error::NonFinite { .. })));
    }
}
