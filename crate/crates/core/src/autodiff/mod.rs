//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records coarse-grained operations (matrix products, pooling,
//! whole simulator steps, point-cloud losses). Every operation implements
//! [`Op`], which carries both the forward rule and its adjoint; simulation
//! kernels plug in their own hand-written adjoints through the same trait.
//!
//! ```
//! use softrep::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_elem((1, 1), 3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x)[[0, 0]], 6.0);
//! ```

mod check;
pub mod ops;

use std::fmt;
use std::sync::Arc;

pub use check::{check_gradient, GradCheckReport};
use ndarray::Array2;

/// Every value on the tape is a dense row-major matrix. Scalars are `1 x 1`.
pub type Tensor = Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("non-finite value in {phase} pass at node {node} ({op})")]
    NonFinite {
        node: usize,
        op: &'static str,
        phase: Phase,
    },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward seed must be {expected:?}, got {got:?}")]
    Seed {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("program is not deterministic: output differs between two forward passes")]
    NonDeterministic,
    #[error("replay diverged at node {node} ({op})")]
    ReplayMismatch { node: usize, op: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{op} kernel failed: {message}")]
    Kernel { op: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Forward => f.write_str("forward"),
            Phase::Backward => f.write_str("backward"),
        }
    }
}

/// A differentiable primitive: forward rule plus vector-Jacobian product.
///
/// `backward` receives the recorded input values, the recorded output and the
/// adjoint of the output, and returns one adjoint per input (`None` when the
/// input does not influence the output).
pub trait Op: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>, AdError>;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Kind {
    Leaf,
    Constant,
    Apply(Arc<dyn Op>),
}

#[derive(Clone)]
struct Node {
    kind: Kind,
    inputs: Vec<usize>,
    value: Tensor,
}

impl Node {
    fn op_name(&self) -> &'static str {
        match &self.kind {
            Kind::Leaf => "leaf",
            Kind::Constant => "constant",
            Kind::Apply(op) => op.name(),
        }
    }
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// so every node's inputs precede it.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
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

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let idx = self.push(Kind::Leaf, Vec::new(), value);
        self.leaves.push(idx);
        Var(idx)
    }

    /// Records a value that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        Var(self.push(Kind::Constant, Vec::new(), value))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::from_elem((1, 1), value))
    }

    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.leaves.iter().map(|&i| Var(i))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, kind: Kind, inputs: Vec<usize>, value: Tensor) -> usize {
        self.nodes.push(Node { kind, inputs, value });
        self.nodes.len() - 1
    }

    /// Runs `op` forward on the given inputs and records the result.
    pub fn apply<O: Op + 'static>(&mut self, op: O, inputs: &[Var]) -> Result<Var, AdError> {
        self.apply_shared(Arc::new(op), inputs)
    }

    pub fn apply_shared(&mut self, op: Arc<dyn Op>, inputs: &[Var]) -> Result<Var, AdError> {
        let node = self.nodes.len();
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.forward(&values)?;
        if !all_finite(&out) {
            return Err(AdError::NonFinite {
                node,
                op: op.name(),
                phase: Phase::Forward,
            });
        }
        let idx = self.push(Kind::Apply(op), inputs.iter().map(|v| v.0).collect(), out);
        Ok(Var(idx))
    }

    /// Backward pass from a scalar output with seed 1.
    pub fn backward(&self, output: Var) -> Result<GradBundle, AdError> {
        let shape = self.nodes[output.0].value.dim();
        if shape != (1, 1) {
            return Err(AdError::Seed {
                expected: (1, 1),
                got: shape,
            });
        }
        self.backward_with_seed(output, Tensor::from_elem((1, 1), 1.0))
    }

    /// Backward pass with an explicit output adjoint.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<GradBundle, AdError> {
        let expected = self.nodes[output.0].value.dim();
        if seed.dim() != expected {
            return Err(AdError::Seed {
                expected,
                got: seed.dim(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(grad) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !all_finite(&grad) {
                return Err(AdError::NonFinite {
                    node: idx,
                    op: node.op_name(),
                    phase: Phase::Backward,
                });
            }
            match &node.kind {
                Kind::Leaf => {
                    adj[idx] = Some(grad);
                }
                Kind::Constant => {}
                Kind::Apply(op) => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                    let grads = op.backward(&inputs, &node.value, &grad)?;
                    if grads.len() != node.inputs.len() {
                        return Err(AdError::Kernel {
                            op: op.name(),
                            message: format!("returned {} adjoints for {} inputs", grads.len(), node.inputs.len()),
                        });
                    }
                    for (&input, g) in node.inputs.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if g.dim() != self.nodes[input].value.dim() {
                            return Err(AdError::Shape {
                                op: op.name(),
                                detail: format!(
                                    "adjoint {:?} for input of shape {:?}",
                                    g.dim(),
                                    self.nodes[input].value.dim()
                                ),
                            });
                        }
                        match &mut adj[input] {
                            Some(acc) => *acc += &g,
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }
        let grads = self
            .leaves
            .iter()
            .map(|&leaf| {
                let g = if leaf <= output.0 { adj[leaf].take() } else { None };
                g.unwrap_or_else(|| Tensor::zeros(self.nodes[leaf].value.dim()))
            })
            .collect();
        Ok(GradBundle {
            leaves: self.leaves.clone(),
            grads,
        })
    }

    /// Re-executes every recorded operation from the stored leaf and constant
    /// values and checks that each output is reproduced bit-for-bit.
    pub fn replay(&self) -> Result<(), AdError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match &node.kind {
                Kind::Leaf | Kind::Constant => node.value.clone(),
                Kind::Apply(op) => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    op.forward(&inputs)?
                }
            };
            let same = value.dim() == node.value.dim()
                && value
                    .iter()
                    .zip(node.value.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(AdError::ReplayMismatch {
                    node: idx,
                    op: node.op_name(),
                });
            }
            values.push(value);
        }
        Ok(())
    }
}

/// Gradients for every registered leaf, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    leaves: Vec<usize>,
    grads: Vec<Tensor>,
}

impl GradBundle {
    /// Gradient for a leaf. Panics if `v` is not a leaf of the tape that
    /// produced this bundle.
    pub fn get(&self, v: Var) -> &Tensor {
        self.try_get(v).expect("variable is not a registered leaf")
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().position(|&l| l == v.0).map(|i| &self.grads[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.leaves.iter().map(|&l| Var(l)).zip(self.grads.iter())
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }
}

pub(crate) fn all_finite(t: &Tensor) -> bool {
    t.iter().all(|x| x.is_finite())
}

pub(crate) fn scalar(value: f64) -> Tensor {
    Tensor::from_elem((1, 1), value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x)[[0, 0]], 6.0);
    }

    #[test]
    fn constant_output_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        let c = tape.scalar(5.0);
        let y = tape.scale(c, 2.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x), &array![[0.0, 0.0]]);
    }

    #[test]
    fn unused_later_leaf_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(scalar(2.0));
        let y = tape.scale(x, 4.0).unwrap();
        let z = tape.leaf(scalar(1.0));
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x)[[0, 0]], 4.0);
        assert_eq!(g.get(z)[[0, 0]], 0.0);
    }

    #[test]
    fn non_finite_forward_names_node() {
        let mut tape = Tape::new();
        let x = tape.leaf(scalar(-1.0));
        let err = tape.sqrt(x).unwrap_err();
        match err {
            AdError::NonFinite { node, phase, .. } => {
                assert_eq!(node, 1);
                assert_eq!(phase, Phase::Forward);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_finite_backward_is_an_error() {
        // sqrt(0) is finite but its derivative is not.
        let mut tape = Tape::new();
        let x = tape.leaf(scalar(0.0));
        let y = tape.sqrt(x).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(
            err,
            AdError::NonFinite {
                phase: Phase::Backward,
                ..
            }
        ));
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        assert!(tape.backward(x).is_err());
        assert!(tape.backward_with_seed(x, array![[1.0, 1.0, 1.0]]).is_err());
        let g = tape.backward_with_seed(x, array![[0.5, 2.0]]).unwrap();
        assert_eq!(g.get(x), &array![[0.5, 2.0]]);
    }

    #[test]
    fn replay_reproduces_outputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[0.3, -1.2], [2.0, 0.7]]);
        let b = tape.leaf(array![[1.1], [-0.4]]);
        let m = tape.matmul(a, b).unwrap();
        let t = tape.tanh(m).unwrap();
        let _ = tape.sum(t).unwrap();
        tape.replay().unwrap();
    }
}
