use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    /// Position of the node within its tape.
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// A differentiable operation recorded on the tape.
///
/// Built-in ops and the pipeline's custom ops share this trait; a custom op
/// computes its forward value itself and hands it to [`Tape::apply`].
pub trait Function<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> &[Var];

    /// Gradient for each entry of `inputs()`, in order. `None` for inputs
    /// that do not need one.
    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>>;
}

pub struct BackwardContext<'a, T: Real> {
    tape: &'a Tape<T>,
    output: &'a Tensor<T>,
    needs: Vec<bool>,
}

impl<T: Real> BackwardContext<'_, T> {
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.tape.nodes[v.index()].value
    }

    pub fn output(&self) -> &Tensor<T> {
        self.output
    }

    /// Whether the `i`-th input requires a gradient.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    function: Option<Box<dyn Function<T>>>,
}

/// Reverse-mode gradient graph.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it and
/// the tape itself is a topological order. A tape is single-writer; build one
/// per image batch.
pub struct Tape<T: Real> {
    id: u32,
    nodes: Vec<Node<T>>,
    differentiated: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        self.nodes[v.index()].grad.as_deref()
    }

    pub(crate) fn check(&self, vars: &[Var]) -> Result<()> {
        if vars
            .iter()
            .any(|v| v.tape != self.id || v.index() >= self.nodes.len())
        {
            return Err(TensorError::ForeignVar);
        }
        Ok(())
    }

    /// Records `function` with its precomputed forward `value`.
    pub fn apply(&mut self, function: Box<dyn Function<T>>, value: Tensor<T>) -> Result<Var> {
        self.check(function.inputs())?;
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: function.name(),
            });
        }
        let requires_grad = function
            .inputs()
            .iter()
            .any(|v| self.nodes[v.index()].requires_grad);
        Ok(self.push(value, requires_grad, Some(function)))
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        function: Option<Box<dyn Function<T>>>,
    ) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            function,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Back-propagates from a scalar `loss`, populating the gradient of every
    /// reachable leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(&[loss])?;
        if self.differentiated {
            return Err(TensorError::BackwardTwice);
        }
        let root = loss.index();
        if self.nodes[root].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[root].value.shape().to_vec(),
            ));
        }

        let mut reachable = vec![false; root + 1];
        reachable[root] = true;
        for i in (0..=root).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(f) = &self.nodes[i].function {
                for v in f.inputs() {
                    if v.index() >= i {
                        return Err(TensorError::CyclicGraph {
                            node: i,
                            input: v.index(),
                        });
                    }
                    reachable[v.index()] = true;
                }
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..=root)
            .map(|i| {
                (reachable[i] && self.nodes[i].requires_grad)
                    .then(|| vec![T::zero(); self.nodes[i].value.numel()])
            })
            .collect();
        if let Some(g) = grads[root].as_mut() {
            g[0] = T::one();
        }

        for i in (0..=root).rev() {
            let Some(function) = &self.nodes[i].function else {
                continue;
            };
            let Some(out_grad) = grads[i].take() else {
                continue;
            };
            let inputs = function.inputs();
            let ctx = BackwardContext {
                tape: self,
                output: &self.nodes[i].value,
                needs: inputs
                    .iter()
                    .map(|v| self.nodes[v.index()].requires_grad)
                    .collect(),
            };
            let input_grads = function.backward(&ctx, &out_grad);
            for (v, g) in inputs.iter().zip(input_grads) {
                let (Some(g), Some(acc)) = (g, grads[v.index()].as_mut()) else {
                    continue;
                };
                debug_assert_eq!(g.len(), acc.len(), "{}", function.name());
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if self.nodes[i].function.is_none() {
                self.nodes[i].grad = g;
            }
        }
        self.differentiated = true;
        Ok(())
    }

    /// Clears leaf gradients so the graph can be differentiated again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.differentiated = false;
    }
}
