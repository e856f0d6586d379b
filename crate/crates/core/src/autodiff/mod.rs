//! Minimal reverse-mode automatic differentiation.
//!
//! Define-by-run over a flat arena: every op computes its value eagerly and
//! records what it needs for the backward pass (argmax positions, frozen
//! nearest-neighbor matches, normalization denominators). Node ids are
//! arena indices, so reverse iteration order *is* reverse topological order,
//! and gradient accumulation is deterministic by construction.
//!
//! Graphs are rebuilt every training step and dropped afterwards; parameters
//! enter as leaf copies and their gradients are read back out by id.

mod adam;
mod check;
mod ops;

pub use adam::{adam_step, AdamState};
pub use check::finite_diff_check;

use crate::error::{Error, Result};
use crate::geometry::ChamferMode;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch-norm state: the learnable affine pair plus running
/// statistics consulted in eval mode. The running tensors are updated in
/// place during train-mode forwards; `momentum` is the fraction of the OLD
/// running value retained (running ← μ·running + (1−μ)·batch).
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Op tag plus whatever forward-time context the backward rule needs.
/// Index vectors use u32: desk-scale tensors stay far below 2^32 rows.
pub(crate) enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Affine {
        x: NodeId,
        scale: f64,
    },
    Relu {
        x: NodeId,
    },
    MaxOverSet {
        x: NodeId,
        argmax: Vec<u32>,
    },
    L2Normalize {
        x: NodeId,
        norms: Vec<f64>,
        eps: f64,
    },
    LogSumExp {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<u32>,
    },
    RepeatRows {
        x: NodeId,
        times: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SumAll {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    Chamfer {
        x: NodeId,
        target: Vec<[f64; 3]>,
        mode: ChamferMode,
        nn_xt: Vec<u32>,
        nn_tx: Vec<u32>,
    },
    NPairTerms {
        sims: NodeId,
        pos: Vec<u32>,
    },
    CosineSetLoss {
        pred: NodeId,
        target: Vec<[f64; 3]>,
        oriented: bool,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub needs_grad: bool,
    pub op: Op,
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (inputs, targets, grids).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        value.ensure_finite("constant leaf")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Trainable leaf; `backward` populates its gradient.
    pub fn parameter(&mut self, value: Tensor) -> Result<NodeId> {
        value.ensure_finite("parameter leaf")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Accumulates `contribution` into the gradient slot of `id`.
    pub(crate) fn accumulate(&mut self, id: NodeId, contribution: Tensor) {
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gi, ci) in g.data.iter_mut().zip(&contribution.data) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    pub(crate) fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Reverse-mode accumulation from a scalar root.
    ///
    /// Clears stale gradients first, so a graph may be differentiated from
    /// several roots in sequence (only the most recent gradients persist).
    /// Iterating ids in reverse visits every node after all of its consumers,
    /// and each op accumulates into its parents in a fixed order, making the
    /// result bit-identical across runs.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        let shape = self.nodes[root.0].value.shape.clone();
        self.nodes[root.0].grad = Some(Tensor::full(&shape, 1.0));
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            // Move the op and gradient out so backprop can borrow the graph.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let g = self.nodes[i].grad.take().expect("checked above");
            let r = ops::backprop(self, NodeId(i), &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
            r?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let p = g.parameter(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_parameter_gets_unit_gradient() {
        let mut g = Graph::new();
        let p = g
            .parameter(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_the_parameter() {
        let mut g = Graph::new();
        let data = vec![0.5, -1.5, 2.0];
        let p = g
            .parameter(Tensor::new(vec![3], data.clone()).unwrap())
            .unwrap();
        let sq = g.mul(p, p).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(p).unwrap().data, want);
    }

    #[test]
    fn constants_never_accumulate_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0)).unwrap();
        let p = g.parameter(Tensor::scalar(2.0)).unwrap();
        let y = g.mul(c, p).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data, vec![3.0]);
    }

    #[test]
    fn leaves_reject_non_finite_values() {
        let mut g = Graph::new();
        assert!(g.constant(Tensor::scalar(f64::NAN)).is_err());
        assert!(g.parameter(Tensor::scalar(f64::INFINITY)).is_err());
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut g = Graph::new();
        let p = g
            .parameter(Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 0.0]).unwrap())
            .unwrap();
        let r = g.relu(p);
        let s = g.sum_all(r);
        g.backward(s).unwrap();
        let first = g.grad(p).unwrap().data.clone();
        g.backward(s).unwrap();
        assert_eq!(first, g.grad(p).unwrap().data);
    }
}
