use std::sync::Arc;

use super::ops::{self, Op, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<usize>,
    pub(crate) value: Arc<Tensor>,
}

/// Wengert list of evaluated primitives. Nodes are appended in evaluation
/// order, so parents always precede children.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) marked: Vec<usize>,
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

    fn push_leaf(&mut self, value: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf marked as a differentiation root.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        let id = self.push_leaf(Arc::new(value));
        self.marked.push(id.0);
        id
    }

    pub fn input_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        let id = self.push_leaf(value);
        self.marked.push(id.0);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        self.push_leaf(value)
    }

    pub fn marked_inputs(&self) -> Vec<NodeId> {
        self.marked.iter().map(|&i| NodeId(i)).collect()
    }

    pub fn is_marked(&self, id: NodeId) -> bool {
        self.marked.contains(&id.0)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].parents.iter().map(|&p| NodeId(p)).collect()
    }

    /// Number of nodes of the given primitive.
    pub fn count_op(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    pub fn apply(&mut self, op: Op, args: &[NodeId]) -> Result<NodeId> {
        for a in args {
            if a.0 >= self.nodes.len() {
                return Err(Error::Graph(format!("node {} does not exist", a.0)));
            }
        }
        let value = {
            let vals: Vec<&Tensor> = args.iter().map(|a| &*self.nodes[a.0].value).collect();
            ops::eval(&op, &vals)?
        };
        self.nodes.push(Node {
            op,
            parents: args.iter().map(|a| a.0).collect(),
            value: Arc::new(value),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(
            Op::MatMul {
                trans_a: false,
                trans_b: false,
            },
            &[a, b],
        )
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(
            Op::MatMul {
                trans_a: false,
                trans_b: true,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.apply(Op::Affine { scale, shift }, &[x])
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.affine(x, k, 0.0)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.apply(Op::Gather { ids: ids.into() }, &[table])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::LayerNorm { eps: LAYER_NORM_EPS }, &[x])
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Gelu, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Op::Clamp { lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn l1_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::L1Norm, &[x])
    }

    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::L2Norm, &[x])
    }

    pub fn sum_to(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.apply(Op::SumTo { rows, cols }, &[x])
    }

    pub fn expand(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.apply(Op::Expand { rows, cols }, &[x])
    }

    /// Re-evaluates every non-leaf node from its parents' cached values and
    /// reports the first node whose result differs bit-for-bit.
    pub fn verify_replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op == Op::Leaf {
                continue;
            }
            let vals: Vec<&Tensor> = node.parents.iter().map(|&p| &*self.nodes[p].value).collect();
            let again = ops::eval(&node.op, &vals)?;
            let same = again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Graph(format!(
                    "replay of node {i} (`{}`) diverged",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }
}
