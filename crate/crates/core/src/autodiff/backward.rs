//! Reverse accumulation.
//!
//! Every vector-Jacobian product is written once against [`Builder`]. The
//! eager builder evaluates it numerically; the recording builder appends the
//! same computation to the tape, so gradients become differentiable nodes.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::ops::{self, Op};
use super::tape::{Node, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this input difference the rescale rule falls back to the derivative.
pub const RESCALE_GUARD: f64 = 1e-10;

/// Gradient per marked input, shaped like the input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientSet {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }

    pub(crate) fn insert(&mut self, id: NodeId, t: Tensor) {
        self.grads.insert(id, t);
    }
}

/// Activations of a forward pass on a baseline input, aligned node-for-node
/// with the tape of the actual input.
#[derive(Clone, Debug)]
pub struct ReferenceContext {
    signature: Vec<(&'static str, Vec<usize>)>,
    values: Vec<Arc<Tensor>>,
}

impl ReferenceContext {
    pub fn from_tape(tape: &Tape) -> Self {
        Self {
            signature: tape
                .nodes
                .iter()
                .map(|n| (n.op.name(), n.parents.clone()))
                .collect(),
            values: tape.nodes.iter().map(|n| Arc::clone(&n.value)).collect(),
        }
    }

    fn check(&self, tape: &Tape, upto: usize) -> Result<()> {
        if self.signature.len() <= upto {
            return Err(Error::Graph(format!(
                "reference has {} nodes, tape needs {}",
                self.signature.len(),
                upto + 1
            )));
        }
        for (i, node) in tape.nodes[..=upto].iter().enumerate() {
            let (name, parents) = &self.signature[i];
            if *name != node.op.name() || *parents != node.parents {
                return Err(Error::Graph(format!(
                    "topology mismatch at node {i}: `{}` vs reference `{name}`",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) trait Builder {
    type V: Clone;
    fn apply(&mut self, op: Op, args: &[Self::V]) -> Result<Self::V>;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    fn node(&self, i: usize) -> &Node;
    fn node_value(&self, i: usize) -> Self::V;
}

struct Eager<'t> {
    tape: &'t Tape,
}

impl Builder for Eager<'_> {
    type V = Arc<Tensor>;

    fn apply(&mut self, op: Op, args: &[Arc<Tensor>]) -> Result<Arc<Tensor>> {
        let vals: Vec<&Tensor> = args.iter().map(|a| &**a).collect();
        ops::eval(&op, &vals).map(Arc::new)
    }

    fn constant(&mut self, t: Tensor) -> Arc<Tensor> {
        Arc::new(t)
    }

    fn value<'a>(&'a self, v: &'a Arc<Tensor>) -> &'a Tensor {
        v
    }

    fn node(&self, i: usize) -> &Node {
        &self.tape.nodes[i]
    }

    fn node_value(&self, i: usize) -> Arc<Tensor> {
        Arc::clone(&self.tape.nodes[i].value)
    }
}

impl Builder for Tape {
    type V = NodeId;

    fn apply(&mut self, op: Op, args: &[NodeId]) -> Result<NodeId> {
        Tape::apply(self, op, args)
    }

    fn constant(&mut self, t: Tensor) -> NodeId {
        Tape::constant(self, t)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        Tape::value(self, *v)
    }

    fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    fn node_value(&self, i: usize) -> NodeId {
        NodeId(i)
    }
}

fn dims<B: Builder>(b: &B, v: &B::V) -> Result<(usize, usize)> {
    b.value(v).dims()
}

/// Sum a broadcast gradient back down to the operand's matrix shape.
fn reduce_to<B: Builder>(b: &mut B, g: B::V, target: (usize, usize)) -> Result<B::V> {
    if dims(b, &g)? == target {
        Ok(g)
    } else {
        b.apply(
            Op::SumTo {
                rows: target.0,
                cols: target.1,
            },
            &[g],
        )
    }
}

fn neg<B: Builder>(b: &mut B, x: B::V) -> Result<B::V> {
    b.apply(
        Op::Affine {
            scale: -1.0,
            shift: 0.0,
        },
        &[x],
    )
}

fn row_mean<B: Builder>(b: &mut B, x: B::V) -> Result<B::V> {
    let (r, c) = dims(b, &x)?;
    let s = b.apply(Op::SumTo { rows: r, cols: 1 }, &[x])?;
    b.apply(
        Op::Affine {
            scale: 1.0 / c as f64,
            shift: 0.0,
        },
        &[s],
    )
}

/// Parent gradients of one node given its output gradient `g`. `rescale`
/// replaces the local derivative of an elementwise nonlinearity.
fn vjp<B: Builder>(
    b: &mut B,
    op: &Op,
    args: &[B::V],
    out: &B::V,
    g: B::V,
    rescale: Option<Tensor>,
) -> Result<Vec<Option<B::V>>> {
    if let Some(m) = rescale {
        let m = b.constant(m);
        return Ok(vec![Some(b.apply(Op::Mul, &[g, m])?)]);
    }
    let grads = match op {
        Op::Leaf => vec![],
        Op::MatMul { trans_a, trans_b } => {
            let (ta, tb) = (*trans_a, *trans_b);
            let (a, bb) = (args[0].clone(), args[1].clone());
            let da = if ta {
                b.apply(
                    Op::MatMul {
                        trans_a: tb,
                        trans_b: true,
                    },
                    &[bb.clone(), g.clone()],
                )?
            } else {
                b.apply(
                    Op::MatMul {
                        trans_a: false,
                        trans_b: !tb,
                    },
                    &[g.clone(), bb.clone()],
                )?
            };
            let db = if tb {
                b.apply(
                    Op::MatMul {
                        trans_a: true,
                        trans_b: ta,
                    },
                    &[g, a],
                )?
            } else {
                b.apply(
                    Op::MatMul {
                        trans_a: !ta,
                        trans_b: false,
                    },
                    &[a, g],
                )?
            };
            vec![Some(da), Some(db)]
        }
        Op::Add | Op::Sub => {
            let sa = dims(b, &args[0])?;
            let sb = dims(b, &args[1])?;
            let da = reduce_to(b, g.clone(), sa)?;
            let gb = if *op == Op::Sub { neg(b, g)? } else { g };
            let db = reduce_to(b, gb, sb)?;
            vec![Some(da), Some(db)]
        }
        Op::Mul => {
            let sa = dims(b, &args[0])?;
            let sb = dims(b, &args[1])?;
            let ga = b.apply(Op::Mul, &[g.clone(), args[1].clone()])?;
            let gb = b.apply(Op::Mul, &[g, args[0].clone()])?;
            vec![Some(reduce_to(b, ga, sa)?), Some(reduce_to(b, gb, sb)?)]
        }
        Op::Div => {
            let sa = dims(b, &args[0])?;
            let sb = dims(b, &args[1])?;
            let ga = b.apply(Op::Div, &[g.clone(), args[1].clone()])?;
            let go = b.apply(Op::Mul, &[g, out.clone()])?;
            let gb = b.apply(Op::Div, &[go, args[1].clone()])?;
            let gb = neg(b, gb)?;
            vec![Some(reduce_to(b, ga, sa)?), Some(reduce_to(b, gb, sb)?)]
        }
        Op::Affine { scale, .. } => vec![Some(b.apply(
            Op::Affine {
                scale: *scale,
                shift: 0.0,
            },
            &[g],
        )?)],
        Op::Expand { .. } => {
            let s = dims(b, &args[0])?;
            vec![Some(reduce_to(b, g, s)?)]
        }
        Op::SumTo { .. } => {
            let (r, c) = dims(b, &args[0])?;
            vec![Some(b.apply(Op::Expand { rows: r, cols: c }, &[g])?)]
        }
        Op::Gather { ids } => {
            let rows = dims(b, &args[0])?.0;
            vec![Some(b.apply(
                Op::ScatterAdd {
                    ids: Arc::clone(ids),
                    rows,
                },
                &[g],
            )?)]
        }
        Op::ScatterAdd { ids, .. } => vec![Some(b.apply(
            Op::Gather {
                ids: Arc::clone(ids),
            },
            &[g],
        )?)],
        Op::Softmax => {
            let gy = b.apply(Op::Mul, &[g.clone(), out.clone()])?;
            let (r, _) = dims(b, &gy)?;
            let s = b.apply(Op::SumTo { rows: r, cols: 1 }, &[gy])?;
            let centered = b.apply(Op::Sub, &[g, s])?;
            vec![Some(b.apply(Op::Mul, &[out.clone(), centered])?)]
        }
        Op::LayerNorm { eps } => {
            let rstd = b.apply(Op::RowRstd { eps: *eps }, &[args[0].clone()])?;
            let mg = row_mean(b, g.clone())?;
            let gy = b.apply(Op::Mul, &[g.clone(), out.clone()])?;
            let mgy = row_mean(b, gy)?;
            let t1 = b.apply(Op::Sub, &[g, mg])?;
            let t2 = b.apply(Op::Mul, &[out.clone(), mgy])?;
            let inner = b.apply(Op::Sub, &[t1, t2])?;
            vec![Some(b.apply(Op::Mul, &[inner, rstd])?)]
        }
        Op::RowRstd { eps } => {
            let (_, c) = dims(b, &args[0])?;
            let y = b.apply(Op::LayerNorm { eps: *eps }, &[args[0].clone()])?;
            let r2 = b.apply(Op::Mul, &[out.clone(), out.clone()])?;
            let gr = b.apply(Op::Mul, &[g, r2])?;
            let gr = b.apply(
                Op::Affine {
                    scale: -1.0 / c as f64,
                    shift: 0.0,
                },
                &[gr],
            )?;
            vec![Some(b.apply(Op::Mul, &[y, gr])?)]
        }
        Op::Gelu => {
            let d = b.apply(Op::GeluGrad, &[args[0].clone()])?;
            vec![Some(b.apply(Op::Mul, &[g, d])?)]
        }
        Op::GeluGrad => {
            let d = b.apply(Op::GeluGrad2, &[args[0].clone()])?;
            vec![Some(b.apply(Op::Mul, &[g, d])?)]
        }
        Op::GeluGrad2 => {
            return Err(Error::Graph(
                "third-order derivatives of gelu are not supported".into(),
            ))
        }
        Op::Tanh => {
            let y2 = b.apply(Op::Mul, &[out.clone(), out.clone()])?;
            let d = b.apply(
                Op::Affine {
                    scale: -1.0,
                    shift: 1.0,
                },
                &[y2],
            )?;
            vec![Some(b.apply(Op::Mul, &[g, d])?)]
        }
        Op::Sigmoid => {
            let one_minus = b.apply(
                Op::Affine {
                    scale: -1.0,
                    shift: 1.0,
                },
                &[out.clone()],
            )?;
            let d = b.apply(Op::Mul, &[out.clone(), one_minus])?;
            vec![Some(b.apply(Op::Mul, &[g, d])?)]
        }
        Op::Log => vec![Some(b.apply(Op::Div, &[g, args[0].clone()])?)],
        Op::Exp => vec![Some(b.apply(Op::Mul, &[g, out.clone()])?)],
        Op::Clamp { lo, hi } => {
            let mask = b
                .value(&args[0])
                .map(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
            let mask = b.constant(mask);
            vec![Some(b.apply(Op::Mul, &[g, mask])?)]
        }
        Op::Sum | Op::Mean | Op::L1Norm => {
            let (r, c) = dims(b, &args[0])?;
            let mut e = b.apply(Op::Expand { rows: r, cols: c }, &[g])?;
            if *op == Op::Mean {
                e = b.apply(
                    Op::Affine {
                        scale: 1.0 / (r * c).max(1) as f64,
                        shift: 0.0,
                    },
                    &[e],
                )?;
            }
            if *op == Op::L1Norm {
                let sign = b.value(&args[0]).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let sign = b.constant(sign);
                e = b.apply(Op::Mul, &[e, sign])?;
            }
            vec![Some(e)]
        }
        Op::L2Norm => {
            let (r, c) = dims(b, &args[0])?;
            if b.value(out).data()[0] == 0.0 {
                vec![Some(b.constant(Tensor::zeros(&[r, c])))]
            } else {
                let q = b.apply(Op::Div, &[g, out.clone()])?;
                let q = b.apply(Op::Expand { rows: r, cols: c }, &[q])?;
                vec![Some(b.apply(Op::Mul, &[args[0].clone(), q])?)]
            }
        }
    };
    Ok(grads)
}

/// Which nodes up to `upto` depend on any of `roots`.
fn dependency_mask<B: Builder>(b: &B, upto: usize, roots: &[usize]) -> Vec<bool> {
    let mut dep = vec![false; upto + 1];
    for &r in roots {
        if r <= upto {
            dep[r] = true;
        }
    }
    for i in 0..=upto {
        if !dep[i] && b.node(i).parents.iter().any(|&p| dep[p]) {
            dep[i] = true;
        }
    }
    dep
}

fn backprop<B: Builder>(
    b: &mut B,
    output: usize,
    seed: B::V,
    roots: &[usize],
    reference: Option<&ReferenceContext>,
) -> Result<Vec<Option<B::V>>> {
    let dep = dependency_mask(b, output, roots);
    let mut is_root = vec![false; output + 1];
    for &r in roots {
        if r <= output {
            is_root[r] = true;
        }
    }
    let mut grads: Vec<Option<B::V>> = vec![None; output + 1];
    grads[output] = Some(seed);
    for i in (0..=output).rev() {
        let Some(g) = grads[i].take() else { continue };
        if !dep[i] {
            continue;
        }
        if is_root[i] {
            grads[i] = Some(g.clone());
        }
        let (op, parents) = {
            let n = b.node(i);
            (n.op.clone(), n.parents.clone())
        };
        if op == Op::Leaf {
            continue;
        }
        if !parents.iter().any(|&p| dep[p]) {
            continue;
        }
        let rescale = match reference {
            Some(r) if op.is_elementwise_nonlinear() => {
                let x = b.node(parents[0]).value.clone();
                let y = b.node(i).value.clone();
                let xr = &r.values[parents[0]];
                let yr = &r.values[i];
                let local = ops::local_derivative(&op, &x, &y)?;
                let m: Vec<f64> = (0..x.len())
                    .map(|k| {
                        let dx = x.data()[k] - xr.data()[k];
                        if dx.abs() < RESCALE_GUARD {
                            local.data()[k]
                        } else {
                            (y.data()[k] - yr.data()[k]) / dx
                        }
                    })
                    .collect();
                let (rr, cc) = x.dims()?;
                Some(Tensor::from_parts(rr, cc, m))
            }
            _ => None,
        };
        let args: Vec<B::V> = parents.iter().map(|&p| b.node_value(p)).collect();
        let out = b.node_value(i);
        let pgrads = vjp(b, &op, &args, &out, g, rescale)?;
        for (p, pg) in parents.iter().zip(pgrads) {
            let Some(pg) = pg else { continue };
            if !dep[*p] {
                continue;
            }
            grads[*p] = Some(match grads[*p].take() {
                None => pg,
                Some(acc) => b.apply(Op::Add, &[acc, pg])?,
            });
        }
    }
    Ok(grads)
}

fn check_seed(tape: &Tape, output: NodeId, seed: &Tensor) -> Result<()> {
    if output.0 >= tape.nodes.len() {
        return Err(Error::Graph(format!("node {} does not exist", output.0)));
    }
    let out = tape.value(output);
    if out.dims()? != seed.dims()? {
        return Err(Error::ShapeMismatch {
            op: "backward seed",
            lhs: out.shape().to_vec(),
            rhs: seed.shape().to_vec(),
        });
    }
    if !seed.is_finite() {
        return Err(Error::Numeric("backward seed is not finite".into()));
    }
    Ok(())
}

fn finish(tape: &Tape, roots: &[usize], grads: Vec<Option<Arc<Tensor>>>) -> Result<Vec<Tensor>> {
    roots
        .iter()
        .map(|&r| {
            let shape = tape.nodes[r].value.shape().to_vec();
            match grads.get(r).and_then(|g| g.as_ref()) {
                Some(g) => (**g).clone().reshape(shape),
                None => Ok(Tensor::zeros(&shape)),
            }
        })
        .collect()
}

impl Tape {
    /// Gradients of `<seed, output>` with respect to every marked input.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<GradientSet> {
        let roots = self.marked.clone();
        let grads = self.backward_wrt(output, seed, &self.marked_inputs())?;
        let mut set = GradientSet::default();
        for (r, g) in roots.into_iter().zip(grads) {
            set.insert(NodeId(r), g);
        }
        Ok(set)
    }

    /// Gradients of `<seed, output>` with respect to arbitrary nodes.
    pub fn backward_wrt(&self, output: NodeId, seed: &Tensor, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        check_seed(self, output, seed)?;
        let roots: Vec<usize> = wrt.iter().map(|n| n.0).collect();
        let mut eager = Eager { tape: self };
        let grads = backprop(&mut eager, output.0, Arc::new(seed.clone()), &roots, None)?;
        finish(self, &roots, grads)
    }

    /// Records the backward pass on this tape and returns gradient nodes,
    /// which can themselves be differentiated.
    pub fn grad_graph(&mut self, output: NodeId, seed: &Tensor, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        check_seed(self, output, seed)?;
        let roots: Vec<usize> = wrt.iter().map(|n| n.0).collect();
        let seed = self.constant(seed.clone());
        let grads = backprop(self, output.0, seed, &roots, None)?;
        let mut out = Vec::with_capacity(roots.len());
        for r in roots {
            out.push(match grads.get(r).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.nodes[r].value.shape().to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            });
        }
        Ok(out)
    }

    /// DeepLift multipliers with respect to every marked input: linear
    /// primitives backpropagate as usual, elementwise nonlinearities use
    /// `(y - y_ref) / (x - x_ref)`, and every other primitive its gradient.
    pub fn deeplift_multipliers(
        &self,
        output: NodeId,
        seed: &Tensor,
        reference: &ReferenceContext,
    ) -> Result<GradientSet> {
        check_seed(self, output, seed)?;
        reference.check(self, output.0)?;
        let roots = self.marked.clone();
        let mut eager = Eager { tape: self };
        let grads = backprop(
            &mut eager,
            output.0,
            Arc::new(seed.clone()),
            &roots,
            Some(reference),
        )?;
        let tensors = finish(self, &roots, grads)?;
        let mut set = GradientSet::default();
        for (r, g) in roots.into_iter().zip(tensors) {
            set.insert(NodeId(r), g);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.value(y).item().unwrap(), 9.0);
        assert_eq!(t.count_op("mul"), 1);
        let g = t.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row_vector(vec![0.3, -1.2, 2.0, 0.0]));
        let s = t.softmax(x).unwrap();
        let y = t.sum(s).unwrap();
        let g = t.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert!(g.get(x).unwrap().max_abs() < 1e-16);
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row_vector(vec![1.0, 2.0]));
        let y = t.tanh(x).unwrap();
        assert!(t.backward(y, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn unreachable_inputs_get_zero_gradients() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(2.0));
        let z = t.input(Tensor::row_vector(vec![1.0, 1.0]));
        let y = t.exp(x).unwrap();
        let g = t.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn second_derivative_through_grad_graph() {
        // y = x^3 -> dy/dx = 3x^2 -> d2y/dx2 = 6x
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(2.0));
        let x2 = t.mul(x, x).unwrap();
        let y = t.mul(x2, x).unwrap();
        let dx = t.grad_graph(y, &Tensor::scalar(1.0), &[x]).unwrap()[0];
        assert!((t.value(dx).item().unwrap() - 12.0).abs() < 1e-12);
        let g = t.backward(dx, &Tensor::scalar(1.0)).unwrap();
        assert!((g.get(x).unwrap().item().unwrap() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn deeplift_rejects_different_topology() {
        let mut a = Tape::new();
        let x = a.input(Tensor::scalar(1.0));
        let y = a.tanh(x).unwrap();
        let mut b = Tape::new();
        let xb = b.input(Tensor::scalar(0.0));
        b.sigmoid(xb).unwrap();
        let r = ReferenceContext::from_tape(&b);
        assert!(a.deeplift_multipliers(y, &Tensor::scalar(1.0), &r).is_err());
    }
}
