//! Primitive operations and their forward kernels.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul { trans_a: bool, trans_b: bool },
    Add,
    Sub,
    Mul,
    Div,
    /// `scale * x + shift`
    Affine { scale: f64, shift: f64 },
    /// Broadcast a `1 x c`, `r x 1` or `1 x 1` matrix to `rows x cols`.
    Expand { rows: usize, cols: usize },
    /// Sum over broadcast axes down to `rows x cols`.
    SumTo { rows: usize, cols: usize },
    /// Row lookup `table[ids]`.
    Gather { ids: Arc<[usize]> },
    /// Scatter rows of the source into a zero `rows x cols` matrix.
    ScatterAdd { ids: Arc<[usize]>, rows: usize },
    /// Row-wise softmax.
    Softmax,
    /// Row-wise standardization without affine parameters.
    LayerNorm { eps: f64 },
    /// Row-wise `1 / sqrt(var + eps)` as an `r x 1` column.
    RowRstd { eps: f64 },
    Gelu,
    GeluGrad,
    GeluGrad2,
    Tanh,
    Sigmoid,
    Log,
    Exp,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    L1Norm,
    L2Norm,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Affine { .. } => "affine",
            Op::Expand { .. } => "expand",
            Op::SumTo { .. } => "sum_to",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::RowRstd { .. } => "row_rstd",
            Op::Gelu => "gelu",
            Op::GeluGrad => "gelu_grad",
            Op::GeluGrad2 => "gelu_grad2",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::L1Norm => "l1_norm",
            Op::L2Norm => "l2_norm",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::MatMul { .. } | Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            _ => 1,
        }
    }

    /// Elementwise nonlinearities receive the rescale rule under DeepLift.
    pub fn is_elementwise_nonlinear(&self) -> bool {
        matches!(
            self,
            Op::Gelu | Op::Tanh | Op::Sigmoid | Op::Log | Op::Exp | Op::Clamp { .. }
        )
    }
}

fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ar, ac) = a.dims()?;
    let (br, bc) = b.dims()?;
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(ar, br), dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (r, c) = broadcast_dims(op, a, b)?;
    let (ar, ac) = a.dims()?;
    let (br, bc) = b.dims()?;
    let (ad, bd) = (a.data(), b.data());
    if ar == br && ac == bc {
        let data = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(r, c, data));
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ai = if ar == 1 { 0 } else { i };
        let bi = if br == 1 { 0 } else { i };
        for j in 0..c {
            let x = ad[ai * ac + if ac == 1 { 0 } else { j }];
            let y = bd[bi * bc + if bc == 1 { 0 } else { j }];
            data.push(f(x, y));
        }
    }
    Ok(Tensor::from_parts(r, c, data))
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let (r, c) = x.dims()?;
    Ok(Tensor::from_parts(r, c, x.data().iter().map(|&v| f(v)).collect()))
}

pub fn gelu(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_A * x * x * x)).tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_grad2(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_A * x * x * x)).tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_A * x * x);
    let ddu = 6.0 * GELU_K * GELU_A * x;
    (1.0 - t * t) * (du + 0.5 * x * (ddu - 2.0 * t * du * du))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn check_arity(op: &Op, n: usize) -> Result<()> {
    if op.arity() != n {
        return Err(Error::Graph(format!(
            "`{}` takes {} argument(s), got {n}",
            op.name(),
            op.arity()
        )));
    }
    Ok(())
}

/// Forward kernel of a primitive.
pub fn eval(op: &Op, args: &[&Tensor]) -> Result<Tensor> {
    check_arity(op, args.len())?;
    match op {
        Op::Leaf => Err(Error::Graph("leaf nodes carry their own value".into())),
        Op::MatMul { trans_a, trans_b } => tensor::matmul(args[0], args[1], *trans_a, *trans_b),
        Op::Add => binary("add", args[0], args[1], |a, b| a + b),
        Op::Sub => binary("sub", args[0], args[1], |a, b| a - b),
        Op::Mul => binary("mul", args[0], args[1], |a, b| a * b),
        Op::Div => binary("div", args[0], args[1], |a, b| a / b),
        Op::Affine { scale, shift } => unary(args[0], |x| scale * x + shift),
        Op::Expand { rows, cols } => {
            let x = args[0];
            let (r, c) = x.dims()?;
            if !((r == *rows || r == 1) && (c == *cols || c == 1)) {
                return Err(Error::ShapeMismatch {
                    op: "expand",
                    lhs: x.shape().to_vec(),
                    rhs: vec![*rows, *cols],
                });
            }
            binary("expand", &Tensor::zeros(&[*rows, *cols]), x, |_, b| b)
        }
        Op::SumTo { rows, cols } => {
            let x = args[0];
            let (r, c) = x.dims()?;
            if !((*rows == r || *rows == 1) && (*cols == c || *cols == 1)) {
                return Err(Error::ShapeMismatch {
                    op: "sum_to",
                    lhs: x.shape().to_vec(),
                    rhs: vec![*rows, *cols],
                });
            }
            let mut out = vec![0.0; rows * cols];
            let d = x.data();
            for i in 0..r {
                let oi = if *rows == 1 { 0 } else { i };
                for j in 0..c {
                    let oj = if *cols == 1 { 0 } else { j };
                    out[oi * cols + oj] += d[i * c + j];
                }
            }
            Ok(Tensor::from_parts(*rows, *cols, out))
        }
        Op::Gather { ids } => {
            let table = args[0];
            let (r, c) = table.dims()?;
            let mut out = Vec::with_capacity(ids.len() * c);
            for (pos, &id) in ids.iter().enumerate() {
                if id >= r {
                    return Err(Error::TokenOutOfRange {
                        position: pos,
                        id,
                        vocab: r,
                    });
                }
                out.extend_from_slice(table.row(id));
            }
            Ok(Tensor::from_parts(ids.len(), c, out))
        }
        Op::ScatterAdd { ids, rows } => {
            let src = args[0];
            let (r, c) = src.dims()?;
            if r != ids.len() {
                return Err(Error::ShapeMismatch {
                    op: "scatter_add",
                    lhs: src.shape().to_vec(),
                    rhs: vec![ids.len(), c],
                });
            }
            let mut out = Tensor::zeros(&[*rows, c]);
            for (i, &id) in ids.iter().enumerate() {
                if id >= *rows {
                    return Err(Error::TokenOutOfRange {
                        position: i,
                        id,
                        vocab: *rows,
                    });
                }
                for (o, v) in out.row_mut(id).iter_mut().zip(src.row(i)) {
                    *o += v;
                }
            }
            Ok(out)
        }
        Op::Softmax => {
            let x = args[0];
            let (r, c) = x.dims()?;
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c.max(1)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            Ok(Tensor::from_parts(r, c, out))
        }
        Op::LayerNorm { eps } => {
            let x = args[0];
            let (r, c) = x.dims()?;
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c.max(1)) {
                let (mean, rstd) = row_stats(row, *eps);
                for v in row.iter_mut() {
                    *v = (*v - mean) * rstd;
                }
            }
            Ok(Tensor::from_parts(r, c, out))
        }
        Op::RowRstd { eps } => {
            let x = args[0];
            let (r, c) = x.dims()?;
            let out = x.data().chunks(c.max(1)).map(|row| row_stats(row, *eps).1).collect();
            Ok(Tensor::from_parts(r, 1, out))
        }
        Op::Gelu => unary(args[0], gelu),
        Op::GeluGrad => unary(args[0], gelu_grad),
        Op::GeluGrad2 => unary(args[0], gelu_grad2),
        Op::Tanh => unary(args[0], f64::tanh),
        Op::Sigmoid => unary(args[0], sigmoid),
        Op::Log => unary(args[0], f64::ln),
        Op::Exp => unary(args[0], f64::exp),
        Op::Clamp { lo, hi } => unary(args[0], |x| x.clamp(*lo, *hi)),
        Op::Sum => Ok(Tensor::scalar(args[0].sum())),
        Op::Mean => {
            let n = args[0].len().max(1) as f64;
            Ok(Tensor::scalar(args[0].sum() / n))
        }
        Op::L1Norm => Ok(Tensor::scalar(args[0].data().iter().map(|v| v.abs()).sum())),
        Op::L2Norm => Ok(Tensor::scalar(
            args[0].data().iter().map(|v| v * v).sum::<f64>().sqrt(),
        )),
    }
}

/// Local derivative `dy/dx` of an elementwise nonlinearity at `x` (with output `y`).
pub fn local_derivative(op: &Op, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    match op {
        Op::Gelu => Ok(x.map(gelu_grad)),
        Op::Tanh => Ok(y.map(|t| 1.0 - t * t)),
        Op::Sigmoid => Ok(y.map(|s| s * (1.0 - s))),
        Op::Log => Ok(x.map(|v| 1.0 / v)),
        Op::Exp => Ok(y.clone()),
        Op::Clamp { lo, hi } => Ok(x.map(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 })),
        other => Err(Error::Graph(format!(
            "`{}` is not an elementwise nonlinearity",
            other.name()
        ))),
    }
}

/// Resolves a primitive by name. Attribute keys: `trans_a`, `trans_b`,
/// `scale`, `shift`, `lo`, `hi`, `eps`, `rows`, `cols`.
pub fn op_from_name(name: &str, attrs: &serde_json::Map<String, serde_json::Value>) -> Result<Op> {
    let f = |key: &str, default: f64| attrs.get(key).and_then(|v| v.as_f64()).unwrap_or(default);
    let b = |key: &str| attrs.get(key).and_then(|v| v.as_bool()).unwrap_or(false);
    let u = |key: &str| {
        attrs
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Graph(format!("`{name}` requires attribute `{key}`")))
    };
    let ids = || -> Result<Arc<[usize]>> {
        let arr = attrs
            .get("ids")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Graph(format!("`{name}` requires attribute `ids`")))?;
        arr.iter()
            .map(|v| {
                v.as_u64()
                    .map(|x| x as usize)
                    .ok_or_else(|| Error::Graph("ids must be non-negative integers".into()))
            })
            .collect()
    };
    Ok(match name {
        "matmul" => Op::MatMul {
            trans_a: b("trans_a"),
            trans_b: b("trans_b"),
        },
        "add" => Op::Add,
        "sub" => Op::Sub,
        "mul" | "multiply" => Op::Mul,
        "div" => Op::Div,
        "affine" => Op::Affine {
            scale: f("scale", 1.0),
            shift: f("shift", 0.0),
        },
        "scale" => Op::Affine {
            scale: f("scale", 1.0),
            shift: 0.0,
        },
        "expand" => Op::Expand {
            rows: u("rows")?,
            cols: u("cols")?,
        },
        "sum_to" => Op::SumTo {
            rows: u("rows")?,
            cols: u("cols")?,
        },
        "gather" | "embedding" => Op::Gather { ids: ids()? },
        "scatter_add" => Op::ScatterAdd {
            ids: ids()?,
            rows: u("rows")?,
        },
        "softmax" => Op::Softmax,
        "layernorm" => Op::LayerNorm {
            eps: f("eps", LAYER_NORM_EPS),
        },
        "gelu" => Op::Gelu,
        "tanh" => Op::Tanh,
        "sigmoid" => Op::Sigmoid,
        "log" => Op::Log,
        "exp" => Op::Exp,
        "clamp" => Op::Clamp {
            lo: f("lo", f64::NEG_INFINITY),
            hi: f("hi", f64::INFINITY),
        },
        "sum" => Op::Sum,
        "mean" => Op::Mean,
        "l1_norm" => Op::L1Norm,
        "l2_norm" => Op::L2Norm,
        other => return Err(Error::UnsupportedPrimitive(other.to_string())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivatives_match_finite_differences() {
        for &x in &[-3.0, -1.2, -0.1, 0.0, 0.4, 1.7, 4.0] {
            assert!((gelu_grad(x) - fd(gelu, x)).abs() < 1e-8, "gelu' at {x}");
            assert!((gelu_grad2(x) - fd(gelu_grad, x)).abs() < 1e-7, "gelu'' at {x}");
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let y = eval(&Op::Softmax, &[&Tensor::row_vector(vec![0.0, 0.0])]).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn broadcasting_rejects_incompatible_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = eval(&Op::Add, &[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn unknown_names_are_reported() {
        let err = op_from_name("relu6", &Default::default()).unwrap_err();
        assert!(err.to_string().contains("relu6"));
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
