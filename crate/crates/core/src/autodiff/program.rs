//! Graph descriptions evaluated onto a tape by primitive name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ops::op_from_name;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub op: String,
    pub args: Vec<String>,
    pub out: String,
    #[serde(default)]
    pub attrs: serde_json::Map<String, serde_json::Value>,
}

/// A straight-line program over named values. Inputs are bound by name at
/// evaluation time; `output` names the result.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub inputs: Vec<String>,
    pub steps: Vec<Step>,
    pub output: String,
}

impl Program {
    pub fn new(inputs: &[&str], output: &str) -> Self {
        Self {
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            steps: Vec::new(),
            output: output.to_string(),
        }
    }

    pub fn step(mut self, op: &str, args: &[&str], out: &str) -> Self {
        self.steps.push(Step {
            op: op.to_string(),
            args: args.iter().map(|s| s.to_string()).collect(),
            out: out.to_string(),
            attrs: Default::default(),
        });
        self
    }

    pub fn step_with(mut self, op: &str, args: &[&str], out: &str, attrs: serde_json::Value) -> Self {
        self.steps.push(Step {
            op: op.to_string(),
            args: args.iter().map(|s| s.to_string()).collect(),
            out: out.to_string(),
            attrs: attrs.as_object().cloned().unwrap_or_default(),
        });
        self
    }

    /// Builds the program onto `tape`, with inputs bound to existing nodes.
    pub fn build(&self, tape: &mut Tape, bound: &BTreeMap<String, NodeId>) -> Result<NodeId> {
        let mut env = bound.clone();
        for step in &self.steps {
            let op = op_from_name(&step.op, &step.attrs)?;
            let args = step
                .args
                .iter()
                .map(|a| {
                    env.get(a)
                        .copied()
                        .ok_or_else(|| Error::Graph(format!("undefined value `{a}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let id = tape.apply(op, &args)?;
            env.insert(step.out.clone(), id);
        }
        env.get(&self.output)
            .copied()
            .ok_or_else(|| Error::Graph(format!("undefined output `{}`", self.output)))
    }
}

fn bind(program: &Program, inputs: &BTreeMap<String, Tensor>) -> Result<(Tape, BTreeMap<String, NodeId>)> {
    let mut tape = Tape::new();
    let mut bound = BTreeMap::new();
    for name in &program.inputs {
        let t = inputs
            .get(name)
            .ok_or_else(|| Error::Graph(format!("missing input `{name}`")))?;
        bound.insert(name.clone(), tape.input(t.clone()));
    }
    Ok((tape, bound))
}

/// Evaluates `program` and returns its output together with the tape.
pub fn forward_record(program: &Program, inputs: &BTreeMap<String, Tensor>) -> Result<(Tensor, Tape, NodeId)> {
    let (mut tape, bound) = bind(program, inputs)?;
    let out = program.build(&mut tape, &bound)?;
    Ok((tape.value(out).clone(), tape, out))
}

/// Gradients of a scalar program by name, via reverse accumulation.
pub fn gradients(program: &Program, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    let (tape, out) = {
        let (mut tape, bound) = bind(program, inputs)?;
        let out = program.build(&mut tape, &bound)?;
        (tape, out)
    };
    let seed = Tensor::filled(tape.value(out).shape(), 1.0);
    let grads = tape.backward(out, &seed)?;
    Ok(program
        .inputs
        .iter()
        .zip(tape.marked_inputs())
        .map(|(n, id)| (n.clone(), grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(&[0]))))
        .collect())
}

/// Central-difference gradient of a scalar program, one coordinate at a time.
pub fn finite_diff_grad(
    program: &Program,
    inputs: &BTreeMap<String, Tensor>,
    h: f64,
) -> Result<BTreeMap<String, Tensor>> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let eval = |inp: &BTreeMap<String, Tensor>| -> Result<f64> {
        let (y, _, _) = forward_record(program, inp)?;
        if y.len() != 1 {
            return Err(Error::Graph(format!(
                "finite differences need a scalar output, got shape {:?}",
                y.shape()
            )));
        }
        Ok(y.data()[0])
    };
    eval(inputs)?;
    let mut out = BTreeMap::new();
    let mut work = inputs.clone();
    for name in &program.inputs {
        let base = inputs[name].clone();
        let mut g = Tensor::zeros(base.shape());
        for k in 0..base.len() {
            let x0 = base.data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = x0 + h;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = x0 - h;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = x0;
            g.data_mut()[k] = (up - down) / (2.0 * h);
        }
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// `max|a - b| / max(max|a|, max|b|, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / a.max_abs().max(b.max_abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn one(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), t)])
    }

    #[test]
    fn square_program() {
        let p = Program::new(&["x"], "y").step("mul", &["x", "x"], "y");
        let (y, tape, _) = forward_record(&p, &one("x", Tensor::scalar(3.0))).unwrap();
        assert_eq!(y.item().unwrap(), 9.0);
        assert_eq!(tape.count_op("mul"), 1);
        let g = finite_diff_grad(&p, &one("x", Tensor::scalar(3.0)), 1e-5).unwrap();
        assert!((g["x"].item().unwrap() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_program_has_zero_gradient() {
        let p = Program::new(&["x"], "y").step_with("affine", &["x"], "y", json!({"scale": 0.0, "shift": 4.0}));
        let inp = one("x", Tensor::scalar(1.5));
        let g = finite_diff_grad(&p, &inp, 1e-5).unwrap();
        assert_eq!(g["x"].item().unwrap(), 0.0);
        assert_eq!(gradients(&p, &inp).unwrap()["x"].item().unwrap(), 0.0);
    }

    #[test]
    fn unsupported_primitive_is_named() {
        let p = Program::new(&["x"], "y").step("relu", &["x"], "y");
        let err = forward_record(&p, &one("x", Tensor::scalar(1.0))).unwrap_err();
        assert!(matches!(err, Error::UnsupportedPrimitive(ref n) if n == "relu"));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let p = Program::new(&["a", "b"], "y").step("matmul", &["a", "b"], "y");
        let inputs = BTreeMap::from([
            ("a".to_string(), Tensor::zeros(&[2, 3])),
            ("b".to_string(), Tensor::zeros(&[4, 2])),
        ]);
        let msg = forward_record(&p, &inputs).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn finite_differences_need_scalar_output() {
        let p = Program::new(&["x"], "y").step("tanh", &["x"], "y");
        let err = finite_diff_grad(&p, &one("x", Tensor::row_vector(vec![1.0, 2.0])), 1e-5);
        assert!(err.is_err());
        assert!(finite_diff_grad(&p, &one("x", Tensor::scalar(1.0)), 0.0).is_err());
    }
}
