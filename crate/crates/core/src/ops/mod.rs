//! Operator registry: attributes, shape rules, gradient layouts and in-place
//! eligibility for every operator a graph may contain.

mod fused;
pub mod kernels;

pub use fused::{FusedArg, FusedInstr, FusedProgram, MAX_FUSED_INSTRS};

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::GraphError;
use crate::shape::Shape;

pub type Attrs = Vec<(String, String)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActType {
    Relu,
    Sigmoid,
    Tanh,
}

impl ActType {
    pub fn name(self) -> &'static str {
        match self {
            ActType::Relu => "relu",
            ActType::Sigmoid => "sigmoid",
            ActType::Tanh => "tanh",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Free variable; bound to a tensor at bind time.
    Variable,
    /// `y = x W^T + b`, with inputs of rank > 2 flattened to `(batch, rest)`.
    FullyConnected { num_hidden: usize, no_bias: bool },
    Activation(ActType),
    /// Row softmax; its gradient is cross-entropy against integer labels.
    SoftmaxOutput,
    ElementwiseAdd,
    ElementwiseMul,
    ScalarAdd(f64),
    ScalarMul(f64),
    MatMul,
    Flatten,
    /// n-ary sum, used to accumulate fan-out gradients.
    ElementwiseSum(usize),
    ZerosLike,
    /// Gradient of the wrapped forward operator.
    Backward(Box<OpKind>),
    Fused(FusedProgram),
}

/// Which forward values a gradient node consumes, in input order:
/// output gradients (when `ograd`), then selected forward inputs, then
/// selected forward outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackwardLayout {
    pub ograd: bool,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
}

impl BackwardLayout {
    pub fn len(&self, fwd_outputs: usize) -> usize {
        (if self.ograd { fwd_outputs } else { 0 }) + self.inputs.len() + self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.ograd && self.inputs.is_empty() && self.outputs.is_empty()
    }
}

/// Operator names accepted by [`OpKind::from_parts`] from user code.
pub const PUBLIC_OPERATORS: &[&str] = &[
    "FullyConnected",
    "Activation",
    "SoftmaxOutput",
    "ElementwiseAdd",
    "ElementwiseMul",
    "ScalarAdd",
    "ScalarMul",
    "MatMul",
    "Flatten",
];

fn attr<'a>(attrs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn attr_err(op: &str, key: &str, reason: impl Into<String>) -> GraphError {
    GraphError::Attr {
        op: op.to_string(),
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_scalar(op: &str, attrs: &[(String, String)]) -> Result<f64, GraphError> {
    let v = attr(attrs, "scalar").ok_or_else(|| attr_err(op, "scalar", "missing"))?;
    v.parse().map_err(|_| attr_err(op, "scalar", format!("not a number: {v}")))
}

fn check_keys(op: &str, attrs: &[(String, String)], allowed: &[&str]) -> Result<(), GraphError> {
    for (k, _) in attrs {
        if !allowed.contains(&k.as_str()) {
            return Err(attr_err(op, k, "unknown attribute"));
        }
    }
    Ok(())
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Variable => "Variable",
            OpKind::FullyConnected { .. } => "FullyConnected",
            OpKind::Activation(_) => "Activation",
            OpKind::SoftmaxOutput => "SoftmaxOutput",
            OpKind::ElementwiseAdd => "ElementwiseAdd",
            OpKind::ElementwiseMul => "ElementwiseMul",
            OpKind::ScalarAdd(_) => "ScalarAdd",
            OpKind::ScalarMul(_) => "ScalarMul",
            OpKind::MatMul => "MatMul",
            OpKind::Flatten => "Flatten",
            OpKind::ElementwiseSum(_) => "ElementwiseSum",
            OpKind::ZerosLike => "ZerosLike",
            OpKind::Backward(_) => "_backward",
            OpKind::Fused(_) => "FusedElementwise",
        }
    }

    /// Short prefix used for automatic node naming.
    pub fn name_hint(&self) -> &'static str {
        match self {
            OpKind::FullyConnected { .. } => "fc",
            OpKind::Activation(_) => "act",
            OpKind::SoftmaxOutput => "softmax",
            OpKind::ElementwiseAdd => "add",
            OpKind::ElementwiseMul => "mul",
            OpKind::ScalarAdd(_) => "addscalar",
            OpKind::ScalarMul(_) => "mulscalar",
            OpKind::MatMul => "matmul",
            OpKind::Flatten => "flatten",
            OpKind::ElementwiseSum(_) => "sum",
            OpKind::ZerosLike => "zeros",
            OpKind::Backward(_) => "backward",
            OpKind::Fused(_) => "fused",
            OpKind::Variable => "var",
        }
    }

    pub fn attrs(&self) -> Attrs {
        let kv = |k: &str, v: String| (k.to_string(), v);
        match self {
            OpKind::FullyConnected { num_hidden, no_bias } => {
                let mut a = vec![kv("num_hidden", format!("{num_hidden}"))];
                if *no_bias {
                    a.push(kv("no_bias", "true".to_string()));
                }
                a
            }
            OpKind::Activation(t) => vec![kv("act_type", t.name().to_string())],
            OpKind::ScalarAdd(c) | OpKind::ScalarMul(c) => vec![kv("scalar", format!("{c:?}"))],
            OpKind::ElementwiseSum(n) => vec![kv("num_args", format!("{n}"))],
            OpKind::Backward(fwd) => {
                let mut a = vec![kv("forward_op", fwd.name().to_string())];
                a.extend(fwd.attrs());
                a
            }
            OpKind::Fused(p) => vec![
                kv("num_inputs", format!("{}", p.num_inputs)),
                kv("program", p.encode()),
            ],
            _ => Vec::new(),
        }
    }

    /// Builds an operator from its registered name and string attributes.
    pub fn from_parts(name: &str, attrs: &[(String, String)]) -> Result<Self, GraphError> {
        let op = match name {
            "Variable" => {
                check_keys(name, attrs, &["shape"])?;
                OpKind::Variable
            }
            "FullyConnected" => {
                check_keys(name, attrs, &["num_hidden", "no_bias"])?;
                let nh = attr(attrs, "num_hidden").ok_or_else(|| attr_err(name, "num_hidden", "missing"))?;
                let num_hidden: usize = nh
                    .parse()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| attr_err(name, "num_hidden", format!("expected positive integer, got {nh}")))?;
                let no_bias = match attr(attrs, "no_bias") {
                    None | Some("false") | Some("0") => false,
                    Some("true") | Some("1") => true,
                    Some(v) => return Err(attr_err(name, "no_bias", format!("expected bool, got {v}"))),
                };
                OpKind::FullyConnected { num_hidden, no_bias }
            }
            "Activation" => {
                check_keys(name, attrs, &["act_type"])?;
                let t = match attr(attrs, "act_type") {
                    Some("relu") => ActType::Relu,
                    Some("sigmoid") => ActType::Sigmoid,
                    Some("tanh") => ActType::Tanh,
                    Some(v) => return Err(attr_err(name, "act_type", format!("unknown activation {v}"))),
                    None => return Err(attr_err(name, "act_type", "missing")),
                };
                OpKind::Activation(t)
            }
            "SoftmaxOutput" | "ElementwiseAdd" | "ElementwiseMul" | "MatMul" | "Flatten" | "ZerosLike" => {
                check_keys(name, attrs, &[])?;
                match name {
                    "SoftmaxOutput" => OpKind::SoftmaxOutput,
                    "ElementwiseAdd" => OpKind::ElementwiseAdd,
                    "ElementwiseMul" => OpKind::ElementwiseMul,
                    "MatMul" => OpKind::MatMul,
                    "Flatten" => OpKind::Flatten,
                    _ => OpKind::ZerosLike,
                }
            }
            "ScalarAdd" => {
                check_keys(name, attrs, &["scalar"])?;
                OpKind::ScalarAdd(parse_scalar(name, attrs)?)
            }
            "ScalarMul" => {
                check_keys(name, attrs, &["scalar"])?;
                OpKind::ScalarMul(parse_scalar(name, attrs)?)
            }
            "ElementwiseSum" => {
                check_keys(name, attrs, &["num_args"])?;
                let n = attr(attrs, "num_args")
                    .and_then(|v| v.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| attr_err(name, "num_args", "expected positive integer"))?;
                OpKind::ElementwiseSum(n)
            }
            "_backward" => {
                let fwd_name =
                    attr(attrs, "forward_op").ok_or_else(|| attr_err(name, "forward_op", "missing"))?;
                let rest: Vec<(String, String)> =
                    attrs.iter().filter(|(k, _)| k != "forward_op").cloned().collect();
                let fwd = OpKind::from_parts(fwd_name, &rest)?;
                if fwd.backward_layout().is_none() {
                    return Err(attr_err(name, "forward_op", format!("{fwd_name} has no gradient")));
                }
                OpKind::Backward(Box::new(fwd))
            }
            "FusedElementwise" => {
                check_keys(name, attrs, &["num_inputs", "program"])?;
                let n = attr(attrs, "num_inputs")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| attr_err(name, "num_inputs", "expected integer"))?;
                let text = attr(attrs, "program").ok_or_else(|| attr_err(name, "program", "missing"))?;
                OpKind::Fused(FusedProgram::decode(n, text).map_err(|e| attr_err(name, "program", e))?)
            }
            other => return Err(GraphError::UnknownOperator(other.to_string())),
        };
        Ok(op)
    }

    pub fn num_inputs(&self) -> usize {
        match self {
            OpKind::Variable => 0,
            OpKind::FullyConnected { no_bias, .. } => {
                if *no_bias {
                    2
                } else {
                    3
                }
            }
            OpKind::Activation(_)
            | OpKind::ScalarAdd(_)
            | OpKind::ScalarMul(_)
            | OpKind::Flatten
            | OpKind::ZerosLike => 1,
            OpKind::SoftmaxOutput | OpKind::ElementwiseAdd | OpKind::ElementwiseMul | OpKind::MatMul => 2,
            OpKind::ElementwiseSum(n) => *n,
            OpKind::Backward(fwd) => fwd
                .backward_layout()
                .map(|l| l.len(fwd.num_outputs()))
                .unwrap_or(0),
            OpKind::Fused(p) => p.num_inputs,
        }
    }

    pub fn num_outputs(&self) -> usize {
        match self {
            OpKind::Backward(fwd) => fwd.num_inputs(),
            _ => 1,
        }
    }

    /// Names of inputs that composition creates as variables when omitted,
    /// e.g. `fc1_weight`.
    pub fn auto_inputs(&self) -> &'static [&'static str] {
        match self {
            OpKind::FullyConnected { no_bias: false, .. } => &["weight", "bias"],
            OpKind::FullyConnected { no_bias: true, .. } => &["weight"],
            OpKind::SoftmaxOutput => &["label"],
            _ => &[],
        }
    }

    /// Loss heads seed their own gradient and ignore any head gradient.
    pub fn is_loss(&self) -> bool {
        matches!(self, OpKind::SoftmaxOutput)
    }

    /// Gradient layout, or `None` when the operator is not differentiable.
    pub fn backward_layout(&self) -> Option<BackwardLayout> {
        let l = |ograd, inputs: &[usize], outputs: &[usize]| {
            Some(BackwardLayout {
                ograd,
                inputs: inputs.to_vec(),
                outputs: outputs.to_vec(),
            })
        };
        match self {
            OpKind::FullyConnected { .. } => l(true, &[0, 1], &[]),
            OpKind::Activation(_) => l(true, &[], &[0]),
            OpKind::SoftmaxOutput => l(false, &[1], &[0]),
            OpKind::ElementwiseAdd | OpKind::ScalarAdd(_) | OpKind::ScalarMul(_) => l(true, &[], &[]),
            OpKind::ElementwiseMul | OpKind::MatMul => l(true, &[0, 1], &[]),
            OpKind::Flatten | OpKind::ElementwiseSum(_) => l(true, &[], &[]),
            OpKind::Variable
            | OpKind::ZerosLike
            | OpKind::Backward(_)
            | OpKind::Fused(_) => None,
        }
    }

    /// Inputs that never receive a gradient (integer labels).
    pub fn non_differentiable_inputs(&self) -> &'static [usize] {
        match self {
            OpKind::SoftmaxOutput => &[1],
            _ => &[],
        }
    }

    /// True when the single output element `k` depends only on element `k`
    /// of every input, so it may be computed over an aliased input buffer.
    pub fn is_pointwise(&self) -> bool {
        match self {
            OpKind::Activation(_)
            | OpKind::ElementwiseAdd
            | OpKind::ElementwiseMul
            | OpKind::ScalarAdd(_)
            | OpKind::ScalarMul(_)
            | OpKind::Flatten
            | OpKind::ElementwiseSum(_)
            | OpKind::ZerosLike
            | OpKind::Fused(_) => true,
            OpKind::Backward(fwd) => matches!(
                **fwd,
                OpKind::Activation(_) | OpKind::ScalarAdd(_) | OpKind::ScalarMul(_) | OpKind::Flatten
            ),
            _ => false,
        }
    }

    /// `(input, output)` pairs whose buffers may be shared in place.
    pub fn inplace_pairs(&self) -> Vec<(usize, usize)> {
        match self {
            OpKind::ElementwiseAdd | OpKind::ElementwiseMul => vec![(0, 0), (1, 0)],
            OpKind::ElementwiseSum(n) => (0..*n).map(|i| (i, 0)).collect(),
            OpKind::Fused(p) => (0..p.num_inputs).map(|i| (i, 0)).collect(),
            OpKind::ZerosLike => Vec::new(),
            _ if self.is_pointwise() => vec![(0, 0)],
            _ => Vec::new(),
        }
    }

    /// Shape rule. `inputs` may hold unknown entries; rules that can deduce an
    /// input (weights, labels, head gradients) fill it in. Returns `Ok(None)`
    /// while the outputs are still undetermined. `forward` carries the input
    /// and output shapes of the forward node for gradient operators.
    pub fn infer_shape(
        &self,
        inputs: &mut [Option<Shape>],
        forward: Option<(&[Shape], &[Shape])>,
    ) -> Result<Option<Vec<Shape>>, String> {
        let same_all = |inputs: &mut [Option<Shape>]| -> Result<Option<Vec<Shape>>, String> {
            let known = inputs.iter().flatten().next().cloned();
            let Some(s) = known else { return Ok(None) };
            for slot in inputs.iter_mut() {
                match slot {
                    Some(t) if *t != s => return Err(format!("shape mismatch {t} vs {s}")),
                    Some(_) => {}
                    None => *slot = Some(s.clone()),
                }
            }
            Ok(Some(vec![s]))
        };
        match self {
            OpKind::Variable => Ok(None),
            OpKind::FullyConnected { num_hidden, no_bias } => {
                let Some(x) = inputs[0].clone() else { return Ok(None) };
                if x.rank() < 2 {
                    return Err(format!("data must have rank >= 2, got {x}"));
                }
                let (batch, in_dim) = x.flat2();
                let w = Shape::new([*num_hidden, in_dim]).map_err(|e| format!("{e}"))?;
                fill(&mut inputs[1], w, "weight")?;
                if !no_bias {
                    fill(&mut inputs[2], Shape::new([*num_hidden]).unwrap(), "bias")?;
                }
                Ok(Some(vec![Shape::new([batch, *num_hidden]).map_err(|e| format!("{e}"))?]))
            }
            OpKind::SoftmaxOutput => {
                let Some(x) = inputs[0].clone() else { return Ok(None) };
                if x.rank() != 2 {
                    return Err(format!("softmax input must be rank 2, got {x}"));
                }
                fill(&mut inputs[1], Shape::new([x.dims()[0]]).unwrap(), "label")?;
                Ok(Some(vec![x]))
            }
            OpKind::MatMul => {
                let (Some(a), Some(b)) = (inputs[0].clone(), inputs[1].clone()) else {
                    return Ok(None);
                };
                if a.rank() != 2 || b.rank() != 2 || a.dims()[1] != b.dims()[0] {
                    return Err(format!("matmul dims {a} x {b} do not agree"));
                }
                Ok(Some(vec![Shape::new([a.dims()[0], b.dims()[1]]).unwrap()]))
            }
            OpKind::Flatten => {
                let Some(x) = inputs[0].clone() else { return Ok(None) };
                let (b, rest) = x.flat2();
                Ok(Some(vec![Shape::new([b, rest]).unwrap()]))
            }
            OpKind::Activation(_)
            | OpKind::ScalarAdd(_)
            | OpKind::ScalarMul(_)
            | OpKind::ZerosLike
            | OpKind::ElementwiseAdd
            | OpKind::ElementwiseMul
            | OpKind::ElementwiseSum(_)
            | OpKind::Fused(_) => same_all(inputs),
            OpKind::Backward(fwd) => {
                let Some((fin, fout)) = forward else {
                    return Err("gradient node without forward node".into());
                };
                let layout = fwd.backward_layout().ok_or("forward op not differentiable")?;
                let mut pos = 0;
                if layout.ograd {
                    for s in fout {
                        fill(&mut inputs[pos], s.clone(), "head gradient")?;
                        pos += 1;
                    }
                }
                for &i in &layout.inputs {
                    fill(&mut inputs[pos], fin[i].clone(), "forward input")?;
                    pos += 1;
                }
                for &o in &layout.outputs {
                    fill(&mut inputs[pos], fout[o].clone(), "forward output")?;
                    pos += 1;
                }
                Ok(Some(fin.to_vec()))
            }
        }
    }
}

fn fill(slot: &mut Option<Shape>, want: Shape, what: &str) -> Result<(), String> {
    match slot {
        Some(s) if *s != want => Err(format!("{what} shape {s} does not match expected {want}")),
        Some(_) => Ok(()),
        None => {
            *slot = Some(want);
            Ok(())
        }
    }
}
