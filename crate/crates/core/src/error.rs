use alloc::string::String;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("shape must have rank >= 1")]
    EmptyRank,
    #[error("dimension {axis} is zero")]
    ZeroDim { axis: usize },
    #[error("element count exceeds 2^31")]
    TooLarge,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("operator `{op}` expects {expected} inputs, got {got}")]
    Arity { op: String, expected: String, got: usize },
    #[error("operator `{op}`: bad attribute `{key}`: {reason}")]
    Attr { op: String, key: String, reason: String },
    #[error("input symbol has {0} outputs; composition needs exactly one")]
    MultiOutputInput(usize),
    #[error("variable name `{0}` is used by two distinct variables")]
    DuplicateVariable(String),
    #[error("shape inference failed at node `{node}`: {reason}")]
    Inference { node: String, reason: String },
    #[error("operator `{op}` at node `{node}` is not differentiable")]
    NotDifferentiable { op: String, node: String },
    #[error("unknown argument `{0}`")]
    UnknownArgument(String),
    #[error("output index {index} out of range ({count} outputs)")]
    UnknownOutput { index: usize, count: usize },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("label {label} out of range for {classes} classes at row {row}")]
    LabelOutOfRange { label: i64, classes: usize, row: usize },
    #[error("operator `{0}` has no kernel for this direction")]
    Unsupported(String),
}
