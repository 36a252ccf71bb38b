//! Eager reference evaluation of a graph: one fresh buffer per entry, nodes
//! in storage order. Used as the oracle for the scheduled executor.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::KernelError;
use crate::graph::{Entry, Graph, ShapeMap};
use crate::ops::kernels;
use crate::shape::{Element, Shape};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("argument `{0}` is not bound")]
    Unbound(String),
    #[error("argument `{name}` has {got} values, expected {expected}")]
    Length { name: String, got: usize, expected: usize },
    #[error("node `{node}`: {source}")]
    Kernel { node: String, source: KernelError },
}

/// Values of every node output, indexed `[node][output]`.
pub fn evaluate_all<T: Element>(
    g: &Graph,
    shapes: &ShapeMap,
    args: &BTreeMap<String, Vec<T>>,
) -> Result<Vec<Vec<Vec<T>>>, EvalError> {
    let mut values: Vec<Vec<Vec<T>>> = Vec::with_capacity(g.nodes.len());
    for (i, n) in g.nodes.iter().enumerate() {
        if n.is_variable() {
            let v = args.get(&n.name).ok_or_else(|| EvalError::Unbound(n.name.clone()))?;
            let expected = shapes.shapes[i][0].num_elements();
            if v.len() != expected {
                return Err(EvalError::Length { name: n.name.clone(), got: v.len(), expected });
            }
            values.push(vec![v.clone()]);
            continue;
        }
        let in_shapes: Vec<Shape> = n.inputs.iter().map(|e| shapes.get(*e).clone()).collect();
        let mut outs: Vec<Vec<T>> =
            shapes.shapes[i].iter().map(|s| vec![T::zero(); s.num_elements()]).collect();
        {
            let ins: Vec<&[T]> = n.inputs.iter().map(|e| values[e.node][e.index].as_slice()).collect();
            let mut out_refs: Vec<&mut [T]> = outs.iter_mut().map(Vec::as_mut_slice).collect();
            kernels::run(&n.op, &ins, &in_shapes, &mut out_refs)
                .map_err(|source| EvalError::Kernel { node: n.name.clone(), source })?;
        }
        values.push(outs);
    }
    Ok(values)
}

/// Values of the graph outputs.
pub fn evaluate<T: Element>(
    g: &Graph,
    shapes: &ShapeMap,
    args: &BTreeMap<String, Vec<T>>,
) -> Result<Vec<Vec<T>>, EvalError> {
    let all = evaluate_all(g, shapes, args)?;
    Ok(g.outputs.iter().map(|&Entry { node, index }| all[node][index].clone()).collect())
}
