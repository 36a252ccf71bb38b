use alloc::vec;
use alloc::vec::Vec;

use crate::error::GraphError;
use crate::graph::{Entry, GNode, Graph};

/// Keeps only the ancestors of `outputs` (through data inputs and gradient
/// forward links) and makes `outputs` the graph outputs, in the given order.
pub fn prune(g: &Graph, outputs: &[Entry]) -> Result<Graph, GraphError> {
    let mut keep = vec![false; g.nodes.len()];
    let mut stack = Vec::new();
    for e in outputs {
        if e.node >= g.nodes.len() || e.index >= g.nodes[e.node].op.num_outputs() {
            return Err(GraphError::UnknownOutput { index: e.index, count: g.nodes.len() });
        }
        stack.push(e.node);
    }
    while let Some(n) = stack.pop() {
        if keep[n] {
            continue;
        }
        keep[n] = true;
        let node = &g.nodes[n];
        stack.extend(node.inputs.iter().map(|e| e.node));
        stack.extend(node.forward);
    }
    let mut remap = vec![usize::MAX; g.nodes.len()];
    let mut nodes = Vec::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        remap[i] = nodes.len();
        nodes.push(GNode {
            op: n.op.clone(),
            name: n.name.clone(),
            inputs: n.inputs.iter().map(|e| Entry { node: remap[e.node], index: e.index }).collect(),
            forward: n.forward.map(|f| remap[f]),
            shape_hint: n.shape_hint.clone(),
        });
    }
    let outputs = outputs.iter().map(|e| Entry { node: remap[e.node], index: e.index }).collect();
    Ok(Graph { nodes, outputs })
}
