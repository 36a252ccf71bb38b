//! Static reverse-mode differentiation: builds a symbol whose extra outputs
//! are argument gradients.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::GraphError;
use crate::ops::OpKind;
use crate::symbol::{visit_postorder, Node, NodeEntry, Symbol};

/// Name of the head-gradient variable fed to output `index` of `node`.
pub fn head_grad_name(node: &str, index: usize, num_outputs: usize) -> String {
    if num_outputs == 1 {
        format!("{node}_head_grad")
    } else {
        format!("{node}_head_grad{index}")
    }
}

/// Returns a symbol whose outputs are `sym`'s outputs followed by the
/// gradient of every name in `wrt`, in order.
///
/// Loss heads seed their own gradient; every other output gets a
/// head-gradient variable (see [`head_grad_name`]) that must be bound when
/// running backward. Fan-out contributions are summed; arguments the outputs
/// do not depend on get a zero gradient.
pub fn gradient(sym: &Symbol, wrt: &[&str]) -> Result<Symbol, GraphError> {
    let mut order: Vec<Arc<Node>> = Vec::new();
    visit_postorder(sym.outputs(), |n| order.push(n.clone()));
    let index: BTreeMap<usize, usize> = order
        .iter()
        .enumerate()
        .map(|(i, n)| (Arc::as_ptr(n) as usize, i))
        .collect();
    let idx = |n: &Arc<Node>| index[&(Arc::as_ptr(n) as usize)];

    let mut wrt_nodes = Vec::with_capacity(wrt.len());
    for name in wrt {
        let pos = order
            .iter()
            .position(|n| matches!(n.op, OpKind::Variable) && n.name == *name)
            .ok_or_else(|| GraphError::UnknownArgument(name.to_string()))?;
        wrt_nodes.push(pos);
    }

    // Nodes downstream of a requested argument.
    let mut needs = vec![false; order.len()];
    for &w in &wrt_nodes {
        needs[w] = true;
    }
    for (i, n) in order.iter().enumerate() {
        if n.inputs.iter().any(|e| needs[idx(&e.node)]) {
            needs[i] = true;
        }
    }

    let mut contrib: BTreeMap<(usize, usize), Vec<NodeEntry>> = BTreeMap::new();
    let mut seeded = vec![false; order.len()];
    for e in sym.outputs() {
        let i = idx(&e.node);
        if e.node.op.is_loss() {
            seeded[i] = true;
        } else if needs[i] {
            let n_out = e.node.op.num_outputs();
            let name = head_grad_name(&e.node.name, e.index, n_out);
            let head = Symbol::variable(&name)?;
            contrib.entry((i, e.index)).or_default().push(head.outputs()[0].clone());
        }
    }

    for i in (0..order.len()).rev() {
        let node = &order[i];
        if matches!(node.op, OpKind::Variable) || !needs[i] {
            continue;
        }
        let n_out = node.op.num_outputs();
        let has_contrib = (0..n_out).any(|o| contrib.contains_key(&(i, o)));
        if !(seeded[i] || has_contrib) {
            continue;
        }
        let layout = node.op.backward_layout().ok_or_else(|| GraphError::NotDifferentiable {
            op: node.op.name().to_string(),
            node: node.name.clone(),
        })?;
        let mut inputs = Vec::with_capacity(layout.len(n_out));
        if layout.ograd {
            for o in 0..n_out {
                let parts = contrib.remove(&(i, o)).unwrap_or_default();
                let own = NodeEntry { node: node.clone(), index: o };
                inputs.push(sum_entries(parts, &format!("{}_ograd{o}", node.name), own));
            }
        }
        for &k in &layout.inputs {
            inputs.push(node.inputs[k].clone());
        }
        for &o in &layout.outputs {
            inputs.push(NodeEntry { node: node.clone(), index: o });
        }
        let bwd = Symbol::raw_node(
            OpKind::Backward(Box::new(node.op.clone())),
            format!("{}_backward", node.name),
            inputs,
            Some(node.clone()),
        );
        let skip = node.op.non_differentiable_inputs();
        for (k, e) in node.inputs.iter().enumerate() {
            if skip.contains(&k) || !needs[idx(&e.node)] {
                continue;
            }
            contrib
                .entry((idx(&e.node), e.index))
                .or_default()
                .push(NodeEntry { node: bwd.clone(), index: k });
        }
    }

    let mut outputs: Vec<NodeEntry> = sym.outputs().to_vec();
    for (&w, name) in wrt_nodes.iter().zip(wrt) {
        let parts = contrib.remove(&(w, 0)).unwrap_or_default();
        let own = NodeEntry { node: order[w].clone(), index: 0 };
        outputs.push(sum_entries(parts, &format!("{name}_grad"), own));
    }
    Ok(Symbol::from_entries(outputs))
}

/// Sum of gradient contributions; zeros shaped like `like` when empty.
fn sum_entries(mut parts: Vec<NodeEntry>, name: &str, like: NodeEntry) -> NodeEntry {
    match parts.len() {
        0 => NodeEntry {
            node: Symbol::raw_node(OpKind::ZerosLike, format!("{name}_zeros"), vec![like], None),
            index: 0,
        },
        1 => parts.pop().unwrap(),
        n => NodeEntry {
            node: Symbol::raw_node(OpKind::ElementwiseSum(n), format!("{name}_sum"), parts, None),
            index: 0,
        },
    }
}
