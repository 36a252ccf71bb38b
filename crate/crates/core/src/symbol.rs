//! Composable, immutable multi-output symbolic expressions.
//!
//! A [`Symbol`] is a list of output entries into a DAG of reference-counted
//! nodes. Composition allocates new nodes that point at existing ones, so
//! symbols share structure and are never mutated after construction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::GraphError;
use crate::graph::{Entry, GNode, Graph};
use crate::ops::{OpKind, PUBLIC_OPERATORS};

#[derive(Debug)]
pub struct Node {
    pub op: OpKind,
    pub name: String,
    pub inputs: Vec<NodeEntry>,
    /// Forward node of a gradient node. Orders the two without carrying data.
    pub forward: Option<Arc<Node>>,
    /// Variable shape hint; a zero dimension stands for the batch size.
    pub shape_hint: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct NodeEntry {
    pub node: Arc<Node>,
    pub index: usize,
}

impl NodeEntry {
    fn key(&self) -> (usize, usize) {
        (Arc::as_ptr(&self.node) as usize, self.index)
    }
}

#[derive(Clone, Debug)]
pub struct Symbol {
    outputs: Vec<NodeEntry>,
}

fn check_name(name: &str) -> Result<(), GraphError> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == '=' || c == '"') {
        return Err(GraphError::Attr {
            op: "name".into(),
            key: name.to_string(),
            reason: "names must be non-empty without whitespace, '=' or quotes".into(),
        });
    }
    Ok(())
}

impl Symbol {
    pub fn variable(name: &str) -> Result<Symbol, GraphError> {
        Self::variable_node(name, None)
    }

    /// Variable carrying a shape hint (`0` marks the batch dimension).
    pub fn variable_with_hint(name: &str, hint: &[usize]) -> Result<Symbol, GraphError> {
        Self::variable_node(name, Some(hint.to_vec()))
    }

    fn variable_node(name: &str, shape_hint: Option<Vec<usize>>) -> Result<Symbol, GraphError> {
        check_name(name)?;
        let node = Arc::new(Node {
            op: OpKind::Variable,
            name: name.to_string(),
            inputs: Vec::new(),
            forward: None,
            shape_hint,
        });
        Ok(Symbol { outputs: vec![NodeEntry { node, index: 0 }] })
    }

    /// Applies a registered operator by name with an automatically chosen
    /// node name `<hint><k>`, where `k` is one more than the number of
    /// same-kind operators already upstream.
    pub fn apply(op: &str, attrs: &[(&str, &str)], inputs: &[&Symbol]) -> Result<Symbol, GraphError> {
        Self::apply_named(None, op, attrs, inputs)
    }

    pub fn apply_named(
        name: Option<&str>,
        op: &str,
        attrs: &[(&str, &str)],
        inputs: &[&Symbol],
    ) -> Result<Symbol, GraphError> {
        if !PUBLIC_OPERATORS.contains(&op) {
            return Err(GraphError::UnknownOperator(op.to_string()));
        }
        let attrs: Vec<(String, String)> =
            attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let kind = OpKind::from_parts(op, &attrs)?;
        Self::apply_op(kind, name, inputs)
    }

    /// Applies an already-constructed operator.
    pub fn apply_op(op: OpKind, name: Option<&str>, inputs: &[&Symbol]) -> Result<Symbol, GraphError> {
        let mut entries = Vec::with_capacity(inputs.len());
        for s in inputs {
            if s.outputs.len() != 1 {
                return Err(GraphError::MultiOutputInput(s.outputs.len()));
            }
            entries.push(s.outputs[0].clone());
        }
        let expected = op.num_inputs();
        let auto = op.auto_inputs();
        let name = match name {
            Some(n) => {
                check_name(n)?;
                n.to_string()
            }
            None => {
                let seen = count_upstream(&entries, op.name());
                format!("{}{}", op.name_hint(), seen + 1)
            }
        };
        if entries.len() != expected {
            let missing = expected.saturating_sub(entries.len());
            if entries.is_empty() || missing == 0 || missing > auto.len() {
                let range = if auto.is_empty() {
                    format!("{expected}")
                } else {
                    format!("{}..={expected}", expected - auto.len())
                };
                return Err(GraphError::Arity {
                    op: op.name().to_string(),
                    expected: range,
                    got: entries.len(),
                });
            }
            for suffix in &auto[auto.len() - missing..] {
                let var_name = if *suffix == "label" && matches!(op, OpKind::SoftmaxOutput) {
                    "label".to_string()
                } else {
                    format!("{name}_{suffix}")
                };
                entries.push(Symbol::variable(&var_name)?.outputs[0].clone());
            }
        }
        let num_outputs = op.num_outputs();
        let node = Arc::new(Node {
            op,
            name,
            inputs: entries,
            forward: None,
            shape_hint: None,
        });
        let sym = Symbol {
            outputs: (0..num_outputs)
                .map(|index| NodeEntry { node: node.clone(), index })
                .collect(),
        };
        sym.check_unique_variables()?;
        Ok(sym)
    }

    /// Gradient-graph node construction; used by autodiff.
    pub(crate) fn raw_node(
        op: OpKind,
        name: String,
        inputs: Vec<NodeEntry>,
        forward: Option<Arc<Node>>,
    ) -> Arc<Node> {
        Arc::new(Node {
            op,
            name,
            inputs,
            forward,
            shape_hint: None,
        })
    }

    pub(crate) fn from_entries(outputs: Vec<NodeEntry>) -> Symbol {
        Symbol { outputs }
    }

    /// Concatenates the outputs of several symbols.
    pub fn group(symbols: &[&Symbol]) -> Result<Symbol, GraphError> {
        let outputs = symbols.iter().flat_map(|s| s.outputs.iter().cloned()).collect();
        let sym = Symbol { outputs };
        sym.check_unique_variables()?;
        Ok(sym)
    }

    pub fn outputs(&self) -> &[NodeEntry] {
        &self.outputs
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Single-output symbol for output `i`.
    pub fn output(&self, i: usize) -> Result<Symbol, GraphError> {
        self.outputs
            .get(i)
            .map(|e| Symbol { outputs: vec![e.clone()] })
            .ok_or(GraphError::UnknownOutput { index: i, count: self.outputs.len() })
    }

    /// Output `index` of the upstream node called `name`.
    pub fn internal(&self, name: &str, index: usize) -> Option<Symbol> {
        let mut found = None;
        visit_postorder(&self.outputs, |n| {
            if found.is_none() && n.name == name && index < n.op.num_outputs() {
                found = Some(NodeEntry { node: n.clone(), index });
            }
        });
        found.map(|e| Symbol { outputs: vec![e] })
    }

    /// Free-variable names in depth-first order.
    pub fn list_arguments(&self) -> Vec<String> {
        let mut names = Vec::new();
        visit_postorder(&self.outputs, |n| {
            if matches!(n.op, OpKind::Variable) {
                names.push(n.name.clone());
            }
        });
        names
    }

    pub fn list_outputs(&self) -> Vec<String> {
        self.outputs
            .iter()
            .map(|e| {
                if e.node.op.num_outputs() == 1 {
                    format!("{}_output", e.node.name)
                } else {
                    format!("{}_output{}", e.node.name, e.index)
                }
            })
            .collect()
    }

    fn check_unique_variables(&self) -> Result<(), GraphError> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let mut dup = None;
        visit_postorder(&self.outputs, |n| {
            if matches!(n.op, OpKind::Variable) {
                let ptr = Arc::as_ptr(n) as usize;
                match seen.get(n.name.as_str()) {
                    Some(&p) if p != ptr => dup = Some(n.name.clone()),
                    _ => {
                        seen.insert(n.name.as_str(), ptr);
                    }
                }
            }
        });
        match dup {
            Some(n) => Err(GraphError::DuplicateVariable(n)),
            None => Ok(()),
        }
    }

    /// Topologically ordered, index-based view of this symbol.
    pub fn to_graph(&self) -> Graph {
        let mut index: BTreeMap<usize, usize> = BTreeMap::new();
        let mut nodes: Vec<GNode> = Vec::new();
        visit_postorder(&self.outputs, |n| {
            let inputs = n
                .inputs
                .iter()
                .map(|e| Entry { node: index[&(Arc::as_ptr(&e.node) as usize)], index: e.index })
                .collect();
            let forward = n.forward.as_ref().map(|f| index[&(Arc::as_ptr(f) as usize)]);
            index.insert(Arc::as_ptr(n) as usize, nodes.len());
            nodes.push(GNode {
                op: n.op.clone(),
                name: n.name.clone(),
                inputs,
                forward,
                shape_hint: n.shape_hint.clone(),
            });
        });
        let outputs = self
            .outputs
            .iter()
            .map(|e| Entry { node: index[&(Arc::as_ptr(&e.node) as usize)], index: e.index })
            .collect();
        Graph { nodes, outputs }
    }

    /// Rebuilds shared nodes from an index-based graph.
    pub fn from_graph(graph: &Graph) -> Symbol {
        let mut built: Vec<Arc<Node>> = Vec::with_capacity(graph.nodes.len());
        for n in &graph.nodes {
            let node = Arc::new(Node {
                op: n.op.clone(),
                name: n.name.clone(),
                inputs: n
                    .inputs
                    .iter()
                    .map(|e| NodeEntry { node: built[e.node].clone(), index: e.index })
                    .collect(),
                forward: n.forward.map(|f| built[f].clone()),
                shape_hint: n.shape_hint.clone(),
            });
            built.push(node);
        }
        Symbol {
            outputs: graph
                .outputs
                .iter()
                .map(|e| NodeEntry { node: built[e.node].clone(), index: e.index })
                .collect(),
        }
    }
}

/// Number of distinct upstream nodes whose operator is named `op_name`.
fn count_upstream(entries: &[NodeEntry], op_name: &str) -> usize {
    let mut count = 0;
    visit_postorder(entries, |n| {
        if n.op.name() == op_name {
            count += 1;
        }
    });
    count
}

/// Iterative post-order DFS over the DAG reachable from `roots`, visiting
/// each node once: forward link first, then inputs in order.
pub(crate) fn visit_postorder<'a>(roots: &'a [NodeEntry], mut f: impl FnMut(&'a Arc<Node>)) {
    let mut visited: BTreeMap<usize, ()> = BTreeMap::new();
    let mut stack: Vec<(&'a Arc<Node>, usize)> = Vec::new();
    for root in roots {
        let key = root.key().0;
        if visited.contains_key(&key) {
            continue;
        }
        visited.insert(key, ());
        stack.push((&root.node, 0));
        while let Some((node, next)) = stack.pop() {
            let deps = node.forward.iter().count() + node.inputs.len();
            if next < deps {
                stack.push((node, next + 1));
                let child: &'a Arc<Node> = if next < node.forward.iter().count() {
                    node.forward.as_ref().unwrap()
                } else {
                    &node.inputs[next - node.forward.iter().count()].node
                };
                let ck = Arc::as_ptr(child) as usize;
                if visited.insert(ck, ()).is_none() {
                    stack.push((child, 0));
                }
            } else {
                f(node);
            }
        }
    }
}
