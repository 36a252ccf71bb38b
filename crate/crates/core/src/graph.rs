//! Index-based, topologically ordered graph view used by inference,
//! planning and execution.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::GraphError;
use crate::ops::OpKind;
use crate::shape::Shape;

/// Output `index` of node `node`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entry {
    pub node: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GNode {
    pub op: OpKind,
    pub name: String,
    pub inputs: Vec<Entry>,
    pub forward: Option<usize>,
    pub shape_hint: Option<Vec<usize>>,
}

impl GNode {
    pub fn is_variable(&self) -> bool {
        matches!(self.op, OpKind::Variable)
    }
}

/// Nodes are stored so that every input and forward link precedes its user.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub nodes: Vec<GNode>,
    pub outputs: Vec<Entry>,
}

/// Inferred shape of every node output.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeMap {
    pub shapes: Vec<Vec<Shape>>,
}

impl ShapeMap {
    pub fn get(&self, e: Entry) -> &Shape {
        &self.shapes[e.node][e.index]
    }
}

impl Graph {
    pub fn arguments(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_variable()).collect()
    }

    pub fn argument_names(&self) -> Vec<String> {
        self.arguments().into_iter().map(|i| self.nodes[i].name.clone()).collect()
    }

    pub fn find_variable(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.is_variable() && n.name == name)
    }

    pub fn num_edges(&self) -> usize {
        self.nodes.iter().map(|n| n.inputs.len()).sum()
    }

    /// Number of input references to each entry, plus one per graph output.
    pub fn entry_ref_counts(&self) -> Vec<Vec<usize>> {
        let mut counts: Vec<Vec<usize>> =
            self.nodes.iter().map(|n| vec![0; n.op.num_outputs()]).collect();
        for n in &self.nodes {
            for e in &n.inputs {
                counts[e.node][e.index] += 1;
            }
        }
        for e in &self.outputs {
            counts[e.node][e.index] += 1;
        }
        counts
    }

    /// Distinct consumer nodes of each entry, in ascending node order.
    pub fn consumers(&self) -> Vec<Vec<Vec<usize>>> {
        let mut cons: Vec<Vec<Vec<usize>>> =
            self.nodes.iter().map(|n| vec![Vec::new(); n.op.num_outputs()]).collect();
        for (i, n) in self.nodes.iter().enumerate() {
            for e in &n.inputs {
                let list = &mut cons[e.node][e.index];
                if list.last() != Some(&i) {
                    list.push(i);
                }
            }
        }
        cons
    }

    /// Checks the topological storage invariant and arities.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut names: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.len() != n.op.num_inputs() {
                return Err(GraphError::Arity {
                    op: n.op.name().to_string(),
                    expected: format!("{}", n.op.num_inputs()),
                    got: n.inputs.len(),
                });
            }
            for e in n.inputs.iter() {
                if e.node >= i || e.index >= self.nodes[e.node].op.num_outputs() {
                    return Err(GraphError::Inference {
                        node: n.name.clone(),
                        reason: format!("input {}:{} does not precede node {i}", e.node, e.index),
                    });
                }
            }
            if let Some(f) = n.forward {
                if f >= i || !matches!(n.op, OpKind::Backward(_)) {
                    return Err(GraphError::Inference {
                        node: n.name.clone(),
                        reason: "bad forward link".into(),
                    });
                }
            } else if matches!(n.op, OpKind::Backward(_)) {
                return Err(GraphError::Inference {
                    node: n.name.clone(),
                    reason: "gradient node without forward link".into(),
                });
            }
            if n.is_variable() && names.insert(n.name.as_str(), i).is_some() {
                return Err(GraphError::DuplicateVariable(n.name.clone()));
            }
        }
        for e in &self.outputs {
            if e.node >= self.nodes.len() || e.index >= self.nodes[e.node].op.num_outputs() {
                return Err(GraphError::UnknownOutput { index: e.index, count: self.nodes.len() });
            }
        }
        Ok(())
    }

    /// Propagates shapes from the given argument shapes until a fixpoint.
    /// Operators may also deduce their inputs (weights, labels, head
    /// gradients).
    pub fn infer_shapes(&self, given: &BTreeMap<String, Shape>) -> Result<ShapeMap, GraphError> {
        for name in given.keys() {
            if self.find_variable(name).is_none() {
                return Err(GraphError::UnknownArgument(name.clone()));
            }
        }
        let mut table: Vec<Vec<Option<Shape>>> =
            self.nodes.iter().map(|n| vec![None; n.op.num_outputs()]).collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.is_variable() {
                table[i][0] = given.get(&n.name).cloned();
            }
        }
        loop {
            let mut changed = false;
            for (i, n) in self.nodes.iter().enumerate() {
                if n.is_variable() {
                    continue;
                }
                let fwd_shapes;
                let forward = match n.forward {
                    Some(f) => {
                        let fin: Option<Vec<Shape>> = self.nodes[f]
                            .inputs
                            .iter()
                            .map(|e| table[e.node][e.index].clone())
                            .collect();
                        let fout: Option<Vec<Shape>> = table[f].iter().cloned().collect();
                        match (fin, fout) {
                            (Some(a), Some(b)) => {
                                fwd_shapes = (a, b);
                                Some((fwd_shapes.0.as_slice(), fwd_shapes.1.as_slice()))
                            }
                            _ => continue,
                        }
                    }
                    None => None,
                };
                let mut ins: Vec<Option<Shape>> =
                    n.inputs.iter().map(|e| table[e.node][e.index].clone()).collect();
                let before: Vec<bool> = ins.iter().map(|s| s.is_some()).collect();
                let outs = n.op.infer_shape(&mut ins, forward).map_err(|reason| {
                    GraphError::Inference { node: n.name.clone(), reason }
                })?;
                for (k, e) in n.inputs.iter().enumerate() {
                    if !before[k] {
                        if let Some(s) = ins[k].take() {
                            match &table[e.node][e.index] {
                                None => {
                                    table[e.node][e.index] = Some(s);
                                    changed = true;
                                }
                                Some(t) if *t != s => {
                                    return Err(GraphError::Inference {
                                        node: n.name.clone(),
                                        reason: format!("input {k} deduced as {s} but is {t}"),
                                    })
                                }
                                Some(_) => {}
                            }
                        }
                    }
                }
                if let Some(outs) = outs {
                    for (o, s) in outs.into_iter().enumerate() {
                        match &table[i][o] {
                            None => {
                                table[i][o] = Some(s);
                                changed = true;
                            }
                            Some(t) if *t != s => {
                                return Err(GraphError::Inference {
                                    node: n.name.clone(),
                                    reason: format!("output {o} inferred as {s} but was {t}"),
                                })
                            }
                            Some(_) => {}
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut shapes = Vec::with_capacity(self.nodes.len());
        for (i, row) in table.into_iter().enumerate() {
            let mut out = Vec::with_capacity(row.len());
            for s in row {
                match s {
                    Some(s) => out.push(s),
                    None => {
                        let n = &self.nodes[i];
                        let reason = if n.is_variable() {
                            "argument shape is undetermined".to_string()
                        } else {
                            "output shape is undetermined".to_string()
                        };
                        return Err(GraphError::Inference { node: n.name.clone(), reason });
                    }
                }
            }
            shapes.push(out);
        }
        Ok(ShapeMap { shapes })
    }
}
