use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{Entry, GNode, Graph};
use crate::ops::{FusedArg, FusedInstr, FusedProgram, OpKind, MAX_FUSED_INSTRS};

fn fusible(op: &OpKind) -> bool {
    matches!(
        op,
        OpKind::ElementwiseAdd | OpKind::ElementwiseMul | OpKind::ScalarAdd(_) | OpKind::ScalarMul(_)
    )
}

/// Replaces maximal trees of elementwise/scalar nodes by single
/// `FusedElementwise` nodes. A node is absorbed into its consumer only when
/// that consumer is its sole user and it is neither a graph output nor the
/// forward node of a gradient node. Per-element operation order is kept, so
/// results are bit-identical.
pub fn fuse(g: &Graph) -> Graph {
    let n = g.nodes.len();
    let refs = g.entry_ref_counts();
    let mut pinned = vec![false; n];
    for node in &g.nodes {
        if let Some(f) = node.forward {
            pinned[f] = true;
        }
    }
    // absorbable[i]: i may become an interior node of its consumer's region.
    let mut absorbable = vec![false; n];
    for node in &g.nodes {
        if !fusible(&node.op) {
            continue;
        }
        for e in &node.inputs {
            let p = e.node;
            if fusible(&g.nodes[p].op) && refs[p][0] == 1 && !pinned[p] {
                absorbable[p] = true;
            }
        }
    }

    let mut absorbed = vec![false; n];
    let mut programs: Vec<Option<(FusedProgram, Vec<Entry>)>> = vec![None; n];
    for root in (0..n).rev() {
        if absorbed[root] || !fusible(&g.nodes[root].op) {
            continue;
        }
        let mut b = Builder {
            g,
            absorbable: &absorbable,
            instrs: Vec::new(),
            inputs: Vec::new(),
            members: Vec::new(),
        };
        b.emit(root);
        if b.members.len() >= 2 {
            for &m in &b.members[1..] {
                absorbed[m] = true;
            }
            let prog = FusedProgram { num_inputs: b.inputs.len(), instrs: b.instrs };
            programs[root] = Some((prog, b.inputs));
        }
    }

    let mut remap = vec![usize::MAX; n];
    let mut nodes = Vec::with_capacity(n);
    let map = |remap: &[usize], e: &Entry| Entry { node: remap[e.node], index: e.index };
    for (i, node) in g.nodes.iter().enumerate() {
        if absorbed[i] {
            continue;
        }
        remap[i] = nodes.len();
        let (op, inputs) = match programs[i].take() {
            Some((prog, ins)) => (OpKind::Fused(prog), ins.iter().map(|e| map(&remap, e)).collect()),
            None => (node.op.clone(), node.inputs.iter().map(|e| map(&remap, e)).collect()),
        };
        nodes.push(GNode {
            op,
            name: node.name.clone(),
            inputs,
            forward: node.forward.map(|f| remap[f]),
            shape_hint: node.shape_hint.clone(),
        });
    }
    let outputs = g.outputs.iter().map(|e| map(&remap, e)).collect();
    Graph { nodes, outputs }
}

struct Builder<'a> {
    g: &'a Graph,
    absorbable: &'a [bool],
    instrs: Vec<FusedInstr>,
    inputs: Vec<Entry>,
    members: Vec<usize>,
}

impl Builder<'_> {
    /// Emits node `v` after its absorbed operands (post-order, operand
    /// order preserved). Operands past the instruction limit stay outside
    /// the region and are fused separately.
    fn emit(&mut self, v: usize) -> FusedArg {
        self.members.push(v);
        let node = &self.g.nodes[v];
        let mut args = [FusedArg::Input(0); 2];
        for (k, e) in node.inputs.iter().enumerate() {
            args[k] = if self.absorbable[e.node] && self.members.len() < MAX_FUSED_INSTRS {
                self.emit(e.node)
            } else {
                self.input(*e)
            };
        }
        self.instrs.push(match node.op {
            OpKind::ElementwiseAdd => FusedInstr::Add(args[0], args[1]),
            OpKind::ElementwiseMul => FusedInstr::Mul(args[0], args[1]),
            OpKind::ScalarAdd(c) => FusedInstr::AddScalar(args[0], c),
            OpKind::ScalarMul(c) => FusedInstr::MulScalar(args[0], c),
            _ => unreachable!(),
        });
        FusedArg::Temp(self.instrs.len() - 1)
    }

    fn input(&mut self, e: Entry) -> FusedArg {
        match self.inputs.iter().position(|x| *x == e) {
            Some(i) => FusedArg::Input(i),
            None => {
                self.inputs.push(e);
                FusedArg::Input(self.inputs.len() - 1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbol::Symbol;

    fn var(n: &str) -> Symbol {
        Symbol::variable(n).unwrap()
    }

    #[test]
    fn a_times_b_plus_one_is_one_node() {
        let (a, b) = (var("a"), var("b"));
        let m = Symbol::apply("ElementwiseMul", &[], &[&a, &b]).unwrap();
        let y = Symbol::apply("ScalarAdd", &[("scalar", "1.0")], &[&m]).unwrap();
        let f = fuse(&y.to_graph());
        assert_eq!(f.nodes.len(), 3);
        match &f.nodes[2].op {
            OpKind::Fused(p) => assert_eq!(p.encode(), "mul:i0:i1;adds:t0:1.0"),
            other => panic!("{other:?}"),
        }
        assert_eq!(f.nodes[2].name, "addscalar1");
        f.validate().unwrap();
    }

    #[test]
    fn requested_intermediate_is_a_boundary() {
        let (a, b) = (var("a"), var("b"));
        let m = Symbol::apply("ElementwiseMul", &[], &[&a, &b]).unwrap();
        let y = Symbol::apply("ScalarAdd", &[("scalar", "1.0")], &[&m]).unwrap();
        let g = Symbol::group(&[&y, &m]).unwrap().to_graph();
        assert_eq!(fuse(&g), g);
    }

    #[test]
    fn non_elementwise_graphs_are_unchanged() {
        let mm = Symbol::apply("MatMul", &[], &[&var("a"), &var("b")]).unwrap().to_graph();
        assert_eq!(fuse(&mm), mm);
    }

    #[test]
    fn long_chains_split_at_the_instruction_limit() {
        let mut s = var("x");
        for _ in 0..40 {
            s = Symbol::apply("ScalarMul", &[("scalar", "1.5")], &[&s]).unwrap();
        }
        let f = fuse(&s.to_graph());
        f.validate().unwrap();
        let sizes: Vec<usize> = f.nodes[1..]
            .iter()
            .map(|n| match &n.op {
                OpKind::Fused(p) => p.instrs.len(),
                _ => 1,
            })
            .collect();
        assert_eq!(sizes.iter().sum::<usize>(), 40);
        assert!(sizes.iter().all(|&k| k <= MAX_FUSED_INSTRS));
        assert_eq!(sizes.len(), 3);
    }

    #[test]
    fn shared_operand_maps_to_one_input() {
        let x = var("x");
        let sq = Symbol::apply("ElementwiseMul", &[], &[&x, &x]).unwrap();
        let y = Symbol::apply("ScalarMul", &[("scalar", "3.0")], &[&sq]).unwrap();
        let f = fuse(&y.to_graph());
        assert_eq!(f.nodes[1].inputs.len(), 1);
        assert_eq!(f.nodes[1].op.attrs()[1].1, "mul:i0:i0;muls:t0:3.0");
    }
}
