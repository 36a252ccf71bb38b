use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::alloc_plan::{AllocationPlan, SlotKind};
use crate::graph::{Entry, Graph, ShapeMap};
use crate::rng::SplitMix64;

/// Graphs with at most this many operator nodes are checked under every
/// execution order; larger ones under [`SAMPLED_ORDERS`] random orders.
pub const EXHAUSTIVE_LIMIT: usize = 10;
pub const SAMPLED_ORDERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("graph plus extra edges has a cycle through node `{0}`")]
    Cycle(String),
    #[error("slot {slot}: `{first}` is still live when `{second}` writes it")]
    Collision { slot: usize, first: String, second: String },
    #[error("slot {slot} has {bytes} bytes but `{node}` needs {needed}")]
    TooSmall { slot: usize, bytes: usize, node: String, needed: usize },
    #[error("slot {slot} of `{node}` is dedicated but shared with `{other}`")]
    SharedDedicated { slot: usize, node: String, other: String },
    #[error("`{node}` cannot write over its input in place")]
    BadInplace { node: String },
    #[error("plan does not match the graph: {0}")]
    Malformed(String),
}

/// Replays execution orders consistent with the graph edges plus the plan's
/// extra edges and reports the first buffer conflict.
///
/// A slot may pass from one entry to another at the same node only through
/// a recorded in-place pair. Orders are enumerated exhaustively (with
/// memoization over executed-node sets) up to [`EXHAUSTIVE_LIMIT`] operator
/// nodes and sampled with `seed` beyond that.
pub fn validate_plan(g: &Graph, shapes: &ShapeMap, plan: &AllocationPlan, seed: u64) -> Result<(), Violation> {
    let ctx = Checker::new(g, plan)?;
    ctx.static_checks(shapes)?;
    let ops = ctx.ops.len();
    if ops <= EXHAUSTIVE_LIMIT {
        let mut seen = BTreeSet::new();
        let mut state = ctx.initial();
        ctx.explore(&mut state, 0, &mut seen)
    } else {
        let mut rng = SplitMix64::new(seed);
        for _ in 0..SAMPLED_ORDERS {
            let mut state = ctx.initial();
            for _ in 0..ops {
                let ready: Vec<usize> = (0..ops).filter(|&k| ctx.is_ready(&state, k)).collect();
                let k = ready[rng.below(ready.len() as u64) as usize];
                ctx.step(&mut state, k)?;
            }
        }
        Ok(())
    }
}

struct Checker<'a> {
    g: &'a Graph,
    plan: &'a AllocationPlan,
    /// Operator node ids; positions in this list index everything below.
    ops: Vec<usize>,
    pos: Vec<usize>,
    /// Operator predecessors (data inputs and extra edges) by position.
    preds: Vec<Vec<usize>>,
    consumers: Vec<Vec<Vec<usize>>>,
    requested: BTreeSet<Entry>,
    inplace: BTreeSet<(Entry, Entry)>,
}

#[derive(Clone)]
struct State {
    done: Vec<bool>,
    remaining: Vec<Vec<usize>>,
    /// Live entry per slot.
    owner: Vec<Option<Entry>>,
}

impl<'a> Checker<'a> {
    fn new(g: &'a Graph, plan: &'a AllocationPlan) -> Result<Self, Violation> {
        if plan.slot_of.len() != g.nodes.len()
            || g.nodes.iter().zip(&plan.slot_of).any(|(n, s)| s.len() != n.op.num_outputs())
            || plan.slot_of.iter().flatten().any(|&s| s >= plan.slot_bytes.len())
            || plan.slot_kind.len() != plan.slot_bytes.len()
        {
            return Err(Violation::Malformed("slot table shape".into()));
        }
        let ops: Vec<usize> = (0..g.nodes.len()).filter(|&i| !g.nodes[i].is_variable()).collect();
        let mut pos = vec![usize::MAX; g.nodes.len()];
        for (k, &i) in ops.iter().enumerate() {
            pos[i] = k;
        }
        let mut preds = vec![Vec::new(); ops.len()];
        for (k, &i) in ops.iter().enumerate() {
            for e in &g.nodes[i].inputs {
                if pos[e.node] != usize::MAX && !preds[k].contains(&pos[e.node]) {
                    preds[k].push(pos[e.node]);
                }
            }
        }
        for &(a, b) in &plan.extra_dep_edges {
            if a >= g.nodes.len() || b >= g.nodes.len() || pos[a] == usize::MAX || pos[b] == usize::MAX {
                return Err(Violation::Malformed("extra edge endpoint is not an operator".into()));
            }
            preds[pos[b]].push(pos[a]);
        }
        let ctx = Checker {
            g,
            plan,
            pos,
            preds,
            consumers: g.consumers(),
            requested: g.outputs.iter().copied().collect(),
            inplace: plan.inplace.iter().copied().collect(),
            ops,
        };
        ctx.check_acyclic()?;
        Ok(ctx)
    }

    fn name(&self, e: Entry) -> String {
        self.g.nodes[e.node].name.clone()
    }

    fn check_acyclic(&self) -> Result<(), Violation> {
        let n = self.ops.len();
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut succ = vec![Vec::new(); n];
        for (k, ps) in self.preds.iter().enumerate() {
            for &p in ps {
                succ[p].push(k);
            }
        }
        let mut stack: Vec<usize> = (0..n).filter(|&k| indeg[k] == 0).collect();
        let mut seen = 0;
        while let Some(k) = stack.pop() {
            seen += 1;
            for &s in &succ[k] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    stack.push(s);
                }
            }
        }
        match (0..n).find(|&k| indeg[k] > 0) {
            Some(k) if seen < n => Err(Violation::Cycle(self.g.nodes[self.ops[k]].name.clone())),
            _ => Ok(()),
        }
    }

    fn static_checks(&self, shapes: &ShapeMap) -> Result<(), Violation> {
        let plan = self.plan;
        let mut dedicated_owner: Vec<Option<Entry>> = vec![None; plan.slot_bytes.len()];
        for (i, n) in self.g.nodes.iter().enumerate() {
            for o in 0..n.op.num_outputs() {
                let e = Entry { node: i, index: o };
                let s = plan.slot(e);
                let needed = shapes.get(e).bytes(plan.etype);
                if plan.slot_bytes[s] < needed {
                    return Err(Violation::TooSmall { slot: s, bytes: plan.slot_bytes[s], node: n.name.clone(), needed });
                }
                let must_own = n.is_variable() || self.requested.contains(&e);
                let is_dedicated = plan.slot_kind[s] != SlotKind::Internal;
                if must_own != is_dedicated {
                    return Err(Violation::Malformed(alloc::format!("`{}` output {o} has the wrong slot kind", n.name)));
                }
                if is_dedicated {
                    if let Some(prev) = dedicated_owner[s] {
                        return Err(Violation::SharedDedicated { slot: s, node: n.name.clone(), other: self.name(prev) });
                    }
                    dedicated_owner[s] = Some(e);
                }
            }
        }
        for &(src, dst) in &plan.inplace {
            let node = &self.g.nodes[dst.node];
            let ok = node.inputs.iter().enumerate().any(|(k, e)| {
                *e == src && node.op.inplace_pairs().contains(&(k, dst.index))
            }) && plan.slot(src) == plan.slot(dst);
            if !ok {
                return Err(Violation::BadInplace { node: node.name.clone() });
            }
        }
        Ok(())
    }

    fn initial(&self) -> State {
        State {
            done: vec![false; self.ops.len()],
            remaining: self.consumers.iter().map(|per| per.iter().map(Vec::len).collect()).collect(),
            owner: vec![None; self.plan.slot_bytes.len()],
        }
    }

    fn is_ready(&self, st: &State, k: usize) -> bool {
        !st.done[k] && self.preds[k].iter().all(|&p| st.done[p])
    }

    fn internal(&self, e: Entry) -> bool {
        self.plan.slot_kind[self.plan.slot(e)] == SlotKind::Internal
    }

    /// Executes operator `k`: claims its output slots, then retires inputs
    /// and outputs that have no remaining consumers.
    fn step(&self, st: &mut State, k: usize) -> Result<(), Violation> {
        let i = self.ops[k];
        let node = &self.g.nodes[i];
        for o in 0..node.op.num_outputs() {
            let out = Entry { node: i, index: o };
            if !self.internal(out) {
                continue;
            }
            let s = self.plan.slot(out);
            if let Some(prev) = st.owner[s] {
                let handoff = prev.node != i
                    && st.remaining[prev.node][prev.index] == 1
                    && self.consumers[prev.node][prev.index].contains(&i)
                    && self.inplace.contains(&(prev, out));
                if !handoff {
                    return Err(Violation::Collision { slot: s, first: self.name(prev), second: node.name.clone() });
                }
            }
            st.owner[s] = Some(out);
        }
        for (j, e) in node.inputs.iter().enumerate() {
            if node.inputs[..j].contains(e) {
                continue;
            }
            st.remaining[e.node][e.index] -= 1;
            if st.remaining[e.node][e.index] == 0 && self.pos[e.node] != usize::MAX && self.internal(*e) {
                let s = self.plan.slot(*e);
                if st.owner[s] == Some(*e) {
                    st.owner[s] = None;
                }
            }
        }
        for o in 0..node.op.num_outputs() {
            let e = Entry { node: i, index: o };
            if self.consumers[i][o].is_empty() && self.internal(e) {
                st.owner[self.plan.slot(e)] = None;
            }
        }
        st.done[k] = true;
        Ok(())
    }

    /// Depth-first over all orders; states reached twice are identical
    /// (liveness depends only on the executed set), so they are skipped.
    fn explore(&self, st: &mut State, depth: usize, seen: &mut BTreeSet<Vec<bool>>) -> Result<(), Violation> {
        if depth == self.ops.len() || !seen.insert(st.done.clone()) {
            return Ok(());
        }
        for k in 0..self.ops.len() {
            if self.is_ready(st, k) {
                let mut next = st.clone();
                self.step(&mut next, k)?;
                self.explore(&mut next, depth + 1, seen)?;
            }
        }
        Ok(())
    }
}
