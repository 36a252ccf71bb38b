use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use super::PlanStrategy;
use crate::graph::{Entry, Graph, ShapeMap};
use crate::shape::ElemType;

/// Paths selected by co-share before the remaining nodes are left
/// unshared; keeps the heuristic linear in graph size.
const MAX_PATHS: usize = 4;
/// Free-pool candidates examined per allocation.
const MAX_CANDIDATES: usize = 4;
/// Nodes visited when proving a freed buffer's users precede a requester.
const ANCESTOR_BUDGET: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Internal,
    /// Holds a bound argument; owned by the caller.
    Argument,
    /// Holds a requested output; never shared.
    Output,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationPlan {
    pub strategy: PlanStrategy,
    pub etype: ElemType,
    /// Slot of every node output, indexed `[node][output]`.
    pub slot_of: Vec<Vec<usize>>,
    pub slot_bytes: Vec<usize>,
    pub slot_kind: Vec<SlotKind>,
    /// `(before, after)` ordering constraints added by co-share.
    pub extra_dep_edges: Vec<(usize, usize)>,
    /// `(input, output)` pairs where the output overwrites its input in place.
    pub inplace: Vec<(Entry, Entry)>,
    /// Operator nodes in the simulated execution order.
    pub order: Vec<usize>,
    pub total_internal_bytes: usize,
    /// Work counter: node, edge and search steps taken while planning.
    pub visits: usize,
}

impl AllocationPlan {
    pub fn slot(&self, e: Entry) -> usize {
        self.slot_of[e.node][e.index]
    }

    pub fn num_internal_slots(&self) -> usize {
        self.slot_kind.iter().filter(|k| **k == SlotKind::Internal).count()
    }

    /// Tabular listing: one row per node output.
    pub fn dump(&self, g: &Graph) -> String {
        let mut out = String::from("node\toutput\tslot\tbytes\tkind\n");
        for (i, n) in g.nodes.iter().enumerate() {
            for (o, &s) in self.slot_of[i].iter().enumerate() {
                let kind = match self.slot_kind[s] {
                    SlotKind::Internal => "internal",
                    SlotKind::Argument => "argument",
                    SlotKind::Output => "output",
                };
                let _ = writeln!(out, "{}\t{o}\t{s}\t{}\t{kind}", n.name, self.slot_bytes[s]);
            }
        }
        let _ = writeln!(
            out,
            "# {} internal slots, {} internal bytes, {} extra edges",
            self.num_internal_slots(),
            self.total_internal_bytes,
            self.extra_dep_edges.len()
        );
        out
    }
}

struct Freed {
    slot: usize,
    entry: Entry,
}

/// Static allocation by simulating execution in node order.
///
/// Bound arguments and requested outputs get dedicated slots. Internal
/// outputs then draw on:
/// - in-place claims (`inplace`, `both`): a pointwise operator writes over
///   an input whose only consumer it is;
/// - the free pool (every strategy but `none`), matched by exact byte size.
///   A freed buffer is reused without new edges when all of its users are
///   provably ancestors of the requester (`inplace`, `both`), or, under
///   co-share, when one of its users lies on the same longest path as the
///   requester, in which case an edge from each user to the requester is
///   recorded so the two can never run concurrently.
pub fn plan_memory(g: &Graph, shapes: &ShapeMap, etype: ElemType, strategy: PlanStrategy) -> AllocationPlan {
    let n = g.nodes.len();
    let mut visits = 0usize;
    let consumers = g.consumers();
    let mut remaining: Vec<Vec<usize>> =
        consumers.iter().map(|per| per.iter().map(Vec::len).collect()).collect();

    let mut slot_of: Vec<Vec<usize>> =
        g.nodes.iter().map(|nd| vec![usize::MAX; nd.op.num_outputs()]).collect();
    let mut slot_bytes = Vec::new();
    let mut slot_kind = Vec::new();
    let bytes_of = |e: Entry| shapes.get(e).bytes(etype);
    let new_slot = |bytes: usize, kind: SlotKind, slot_bytes: &mut Vec<usize>, slot_kind: &mut Vec<SlotKind>| {
        slot_bytes.push(bytes);
        slot_kind.push(kind);
        slot_bytes.len() - 1
    };

    for (i, nd) in g.nodes.iter().enumerate() {
        if nd.is_variable() {
            slot_of[i][0] = new_slot(bytes_of(Entry { node: i, index: 0 }), SlotKind::Argument, &mut slot_bytes, &mut slot_kind);
        }
    }
    for &e in &g.outputs {
        if slot_of[e.node][e.index] == usize::MAX {
            slot_of[e.node][e.index] = new_slot(bytes_of(e), SlotKind::Output, &mut slot_bytes, &mut slot_kind);
        }
    }

    let color = if strategy.coshare() {
        color_paths(g, &mut visits)
    } else {
        vec![None; n]
    };

    let mut pool: BTreeMap<usize, Vec<Freed>> = BTreeMap::new();
    let mut handed_off: BTreeSet<Entry> = BTreeSet::new();
    let mut inplace = Vec::new();
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut order = Vec::new();
    let unassigned = |slot_of: &[Vec<usize>], e: Entry| slot_of[e.node][e.index] == usize::MAX;

    for (i, nd) in g.nodes.iter().enumerate() {
        if nd.is_variable() {
            continue;
        }
        visits += 1;
        order.push(i);
        let mut ancestors: Option<Vec<usize>> = None;
        for o in 0..nd.op.num_outputs() {
            visits += 1;
            let out = Entry { node: i, index: o };
            if !unassigned(&slot_of, out) {
                continue;
            }
            let bytes = bytes_of(out);

            if strategy.inplace() {
                let claim = nd.op.inplace_pairs().into_iter().find_map(|(k, ko)| {
                    let src = nd.inputs[k];
                    let ok = ko == o
                        && !handed_off.contains(&src)
                        && slot_kind_of(&slot_kind, &slot_of, src) == Some(SlotKind::Internal)
                        && consumers[src.node][src.index].len() == 1
                        && bytes_of(src) == bytes;
                    ok.then_some(src)
                });
                if let Some(src) = claim {
                    slot_of[i][o] = slot_of[src.node][src.index];
                    handed_off.insert(src);
                    inplace.push((src, out));
                    continue;
                }
            }

            let mut chosen = None;
            if strategy != PlanStrategy::None {
                if let Some(cands) = pool.get_mut(&bytes) {
                    let lo = cands.len().saturating_sub(MAX_CANDIDATES);
                    for c in (lo..cands.len()).rev() {
                        visits += 1;
                        let users = users_of(&consumers, cands[c].entry);
                        if strategy.inplace() {
                            let anc = ancestors
                                .get_or_insert_with(|| ancestor_window(g, i, &mut visits));
                            if users.iter().all(|u| anc.contains(u)) {
                                chosen = Some(c);
                                break;
                            }
                        }
                        if strategy.coshare() && color[i].is_some() && users.iter().any(|&u| color[u] == color[i]) {
                            for &u in &users {
                                visits += 1;
                                if !nd.inputs.iter().any(|e| e.node == u) {
                                    edges.insert((u, i));
                                }
                            }
                            chosen = Some(c);
                            break;
                        }
                    }
                    if let Some(c) = chosen {
                        slot_of[i][o] = cands.remove(c).slot;
                    }
                }
            }
            if chosen.is_none() {
                slot_of[i][o] = new_slot(bytes, SlotKind::Internal, &mut slot_bytes, &mut slot_kind);
            }
        }

        // Release inputs whose last consumer this was, then dead outputs.
        for (k, e) in nd.inputs.iter().enumerate() {
            visits += 1;
            if nd.inputs[..k].contains(e) {
                continue;
            }
            remaining[e.node][e.index] -= 1;
            if remaining[e.node][e.index] == 0
                && !handed_off.contains(e)
                && slot_kind_of(&slot_kind, &slot_of, *e) == Some(SlotKind::Internal)
            {
                let slot = slot_of[e.node][e.index];
                pool.entry(slot_bytes[slot]).or_default().push(Freed { slot, entry: *e });
            }
        }
        for o in 0..nd.op.num_outputs() {
            let e = Entry { node: i, index: o };
            if consumers[i][o].is_empty() && slot_kind_of(&slot_kind, &slot_of, e) == Some(SlotKind::Internal) {
                let slot = slot_of[i][o];
                pool.entry(slot_bytes[slot]).or_default().push(Freed { slot, entry: e });
            }
        }
    }

    let total_internal_bytes = slot_bytes
        .iter()
        .zip(&slot_kind)
        .filter(|(_, k)| **k == SlotKind::Internal)
        .map(|(b, _)| *b)
        .sum();
    AllocationPlan {
        strategy,
        etype,
        slot_of,
        slot_bytes,
        slot_kind,
        extra_dep_edges: edges.into_iter().collect(),
        inplace,
        order,
        total_internal_bytes,
        visits,
    }
}

fn slot_kind_of(kinds: &[SlotKind], slot_of: &[Vec<usize>], e: Entry) -> Option<SlotKind> {
    kinds.get(slot_of[e.node][e.index]).copied()
}

/// Nodes whose execution must finish before `e`'s buffer is dead: its
/// consumers, or its producer when nothing consumes it.
fn users_of(consumers: &[Vec<Vec<usize>>], e: Entry) -> Vec<usize> {
    let c = &consumers[e.node][e.index];
    if c.is_empty() {
        vec![e.node]
    } else {
        c.clone()
    }
}

/// Up to `ANCESTOR_BUDGET` nearest operator ancestors of `node`, breadth
/// first. Membership proves precedence; absence proves nothing.
fn ancestor_window(g: &Graph, node: usize, visits: &mut usize) -> Vec<usize> {
    let mut found: Vec<usize> = Vec::with_capacity(ANCESTOR_BUDGET);
    let mut head = 0;
    let mut frontier = node;
    loop {
        for e in &g.nodes[frontier].inputs {
            *visits += 1;
            let p = e.node;
            if found.len() == ANCESTOR_BUDGET {
                return found;
            }
            if !g.nodes[p].is_variable() && !found.contains(&p) {
                found.push(p);
            }
        }
        if head == found.len() {
            return found;
        }
        frontier = found[head];
        head += 1;
    }
}

/// Colors operator nodes by repeatedly taking the longest path (most nodes;
/// ties go to the smallest first node) among uncolored nodes.
fn color_paths(g: &Graph, visits: &mut usize) -> Vec<Option<usize>> {
    let n = g.nodes.len();
    let mut color = vec![None; n];
    let mut len = vec![0usize; n];
    let mut first = vec![0usize; n];
    let mut pred = vec![usize::MAX; n];
    for c in 0..MAX_PATHS {
        let mut best: Option<usize> = None;
        for v in 0..n {
            if g.nodes[v].is_variable() || color[v].is_some() {
                continue;
            }
            *visits += 1;
            len[v] = 1;
            first[v] = v;
            pred[v] = usize::MAX;
            for e in &g.nodes[v].inputs {
                *visits += 1;
                let u = e.node;
                if g.nodes[u].is_variable() || color[u].is_some() {
                    continue;
                }
                if len[u] + 1 > len[v] || (len[u] + 1 == len[v] && first[u] < first[v]) {
                    len[v] = len[u] + 1;
                    first[v] = first[u];
                    pred[v] = u;
                }
            }
            let better = match best {
                None => true,
                Some(b) => len[v] > len[b] || (len[v] == len[b] && first[v] < first[b]),
            };
            if better {
                best = Some(v);
            }
        }
        let Some(mut v) = best else { break };
        loop {
            color[v] = Some(c);
            if pred[v] == usize::MAX {
                break;
            }
            v = pred[v];
        }
    }
    color
}
