//! Measurements behind the `bench-memory` and `bench-engine` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use tessel_core::autodiff::gradient;
use tessel_core::planner::{estimate_memory, PlanStrategy};
use tessel_core::rng::SplitMix64;
use tessel_core::{ElemType, Graph, GraphError, Shape, Symbol};

use crate::engine::{Engine, EngineError};
use crate::enginecheck;
use crate::train::is_parameter;

/// Shapes of every hinted variable with its zero dimensions set to `batch`.
pub fn hinted_shapes(g: &Graph, batch: usize) -> Result<BTreeMap<String, Shape>, GraphError> {
    let mut out = BTreeMap::new();
    for i in g.arguments() {
        if let Some(hint) = &g.nodes[i].shape_hint {
            let dims: Vec<usize> = hint.iter().map(|&d| if d == 0 { batch } else { d }).collect();
            out.insert(g.nodes[i].name.clone(), Shape::new(dims)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRow {
    pub strategy: PlanStrategy,
    pub bytes: usize,
    pub ratio: f64,
}

/// Internal bytes per planning strategy, in [`PlanStrategy::ALL`] order.
/// Without `forward_only` the graph is extended with gradients for every
/// parameter argument.
pub fn memory_table(sym: &Symbol, batch: usize, etype: ElemType, forward_only: bool) -> Result<Vec<MemoryRow>, GraphError> {
    let sym = if forward_only {
        sym.clone()
    } else {
        let args = sym.list_arguments();
        let wrt: Vec<&str> = args.iter().map(String::as_str).filter(|a| is_parameter(a)).collect();
        gradient(sym, &wrt)?
    };
    let g = sym.to_graph();
    let shapes = g.infer_shapes(&hinted_shapes(&g, batch)?)?;
    let bytes: Vec<usize> = PlanStrategy::ALL.iter().map(|&s| estimate_memory(&g, &shapes, etype, s)).collect();
    let none = bytes[0].max(1) as f64;
    Ok(PlanStrategy::ALL.iter().zip(bytes).map(|(&strategy, b)| MemoryRow { strategy, bytes: b, ratio: b as f64 / none }).collect())
}

pub fn format_memory_table(rows: &[MemoryRow]) -> String {
    let mut s = format!("{:<10}{:>16}{:>10}\n", "strategy", "internal_bytes", "ratio");
    for r in rows {
        let _ = writeln!(s, "{:<10}{:>16}{:>10.3}", r.strategy.name(), r.bytes, r.ratio);
    }
    s
}

#[derive(Clone, Debug)]
pub struct EngineBench {
    pub ops: usize,
    pub seconds: f64,
    pub programs_checked: usize,
    pub mismatches: usize,
}

impl EngineBench {
    pub fn ops_per_second(&self) -> f64 {
        self.ops as f64 / self.seconds.max(1e-9)
    }
}

/// Pushes `ops` tiny operations over 64 tags (one or two reads, one write),
/// then replays `programs` fuzzed programs against the sequential
/// interpreter on the same engine.
pub fn engine_bench(threads: usize, ops: usize, programs: usize, seed: u64) -> Result<EngineBench, EngineError> {
    let engine = Engine::new(threads);
    let tags: Vec<_> = (0..64).map(|i| engine.new_tag(format!("bench{i}"))).collect();
    let mut rng = SplitMix64::new(seed);
    let start = Instant::now();
    for _ in 0..ops {
        let w = tags[rng.below(64) as usize];
        let reads: Vec<_> = (0..1 + rng.below(2)).map(|_| tags[rng.below(64) as usize]).filter(|&t| t != w).collect();
        engine.push("bench", &reads, &[w], || Ok(()))?;
    }
    engine.wait_all()?;
    let seconds = start.elapsed().as_secs_f64();
    for t in tags {
        engine.push_delete(t)?;
    }
    let mismatches = enginecheck::serializability(&engine, seed, programs, 16, 32)?;
    Ok(EngineBench { ops, seconds, programs_checked: programs, mismatches })
}
