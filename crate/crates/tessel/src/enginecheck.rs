//! Self-checks for the dependency engine: random programs over a small set
//! of tagged cells, replayed both on the engine and sequentially, and the
//! shared random seed pattern.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use tessel_core::rng::SplitMix64;

use crate::engine::{Engine, EngineError, Tag};

#[derive(Clone, Debug)]
pub struct FuzzOp {
    pub reads: Vec<usize>,
    pub writes: Vec<usize>,
    /// Busy-loop iterations, to vary how long the op holds its tags.
    pub spin: u32,
}

#[derive(Clone, Debug)]
pub struct Program {
    pub cells: usize,
    pub ops: Vec<FuzzOp>,
}

impl Program {
    pub fn random(rng: &mut SplitMix64, cells: usize, max_ops: usize) -> Program {
        let n = 1 + rng.below(max_ops as u64) as usize;
        let ops = (0..n)
            .map(|_| {
                let mut reads = Vec::new();
                let mut writes = Vec::new();
                for c in 0..cells {
                    match rng.below(8) {
                        0 => reads.push(c),
                        1 => writes.push(c),
                        _ => {}
                    }
                }
                let spin = if rng.below(4) == 0 { rng.below(2000) as u32 } else { 0 };
                FuzzOp { reads, writes, spin }
            })
            .collect();
        Program { cells, ops }
    }
}

/// New value of a written cell: mixes its old value, every read cell and
/// the op index, so any reordering of conflicting ops changes the result.
fn effect(index: usize, old: u64, read_sum: u64) -> u64 {
    let mut z = old ^ read_sum.rotate_left(17) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

fn read_sum(values: impl Iterator<Item = u64>) -> u64 {
    values.fold(0u64, |a, v| a.wrapping_mul(31).wrapping_add(v))
}

/// One-thread, push-order replay.
pub fn interpret(p: &Program) -> Vec<u64> {
    let mut cells: Vec<u64> = (0..p.cells as u64).collect();
    for (i, op) in p.ops.iter().enumerate() {
        let rs = read_sum(op.reads.iter().map(|&c| cells[c]));
        for &c in &op.writes {
            cells[c] = effect(i, cells[c], rs);
        }
    }
    cells
}

#[derive(Debug)]
pub struct RunResult {
    pub cells: Vec<u64>,
    /// A writer overlapped another access to one of its tags.
    pub exclusion_violated: bool,
    /// Most readers seen on one tag at the same time.
    pub max_concurrent_readers: usize,
}

struct Cell {
    value: AtomicU64,
    readers: AtomicUsize,
    writers: AtomicUsize,
}

/// Runs `p` on `engine` with fresh tags and reports the final cell values.
pub fn execute(engine: &Arc<Engine>, p: &Program) -> Result<RunResult, EngineError> {
    let tags: Vec<Tag> = (0..p.cells).map(|c| engine.new_tag(format!("cell{c}"))).collect();
    let cells: Arc<Vec<Cell>> = Arc::new(
        (0..p.cells as u64)
            .map(|v| Cell { value: AtomicU64::new(v), readers: AtomicUsize::new(0), writers: AtomicUsize::new(0) })
            .collect(),
    );
    let violated = Arc::new(AtomicBool::new(false));
    let max_readers = Arc::new(AtomicUsize::new(0));
    for (i, op) in p.ops.iter().enumerate() {
        let reads: Vec<Tag> = op.reads.iter().map(|&c| tags[c]).collect();
        let writes: Vec<Tag> = op.writes.iter().map(|&c| tags[c]).collect();
        let (op, cells, violated, max_readers) = (op.clone(), cells.clone(), violated.clone(), max_readers.clone());
        engine.push("fuzz", &reads, &writes, move || {
            for &c in &op.reads {
                let r = cells[c].readers.fetch_add(1, Ordering::SeqCst) + 1;
                max_readers.fetch_max(r, Ordering::SeqCst);
                if cells[c].writers.load(Ordering::SeqCst) != 0 {
                    violated.store(true, Ordering::SeqCst);
                }
            }
            for &c in &op.writes {
                if cells[c].writers.fetch_add(1, Ordering::SeqCst) != 0 || cells[c].readers.load(Ordering::SeqCst) != 0 {
                    violated.store(true, Ordering::SeqCst);
                }
            }
            let mut acc = 0u64;
            for k in 0..op.spin {
                acc = std::hint::black_box(acc.wrapping_add(k as u64));
            }
            let rs = read_sum(op.reads.iter().map(|&c| cells[c].value.load(Ordering::Relaxed)));
            for &c in &op.writes {
                let old = cells[c].value.load(Ordering::Relaxed);
                cells[c].value.store(effect(i, old, rs), Ordering::Relaxed);
            }
            for &c in &op.writes {
                cells[c].writers.fetch_sub(1, Ordering::SeqCst);
            }
            for &c in &op.reads {
                cells[c].readers.fetch_sub(1, Ordering::SeqCst);
            }
            Ok(())
        })?;
    }
    for &t in &tags {
        engine.wait_for(t)?;
    }
    let out = cells.iter().map(|c| c.value.load(Ordering::Relaxed)).collect();
    for t in tags {
        engine.push_delete(t)?;
    }
    Ok(RunResult {
        cells: out,
        exclusion_violated: violated.load(Ordering::SeqCst),
        max_concurrent_readers: max_readers.load(Ordering::SeqCst),
    })
}

/// Runs `programs` random programs and returns how many diverged from the
/// sequential replay or broke writer exclusion.
pub fn serializability(engine: &Arc<Engine>, seed: u64, programs: usize, cells: usize, max_ops: usize) -> Result<usize, EngineError> {
    let mut rng = SplitMix64::new(seed);
    let mut bad = 0;
    for _ in 0..programs {
        let p = Program::random(&mut rng, cells, max_ops);
        let r = execute(engine, &p)?;
        if r.exclusion_violated || r.cells != interpret(&p) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Two draw operations share one generator state guarded by a seed tag.
/// Each draws `n` numbers, yielding between draws. Declaring the seed as
/// written serializes them in push order; declaring it read lets them
/// interleave and the concatenated sequence depends on timing.
pub fn shared_rng_draws(engine: &Arc<Engine>, seed: u64, n: usize, declare_write: bool) -> Result<Vec<u64>, EngineError> {
    let tag = engine.new_tag("seed");
    let state = Arc::new(AtomicU64::new(seed));
    let outs: Vec<Tag> = (0..2).map(|i| engine.new_tag(format!("draws{i}"))).collect();
    let results: Vec<Arc<std::sync::Mutex<Vec<u64>>>> = (0..2).map(|_| Default::default()).collect();
    for (out, res) in outs.iter().zip(&results) {
        let (state, res) = (state.clone(), res.clone());
        let (reads, writes) = if declare_write { (vec![], vec![tag, *out]) } else { (vec![tag], vec![*out]) };
        engine.push("draw", &reads, &writes, move || {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                // Deliberately a non-atomic read-modify-write: the tag is
                // what makes it safe.
                let s = state.load(Ordering::Relaxed);
                let mut g = SplitMix64::new(s);
                let x = g.next_u64();
                std::thread::yield_now();
                state.store(s.wrapping_add(0x9E37_79B9_7F4A_7C15), Ordering::Relaxed);
                v.push(x);
            }
            *res.lock().unwrap() = v;
            Ok(())
        })?;
    }
    for &t in &outs {
        engine.wait_for(t)?;
    }
    engine.push_delete(tag)?;
    for t in outs {
        engine.push_delete(t)?;
    }
    Ok(results.iter().flat_map(|r| r.lock().unwrap().clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpreter_is_order_sensitive() {
        let p = Program {
            cells: 2,
            ops: vec![
                FuzzOp { reads: vec![], writes: vec![0], spin: 0 },
                FuzzOp { reads: vec![0], writes: vec![1], spin: 0 },
            ],
        };
        let q = Program { cells: 2, ops: vec![p.ops[1].clone(), p.ops[0].clone()] };
        assert_ne!(interpret(&p), interpret(&q));
    }

    #[test]
    fn inline_engine_matches_interpreter() {
        let e = Engine::new(0);
        assert_eq!(serializability(&e, 1, 200, 6, 12).unwrap(), 0);
    }
}
