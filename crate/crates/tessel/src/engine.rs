//! Mutation-aware dependency engine.
//!
//! Every mutable resource is registered as a [`Tag`]. An operation names the
//! tags it reads and the tags it writes; it runs once every earlier-pushed
//! operation that conflicts with it on some tag has finished. Readers of a
//! tag may overlap, a writer excludes everything else on that tag.
//!
//! Each tag keeps a FIFO of operations that have not yet been granted
//! access, and each operation counts the tags still withholding access.
//! Grants on a tag are handed out strictly in queue order, and queue order
//! on every tag follows push order, so two operations can never each hold a
//! tag the other is waiting for.

use std::cell::Cell;
use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Receiver, Sender};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tag(u64);

impl Tag {
    pub fn id(self) -> u64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("tag {0} is unknown or has been deleted")]
    Dead(u64),
    #[error("tag `{0}` is already scheduled for deletion")]
    Deleting(String),
    #[error("operation `{op}` failed: {message}")]
    Failed { op: String, message: String },
}

pub type OpFn = Box<dyn FnOnce() -> Result<(), String> + Send>;

thread_local! {
    static IN_OP: Cell<bool> = const { Cell::new(false) };
}

/// True while the current thread is running an engine operation. Waiting
/// from inside an operation can deadlock the pool and is rejected in debug
/// builds.
pub fn in_op() -> bool {
    IN_OP.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Read,
    Write,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Normal,
    /// Runs even when its tags are poisoned; used for wait barriers.
    Barrier,
    /// Removes its single written tag on completion.
    Delete,
}

struct TagState {
    label: String,
    queue: VecDeque<(u64, Mode)>,
    readers: usize,
    writer: bool,
    poison: Option<EngineError>,
    deleting: bool,
}

impl TagState {
    fn idle(&self) -> bool {
        self.queue.is_empty() && self.readers == 0 && !self.writer
    }
}

struct OpSlot {
    name: String,
    reads: Vec<u64>,
    writes: Vec<u64>,
    waiting: usize,
    func: Option<OpFn>,
    kind: Kind,
}

#[derive(Default)]
struct State {
    tags: HashMap<u64, TagState>,
    ops: HashMap<u64, OpSlot>,
    next_tag: u64,
    next_op: u64,
    pending: usize,
    first_error: Option<EngineError>,
}

struct Shared {
    state: Mutex<State>,
    done: Condvar,
    pushed: AtomicU64,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

const SHUTDOWN: u64 = u64::MAX;

pub struct Engine {
    shared: Arc<Shared>,
    tx: Sender<u64>,
    workers: Vec<JoinHandle<()>>,
}

impl Engine {
    /// Engine with `threads` workers; `0` runs every operation inline on
    /// the pushing thread as soon as it is ready (the synchronous engine).
    pub fn new(threads: usize) -> Arc<Engine> {
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            done: Condvar::new(),
            pushed: AtomicU64::new(0),
        });
        let (tx, rx) = unbounded::<u64>();
        let workers = (0..threads)
            .map(|i| {
                let shared = shared.clone();
                let (tx, rx): (Sender<u64>, Receiver<u64>) = (tx.clone(), rx.clone());
                std::thread::Builder::new()
                    .name(format!("tessel-engine-{i}"))
                    .spawn(move || {
                        while let Ok(id) = rx.recv() {
                            if id == SHUTDOWN {
                                break;
                            }
                            for r in run_op(&shared, id) {
                                let _ = tx.send(r);
                            }
                        }
                    })
                    .expect("spawn engine worker")
            })
            .collect();
        Arc::new(Engine { shared, tx, workers })
    }

    /// One worker per available core.
    pub fn with_default_threads() -> Arc<Engine> {
        Engine::new(std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn threads(&self) -> usize {
        self.workers.len()
    }

    /// Operations pushed so far, including deletions and wait barriers.
    pub fn ops_pushed(&self) -> u64 {
        self.shared.pushed.load(Ordering::Relaxed)
    }

    pub fn new_tag(&self, label: impl Into<String>) -> Tag {
        let mut st = self.shared.lock();
        let id = st.next_tag;
        st.next_tag += 1;
        st.tags.insert(
            id,
            TagState {
                label: label.into(),
                queue: VecDeque::new(),
                readers: 0,
                writer: false,
                poison: None,
                deleting: false,
            },
        );
        Tag(id)
    }

    pub fn label(&self, tag: Tag) -> Option<String> {
        self.shared.lock().tags.get(&tag.0).map(|t| t.label.clone())
    }

    /// Schedules `f`. A tag listed in both sets is treated as written.
    pub fn push<F>(&self, name: &str, reads: &[Tag], writes: &[Tag], f: F) -> Result<(), EngineError>
    where
        F: FnOnce() -> Result<(), String> + Send + 'static,
    {
        self.push_op(name, reads, writes, Box::new(f), Kind::Normal).map(|_| ())
    }

    /// Frees `tag` after every operation pushed on it so far.
    pub fn push_delete(&self, tag: Tag) -> Result<(), EngineError> {
        self.push_delete_with(tag, || {})
    }

    /// Like [`push_delete`](Self::push_delete), running `release` as the
    /// final operation on the tag.
    pub fn push_delete_with<F>(&self, tag: Tag, release: F) -> Result<(), EngineError>
    where
        F: FnOnce() + Send + 'static,
    {
        let f: OpFn = Box::new(move || {
            release();
            Ok(())
        });
        self.push_op("delete", &[], &[tag], f, Kind::Delete).map(|_| ())
    }

    /// Blocks until every operation pushed on `tag` before this call has
    /// finished, then reports the tag's poison, if any.
    pub fn wait_for(&self, tag: Tag) -> Result<(), EngineError> {
        debug_assert!(!in_op(), "wait_for called from inside an engine operation");
        let id = {
            let st = self.shared.lock();
            let t = st.tags.get(&tag.0).ok_or(EngineError::Dead(tag.0))?;
            if t.idle() {
                return t.poison.clone().map_or(Ok(()), Err);
            }
            drop(st);
            self.push_op("wait", &[], &[tag], Box::new(|| Ok(())), Kind::Barrier)?
        };
        let mut st = self.shared.lock();
        while st.ops.contains_key(&id) {
            st = self.shared.done.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        match st.tags.get(&tag.0) {
            Some(t) => t.poison.clone().map_or(Ok(()), Err),
            None => Err(EngineError::Dead(tag.0)),
        }
    }

    /// Blocks until no operation is pending. Returns the first failure
    /// recorded since the previous `wait_all`.
    pub fn wait_all(&self) -> Result<(), EngineError> {
        debug_assert!(!in_op(), "wait_all called from inside an engine operation");
        let mut st = self.shared.lock();
        while st.pending > 0 {
            st = self.shared.done.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.first_error.take().map_or(Ok(()), Err)
    }

    pub fn is_poisoned(&self, tag: Tag) -> bool {
        self.shared.lock().tags.get(&tag.0).is_some_and(|t| t.poison.is_some())
    }

    /// Pending operations with their tag labels, oldest first.
    pub fn diagnostics(&self) -> String {
        let st = self.shared.lock();
        let mut ids: Vec<&u64> = st.ops.keys().collect();
        ids.sort();
        let label = |t: &u64| st.tags.get(t).map_or("?", |s| s.label.as_str()).to_string();
        let mut out = format!("{} pending operations\n", ids.len());
        for id in ids {
            let op = &st.ops[id];
            let reads: Vec<String> = op.reads.iter().map(label).collect();
            let writes: Vec<String> = op.writes.iter().map(label).collect();
            let _ = writeln!(
                out,
                "#{id} {} reads=[{}] writes=[{}] waiting_on={}",
                op.name,
                reads.join(","),
                writes.join(","),
                op.waiting
            );
        }
        out
    }

    fn push_op(&self, name: &str, reads: &[Tag], writes: &[Tag], func: OpFn, kind: Kind) -> Result<u64, EngineError> {
        let mut w: Vec<u64> = writes.iter().map(|t| t.0).collect();
        w.sort_unstable();
        w.dedup();
        let mut r: Vec<u64> = reads.iter().map(|t| t.0).filter(|t| w.binary_search(t).is_err()).collect();
        r.sort_unstable();
        r.dedup();

        let mut ready = Vec::new();
        let id = {
            let mut guard = self.shared.lock();
            let st = &mut *guard;
            for t in r.iter().chain(&w) {
                match st.tags.get(t) {
                    None => return Err(EngineError::Dead(*t)),
                    Some(s) if s.deleting && kind != Kind::Barrier => {
                        return Err(EngineError::Deleting(s.label.clone()));
                    }
                    Some(_) => {}
                }
            }
            if kind == Kind::Delete {
                st.tags.get_mut(&w[0]).unwrap().deleting = true;
            }
            let id = st.next_op;
            st.next_op += 1;
            st.pending += 1;
            self.shared.pushed.fetch_add(1, Ordering::Relaxed);
            for &t in &r {
                st.tags.get_mut(&t).unwrap().queue.push_back((id, Mode::Read));
            }
            for &t in &w {
                st.tags.get_mut(&t).unwrap().queue.push_back((id, Mode::Write));
            }
            let waiting = r.len() + w.len();
            st.ops.insert(id, OpSlot { name: name.to_string(), reads: r, writes: w, waiting, func: Some(func), kind });
            if waiting == 0 {
                ready.push(id);
            }
            let touched: Vec<u64> = st.ops[&id].reads.iter().chain(&st.ops[&id].writes).copied().collect();
            for t in touched {
                grant(st, t, &mut ready);
            }
            id
        };
        self.dispatch(ready);
        Ok(id)
    }

    fn dispatch(&self, ready: Vec<u64>) {
        if self.workers.is_empty() {
            let mut queue: VecDeque<u64> = ready.into();
            while let Some(id) = queue.pop_front() {
                queue.extend(run_op(&self.shared, id));
            }
        } else {
            for id in ready {
                let _ = self.tx.send(id);
            }
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if !in_op() {
            let _ = self.wait_all();
        }
        for _ in &self.workers {
            let _ = self.tx.send(SHUTDOWN);
        }
        let me = std::thread::current().id();
        for h in self.workers.drain(..) {
            // The last handle may be dropped by a closure on a worker.
            if h.thread().id() != me {
                let _ = h.join();
            }
        }
    }
}

/// Hands out access on `tag` to queued operations in FIFO order.
fn grant(st: &mut State, tag: u64, ready: &mut Vec<u64>) {
    let State { tags, ops, .. } = st;
    let ts = tags.get_mut(&tag).unwrap();
    while let Some(&(op, mode)) = ts.queue.front() {
        let ok = match mode {
            Mode::Read => !ts.writer,
            Mode::Write => !ts.writer && ts.readers == 0,
        };
        if !ok {
            break;
        }
        ts.queue.pop_front();
        match mode {
            Mode::Read => ts.readers += 1,
            Mode::Write => ts.writer = true,
        }
        let slot = ops.get_mut(&op).unwrap();
        slot.waiting -= 1;
        if slot.waiting == 0 {
            ready.push(op);
        }
        if mode == Mode::Write {
            break;
        }
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// Executes a ready operation and returns the operations it unblocked.
fn run_op(shared: &Shared, id: u64) -> Vec<u64> {
    let (func, name, poison, kind) = {
        let mut st = shared.lock();
        let State { tags, ops, .. } = &mut *st;
        let slot = ops.get_mut(&id).unwrap();
        let poison = slot
            .reads
            .iter()
            .chain(&slot.writes)
            .find_map(|t| tags.get(t).and_then(|s| s.poison.clone()));
        (slot.func.take(), slot.name.clone(), poison, slot.kind)
    };
    let result = match (poison, kind) {
        (Some(p), Kind::Normal) => Err(p),
        _ => {
            let was = IN_OP.with(|c| c.replace(true));
            let r = catch_unwind(AssertUnwindSafe(func.expect("operation runs once")));
            IN_OP.with(|c| c.set(was));
            match r {
                Ok(Ok(())) => Ok(()),
                Ok(Err(message)) => Err(EngineError::Failed { op: name, message }),
                Err(p) => Err(EngineError::Failed { op: name, message: panic_message(p) }),
            }
        }
    };

    let mut ready = Vec::new();
    let mut guard = shared.lock();
    let st = &mut *guard;
    let slot = st.ops.remove(&id).unwrap();
    if let Err(e) = &result {
        for t in &slot.writes {
            if let Some(ts) = st.tags.get_mut(t) {
                ts.poison.get_or_insert_with(|| e.clone());
            }
        }
        st.first_error.get_or_insert_with(|| e.clone());
    }
    for t in &slot.reads {
        st.tags.get_mut(t).unwrap().readers -= 1;
        grant(st, *t, &mut ready);
    }
    for t in &slot.writes {
        st.tags.get_mut(t).unwrap().writer = false;
        grant(st, *t, &mut ready);
    }
    if slot.kind == Kind::Delete {
        st.tags.remove(&slot.writes[0]);
    }
    st.pending -= 1;
    drop(guard);
    shared.done.notify_all();
    ready
}
