//! Two-level key-value store for data-parallel training.
//!
//! Workers push gradients and pull weights. Each machine runs a level-1
//! server that sums its workers' pushes before forwarding one aggregate to
//! the single level-2 server, which owns the updater. Servers are threads
//! with ordered inbound channels; the level-1 to level-2 link is either an
//! in-process channel or a TCP connection carrying [`wire`] frames.
//!
//! Aggregation order is fixed: workers in ascending id within a machine and
//! machines in ascending id, both merged with [`pairwise_sum`]. With
//! power-of-two worker counts this reproduces a single large-batch gradient
//! bit for bit.
//!
//! [`wire`]: tessel_core::wire
//! [`pairwise_sum`]: tessel_core::reduce::pairwise_sum

mod server;
mod tcp;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, unbounded, Sender};
use tessel_core::reduce::pairwise_sum;
use tessel_core::sgd::{sgd_update, OptimizerConfig};
use tessel_core::{DataVec, ElemType};

use crate::engine::{Engine, EngineError, Tag};
use crate::tensor::Tensor;
use server::{L1Msg, L2Msg};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consistency {
    /// Round-structured: a pull waits until every worker's pushes from the
    /// rounds this worker has pushed are applied.
    Sequential,
    /// Pulls return whatever the local level-1 replica holds.
    Eventual,
}

impl Consistency {
    pub fn parse(s: &str) -> Option<Consistency> {
        match s {
            "sequential" => Some(Consistency::Sequential),
            "eventual" => Some(Consistency::Eventual),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub machines: usize,
    pub workers: usize,
}

impl Topology {
    pub fn total_workers(&self) -> usize {
        self.machines * self.workers
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    /// Level-1 servers reach the level-2 server over TCP at this address.
    /// Port 0 picks a free port.
    Tcp(SocketAddr),
}

#[derive(Debug, thiserror::Error)]
pub enum KvError {
    #[error("topology needs at least one machine and one worker per machine")]
    Topology,
    #[error("key {0} is already initialized")]
    AlreadyInitialized(u64),
    #[error("key {0} is not initialized")]
    Uninitialized(u64),
    #[error("key {key}: expected {expected} {etype} elements, got {got}")]
    Length { key: u64, expected: usize, got: usize, etype: &'static str },
    #[error("key {key}: store holds {expected} values, got {got}")]
    Type { key: u64, expected: &'static str, got: &'static str },
    #[error("worker {0} does not exist")]
    Worker(usize),
    #[error("store has shut down")]
    Closed,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Merges an incoming value into the stored one at the level-2 server.
pub trait Updater: Send {
    fn update(&mut self, key: u64, stored: &mut DataVec, incoming: &DataVec);
}

impl<F: FnMut(u64, &mut DataVec, &DataVec) + Send> Updater for F {
    fn update(&mut self, key: u64, stored: &mut DataVec, incoming: &DataVec) {
        self(key, stored, incoming)
    }
}

/// The default updater: `stored += incoming`.
pub struct SumUpdater;

impl Updater for SumUpdater {
    fn update(&mut self, _key: u64, stored: &mut DataVec, incoming: &DataVec) {
        match (stored, incoming) {
            (DataVec::F32(s), DataVec::F32(x)) => s.iter_mut().zip(x).for_each(|(s, x)| *s += x),
            (DataVec::F64(s), DataVec::F64(x)) => s.iter_mut().zip(x).for_each(|(s, x)| *s += x),
            _ => {}
        }
    }
}

/// Server-side SGD with momentum: stored values are weights, incoming
/// values are summed gradients. Velocity is kept per key.
pub struct SgdUpdater {
    cfg: OptimizerConfig,
    velocity: HashMap<u64, DataVec>,
}

impl SgdUpdater {
    pub fn new(cfg: OptimizerConfig) -> SgdUpdater {
        SgdUpdater { cfg, velocity: HashMap::new() }
    }
}

impl Updater for SgdUpdater {
    fn update(&mut self, key: u64, stored: &mut DataVec, incoming: &DataVec) {
        let v = self.velocity.entry(key).or_insert_with(|| DataVec::zeros(stored.etype(), stored.len()));
        match (stored, incoming, v) {
            (DataVec::F32(w), DataVec::F32(g), DataVec::F32(v)) => sgd_update(&self.cfg, w, g, v),
            (DataVec::F64(w), DataVec::F64(g), DataVec::F64(v)) => sgd_update(&self.cfg, w, g, v),
            _ => {}
        }
    }
}

/// Elementwise pairwise sum of equally long values, in slice order.
pub fn pairwise_merge(parts: &[DataVec]) -> DataVec {
    let len = parts[0].len();
    match &parts[0] {
        DataVec::F32(_) => {
            let xs: Vec<&[f32]> = parts.iter().map(|p| if let DataVec::F32(v) = p { &v[..] } else { &[][..] }).collect();
            DataVec::F32((0..len).map(|k| pairwise_sum(xs.len(), |i| xs[i][k])).collect())
        }
        DataVec::F64(_) => {
            let xs: Vec<&[f64]> = parts.iter().map(|p| if let DataVec::F64(v) = p { &v[..] } else { &[][..] }).collect();
            DataVec::F64((0..len).map(|k| pairwise_sum(xs.len(), |i| xs[i][k])).collect())
        }
    }
}

#[derive(Default)]
pub(crate) struct Counters {
    level1_pushes: AtomicU64,
    level2_messages: AtomicU64,
    updater_calls: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KvStats {
    /// Pushes received from workers, over all level-1 servers.
    pub level1_pushes: u64,
    /// Aggregates received by the level-2 server.
    pub level2_messages: u64,
    pub updater_calls: u64,
}

pub struct KvStore {
    topo: Topology,
    mode: Consistency,
    etype: ElemType,
    keys: Arc<Mutex<BTreeMap<u64, usize>>>,
    l1: Vec<Sender<L1Msg>>,
    l2: Sender<L2Msg>,
    updater: Arc<Mutex<Box<dyn Updater>>>,
    counters: Arc<Counters>,
    threads: Vec<JoinHandle<()>>,
}

impl KvStore {
    pub fn new(topo: Topology, mode: Consistency, etype: ElemType) -> Result<KvStore, KvError> {
        KvStore::with_transport(topo, mode, etype, Transport::InProcess)
    }

    pub fn with_transport(topo: Topology, mode: Consistency, etype: ElemType, transport: Transport) -> Result<KvStore, KvError> {
        if topo.machines == 0 || topo.workers == 0 {
            return Err(KvError::Topology);
        }
        let updater: Arc<Mutex<Box<dyn Updater>>> = Arc::new(Mutex::new(Box::new(SumUpdater)));
        let counters = Arc::new(Counters::default());
        let (l2_tx, l2_rx) = unbounded();
        let l1: Vec<(Sender<L1Msg>, _)> = (0..topo.machines).map(|_| unbounded()).collect();
        let mut threads = Vec::new();
        let (uplinks, downlinks) = match transport {
            Transport::InProcess => {
                let up = (0..topo.machines).map(|m| server::Uplink::Chan(l2_tx.clone(), m)).collect();
                let down = l1.iter().map(|(tx, _)| server::Downlink::Chan(tx.clone())).collect();
                (up, down)
            }
            Transport::Tcp(addr) => {
                let links = tcp::connect(addr, &l2_tx, l1.iter().map(|(tx, _)| tx.clone()).collect())?;
                threads.extend(links.readers);
                (links.uplinks, links.downlinks)
            }
        };
        let l2_state = server::Level2::new(topo.machines, mode, etype, downlinks, updater.clone(), counters.clone());
        threads.push(spawn("kv-level2", move || l2_state.run(l2_rx)));
        let mut l1_tx = Vec::new();
        for (m, ((tx, rx), up)) in l1.into_iter().zip(uplinks).enumerate() {
            let state = server::Level1::new(m, topo.workers, mode, etype, up, counters.clone());
            threads.push(spawn(&format!("kv-level1-{m}"), move || state.run(rx)));
            l1_tx.push(tx);
        }
        Ok(KvStore { topo, mode, etype, keys: Arc::default(), l1: l1_tx, l2: l2_tx, updater, counters, threads })
    }

    pub fn topology(&self) -> Topology {
        self.topo
    }

    pub fn mode(&self) -> Consistency {
        self.mode
    }

    /// Broadcasts the initial value of `key` to every server.
    pub fn init(&self, key: u64, value: &DataVec) -> Result<(), KvError> {
        self.check_type(key, value)?;
        {
            let mut keys = self.keys.lock().unwrap();
            if keys.contains_key(&key) {
                return Err(KvError::AlreadyInitialized(key));
            }
            keys.insert(key, value.len());
        }
        for tx in &self.l1 {
            tx.send(L1Msg::Init { key, value: value.clone() }).map_err(|_| KvError::Closed)?;
        }
        Ok(())
    }

    /// Installs the store-wide updater. Applies to aggregates arriving
    /// after this call.
    pub fn set_updater(&self, u: impl Updater + 'static) {
        *self.updater.lock().unwrap() = Box::new(u);
    }

    /// Handle for worker `id` (`0..machines*workers`); worker `id` lives on
    /// machine `id / workers`. Its push and pull operations are scheduled on
    /// `engine`, which should have a thread to spare for pulls that block
    /// on the server.
    pub fn worker(&self, id: usize, engine: &Arc<Engine>) -> Result<KvWorker, KvError> {
        if id >= self.topo.total_workers() {
            return Err(KvError::Worker(id));
        }
        let machine = id / self.topo.workers;
        Ok(KvWorker {
            id,
            local: id % self.topo.workers,
            etype: self.etype,
            engine: engine.clone(),
            stream: engine.new_tag(format!("kv-worker{id}")),
            tx: self.l1[machine].clone(),
            keys: self.keys.clone(),
            pushed: HashMap::new(),
        })
    }

    pub fn stats(&self) -> KvStats {
        let c = &self.counters;
        KvStats {
            level1_pushes: c.level1_pushes.load(Ordering::SeqCst),
            level2_messages: c.level2_messages.load(Ordering::SeqCst),
            updater_calls: c.updater_calls.load(Ordering::SeqCst),
        }
    }

    /// Blocks until every push sent so far has been applied at level 2 and
    /// the result has reached every level-1 replica.
    pub fn quiesce(&self) -> Result<(), KvError> {
        // The first pass drains level-1 into level-2, the second drains the
        // broadcasts that the first pass produced.
        for _ in 0..2 {
            let waits: Vec<_> = self
                .l1
                .iter()
                .map(|tx| {
                    let (rtx, rrx) = bounded(1);
                    tx.send(L1Msg::Flush { reply: rtx }).map(|_| rrx).map_err(|_| KvError::Closed)
                })
                .collect::<Result<_, _>>()?;
            for w in waits {
                w.recv().map_err(|_| KvError::Closed)?;
            }
        }
        Ok(())
    }

    /// The value machine `m`'s level-1 server currently holds for `key`.
    pub fn replica(&self, machine: usize, key: u64) -> Result<DataVec, KvError> {
        let (rtx, rrx) = bounded(1);
        self.l1.get(machine).ok_or(KvError::Worker(machine))?.send(L1Msg::Snapshot { key, reply: rtx }).map_err(|_| KvError::Closed)?;
        rrx.recv().map_err(|_| KvError::Closed)?.ok_or(KvError::Uninitialized(key))
    }

    fn check_type(&self, key: u64, value: &DataVec) -> Result<(), KvError> {
        if value.etype() != self.etype {
            return Err(KvError::Type { key, expected: self.etype.name(), got: value.etype().name() });
        }
        Ok(())
    }
}

impl Drop for KvStore {
    fn drop(&mut self) {
        for tx in &self.l1 {
            let _ = tx.send(L1Msg::Shutdown);
        }
        let _ = self.l2.send(L2Msg::Shutdown);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn spawn(name: &str, f: impl FnOnce() + Send + 'static) -> JoinHandle<()> {
    std::thread::Builder::new().name(name.to_string()).spawn(f).expect("spawn kvstore thread")
}

/// One worker's view of the store. Pushes and pulls are engine operations
/// that also write a per-worker stream tag, so they reach the level-1
/// server in call order.
pub struct KvWorker {
    id: usize,
    local: usize,
    etype: ElemType,
    engine: Arc<Engine>,
    stream: Tag,
    tx: Sender<L1Msg>,
    keys: Arc<Mutex<BTreeMap<u64, usize>>>,
    pushed: HashMap<u64, u64>,
}

impl KvWorker {
    pub fn id(&self) -> usize {
        self.id
    }

    fn check(&self, key: u64, t: &Tensor) -> Result<(), KvError> {
        let len = *self.keys.lock().unwrap().get(&key).ok_or(KvError::Uninitialized(key))?;
        let got = t.shape().num_elements();
        if got != len || t.etype() != self.etype {
            return Err(KvError::Length { key, expected: len, got, etype: self.etype.name() });
        }
        Ok(())
    }

    /// Schedules sending `value` to this machine's level-1 server once
    /// every pending write to it has finished.
    pub fn push(&mut self, key: u64, value: &Tensor) -> Result<(), KvError> {
        self.check(key, value)?;
        *self.pushed.entry(key).or_default() += 1;
        let (storage, tx, worker) = (value.storage().clone(), self.tx.clone(), self.local);
        self.engine.push("kv_push", &[value.tag()], &[self.stream], move || {
            let data = unsafe { storage.copy_out() };
            tx.send(L1Msg::Push { worker, key, data }).map_err(|_| "kvstore closed".to_string())
        })?;
        Ok(())
    }

    /// Schedules overwriting `out` with the store's value for `key`.
    pub fn pull(&mut self, key: u64, out: &Tensor) -> Result<(), KvError> {
        self.check(key, out)?;
        let min_version = self.pushed.get(&key).copied().unwrap_or(0);
        let (storage, tx) = (out.storage().clone(), self.tx.clone());
        self.engine.push("kv_pull", &[], &[out.tag(), self.stream], move || {
            let (rtx, rrx) = bounded(1);
            tx.send(L1Msg::Pull { key, min_version, reply: rtx }).map_err(|_| "kvstore closed".to_string())?;
            let value = rrx.recv().map_err(|_| "kvstore closed".to_string())?;
            if unsafe { storage.copy_in(&value) } {
                Ok(())
            } else {
                Err(format!("pulled value for key {key} does not fit"))
            }
        })?;
        Ok(())
    }

    /// Blocks until every worker has reached the barrier and all pushes
    /// issued before it are applied and visible to every replica.
    pub fn round_barrier(&mut self) -> Result<(), KvError> {
        let tx = self.tx.clone();
        self.engine.push("kv_barrier", &[], &[self.stream], move || {
            let (rtx, rrx) = bounded(1);
            tx.send(L1Msg::Barrier { reply: rtx }).map_err(|_| "kvstore closed".to_string())?;
            rrx.recv().map_err(|_| "kvstore closed".to_string())
        })?;
        self.engine.wait_for(self.stream)?;
        Ok(())
    }

    /// Waits for this worker's pending pushes and pulls.
    pub fn wait(&self) -> Result<(), KvError> {
        Ok(self.engine.wait_for(self.stream)?)
    }
}

impl Drop for KvWorker {
    fn drop(&mut self) {
        let _ = self.engine.push_delete(self.stream);
    }
}
