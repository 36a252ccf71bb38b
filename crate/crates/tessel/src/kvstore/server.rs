//! Level-1 and level-2 server event loops.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};

use crossbeam_channel::{Receiver, Sender};
use tessel_core::wire::{Frame, MsgType};
use tessel_core::{DataVec, ElemType};

use super::{pairwise_merge, Consistency, Counters, Updater};

/// Barrier frame keys.
pub(crate) const ROUND: u64 = 0;
pub(crate) const FLUSH: u64 = 1;

pub(crate) enum L1Msg {
    Init { key: u64, value: DataVec },
    Push { worker: usize, key: u64, data: DataVec },
    Pull { key: u64, min_version: u64, reply: Sender<DataVec> },
    Barrier { reply: Sender<()> },
    Flush { reply: Sender<()> },
    Snapshot { key: u64, reply: Sender<Option<DataVec>> },
    Upstream(Frame),
    Shutdown,
}

pub(crate) enum L2Msg {
    Frame(usize, Frame),
    Shutdown,
}

pub(crate) enum Uplink {
    Chan(Sender<L2Msg>, usize),
    Tcp(TcpStream),
}

impl Uplink {
    fn send(&mut self, f: Frame) {
        match self {
            Uplink::Chan(tx, m) => {
                let _ = tx.send(L2Msg::Frame(*m, f));
            }
            Uplink::Tcp(s) => {
                let _ = s.write_all(&f.encode());
            }
        }
    }

    fn close(&mut self) {
        if let Uplink::Tcp(s) = self {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

pub(crate) enum Downlink {
    Chan(Sender<L1Msg>),
    Tcp(TcpStream),
}

impl Downlink {
    fn send(&mut self, f: Frame) {
        match self {
            Downlink::Chan(tx) => {
                let _ = tx.send(L1Msg::Upstream(f));
            }
            Downlink::Tcp(s) => {
                let _ = s.write_all(&f.encode());
            }
        }
    }

    fn close(&mut self) {
        if let Downlink::Tcp(s) = self {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

fn frame(kind: MsgType, key: u64, sender: usize, seq: u64, payload: Vec<u8>) -> Frame {
    Frame { kind, key, sender: sender as u64, seq, payload }
}

/// Pops one value from every queue once all are non-empty.
fn take_round(queues: &mut [VecDeque<DataVec>]) -> Option<Vec<DataVec>> {
    if queues.iter().any(VecDeque::is_empty) {
        return None;
    }
    Some(queues.iter_mut().map(|q| q.pop_front().unwrap()).collect())
}

struct Replica {
    value: DataVec,
    version: u64,
    queues: Vec<VecDeque<DataVec>>,
    waiting: Vec<(u64, Sender<DataVec>)>,
}

pub(crate) struct Level1 {
    machine: usize,
    workers: usize,
    mode: Consistency,
    etype: ElemType,
    up: Uplink,
    keys: HashMap<u64, Replica>,
    barrier: Vec<Sender<()>>,
    flushes: VecDeque<Sender<()>>,
    counters: Arc<Counters>,
}

impl Level1 {
    pub(crate) fn new(machine: usize, workers: usize, mode: Consistency, etype: ElemType, up: Uplink, counters: Arc<Counters>) -> Level1 {
        Level1 { machine, workers, mode, etype, up, keys: HashMap::new(), barrier: Vec::new(), flushes: VecDeque::new(), counters }
    }

    pub(crate) fn run(mut self, rx: Receiver<L1Msg>) {
        while let Ok(msg) = rx.recv() {
            match msg {
                L1Msg::Init { key, value } => {
                    self.up.send(frame(MsgType::Init, key, self.machine, 0, value.to_le_bytes()));
                    let queues = vec![VecDeque::new(); self.workers];
                    self.keys.insert(key, Replica { value, version: 0, queues, waiting: Vec::new() });
                }
                L1Msg::Push { worker, key, data } => {
                    self.counters.level1_pushes.fetch_add(1, Ordering::SeqCst);
                    let Some(rep) = self.keys.get_mut(&key) else { continue };
                    match self.mode {
                        Consistency::Sequential => {
                            rep.queues[worker].push_back(data);
                            while let Some(parts) = take_round(&mut rep.queues) {
                                let agg = pairwise_merge(&parts);
                                self.up.send(frame(MsgType::Push, key, self.machine, 0, agg.to_le_bytes()));
                            }
                        }
                        Consistency::Eventual => {
                            self.up.send(frame(MsgType::Push, key, self.machine, 0, data.to_le_bytes()));
                        }
                    }
                }
                L1Msg::Pull { key, min_version, reply } => {
                    let Some(rep) = self.keys.get_mut(&key) else { continue };
                    if self.mode == Consistency::Sequential && rep.version < min_version {
                        rep.waiting.push((min_version, reply));
                    } else {
                        let _ = reply.send(rep.value.clone());
                    }
                }
                L1Msg::Barrier { reply } => {
                    self.barrier.push(reply);
                    if self.barrier.len() == self.workers {
                        self.up.send(frame(MsgType::Barrier, ROUND, self.machine, 0, Vec::new()));
                    }
                }
                L1Msg::Flush { reply } => {
                    self.flushes.push_back(reply);
                    self.up.send(frame(MsgType::Barrier, FLUSH, self.machine, 0, Vec::new()));
                }
                L1Msg::Snapshot { key, reply } => {
                    let _ = reply.send(self.keys.get(&key).map(|r| r.value.clone()));
                }
                L1Msg::Upstream(f) => self.upstream(f),
                L1Msg::Shutdown => break,
            }
        }
        self.up.close();
    }

    fn upstream(&mut self, f: Frame) {
        match (f.kind, f.key) {
            (MsgType::PullResp, key) => {
                let Some(rep) = self.keys.get_mut(&key) else { return };
                let Some(value) = DataVec::from_le_bytes(self.etype, &f.payload) else { return };
                rep.value = value;
                rep.version = f.seq;
                let version = rep.version;
                let (ready, waiting): (Vec<_>, Vec<_>) = rep.waiting.drain(..).partition(|(v, _)| *v <= version);
                rep.waiting = waiting;
                for (_, reply) in ready {
                    let _ = reply.send(rep.value.clone());
                }
            }
            (MsgType::Barrier, ROUND) => {
                for reply in self.barrier.drain(..) {
                    let _ = reply.send(());
                }
            }
            (MsgType::Barrier, FLUSH) => {
                if let Some(reply) = self.flushes.pop_front() {
                    let _ = reply.send(());
                }
            }
            _ => {}
        }
    }
}

struct Entry {
    value: DataVec,
    version: u64,
    queues: Vec<VecDeque<DataVec>>,
}

pub(crate) struct Level2 {
    machines: usize,
    mode: Consistency,
    etype: ElemType,
    down: Vec<Downlink>,
    keys: HashMap<u64, Entry>,
    barrier: usize,
    updater: Arc<Mutex<Box<dyn Updater>>>,
    counters: Arc<Counters>,
}

impl Level2 {
    pub(crate) fn new(
        machines: usize,
        mode: Consistency,
        etype: ElemType,
        down: Vec<Downlink>,
        updater: Arc<Mutex<Box<dyn Updater>>>,
        counters: Arc<Counters>,
    ) -> Level2 {
        Level2 { machines, mode, etype, down, keys: HashMap::new(), barrier: 0, updater, counters }
    }

    pub(crate) fn run(mut self, rx: Receiver<L2Msg>) {
        while let Ok(L2Msg::Frame(m, f)) = rx.recv() {
            self.handle(m, f);
        }
        for d in &mut self.down {
            d.close();
        }
    }

    fn handle(&mut self, m: usize, f: Frame) {
        match f.kind {
            MsgType::Init => {
                // Every level-1 server forwards the init; the first one wins
                // and the rest carry the same value.
                if let Some(value) = DataVec::from_le_bytes(self.etype, &f.payload) {
                    self.keys.entry(f.key).or_insert(Entry { value, version: 0, queues: vec![VecDeque::new(); self.machines] });
                }
            }
            MsgType::Push => {
                self.counters.level2_messages.fetch_add(1, Ordering::SeqCst);
                let Some(data) = DataVec::from_le_bytes(self.etype, &f.payload) else { return };
                let Some(entry) = self.keys.get_mut(&f.key) else { return };
                match self.mode {
                    Consistency::Sequential => {
                        entry.queues[m].push_back(data);
                        while let Some(parts) = take_round(&mut entry.queues) {
                            let merged = pairwise_merge(&parts);
                            self.updater.lock().unwrap().update(f.key, &mut entry.value, &merged);
                            self.counters.updater_calls.fetch_add(1, Ordering::SeqCst);
                            entry.version += 1;
                            broadcast(&mut self.down, f.key, entry);
                        }
                    }
                    Consistency::Eventual => {
                        self.updater.lock().unwrap().update(f.key, &mut entry.value, &data);
                        self.counters.updater_calls.fetch_add(1, Ordering::SeqCst);
                        entry.version += 1;
                        broadcast(&mut self.down, f.key, entry);
                    }
                }
            }
            MsgType::Barrier if f.key == ROUND => {
                self.barrier += 1;
                if self.barrier == self.machines {
                    self.barrier = 0;
                    for d in &mut self.down {
                        d.send(frame(MsgType::Barrier, ROUND, usize::MAX, 0, Vec::new()));
                    }
                }
            }
            MsgType::Barrier => self.down[m].send(frame(MsgType::Barrier, FLUSH, usize::MAX, 0, Vec::new())),
            MsgType::PullReq | MsgType::PullResp => {}
        }
    }
}

fn broadcast(down: &mut [Downlink], key: u64, entry: &Entry) {
    let bytes = entry.value.to_le_bytes();
    for d in down {
        d.send(frame(MsgType::PullResp, key, usize::MAX, entry.version, bytes.clone()));
    }
}
