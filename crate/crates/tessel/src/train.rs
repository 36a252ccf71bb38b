//! Training loops: single-process SGD and data-parallel SGD through the
//! key-value store.
//!
//! Graph conventions: the input argument is `data`, class indices go to
//! `label`, and every other argument is a trainable parameter. The first
//! output must be per-class probabilities (a `SoftmaxOutput` head).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::{bounded, Receiver, Sender};
use tessel_core::planner::PlanStrategy;
use tessel_core::rng::SplitMix64;
use tessel_core::sgd::OptimizerConfig;
use tessel_core::{DataVec, ElemType, Graph, GraphError, Shape, ShapeMap, Symbol};

use crate::data::{Batch, BatchIterator, DataError};
use crate::engine::{Engine, EngineError};
use crate::executor::{BindOptions, ExecError, Executor, GradReq};
use crate::kvstore::{Consistency, KvError, KvStore, SgdUpdater, Topology, Transport};
use crate::tensor::{axpy, scale, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("{0}")]
    Config(String),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub opt: OptimizerConfig,
    pub epochs: usize,
    pub strategy: PlanStrategy,
    pub fuse: bool,
    /// Engine worker threads; 0 runs every operation synchronously.
    pub threads: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    pub etype: ElemType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            opt: OptimizerConfig::default(),
            epochs: 10,
            strategy: PlanStrategy::Both,
            fuse: true,
            threads: 2,
            init_seed: 0,
            etype: ElemType::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's examples.
    pub loss: f64,
    /// Fraction of examples whose arg-max prediction matched the label.
    pub acc: f64,
    pub seconds: f64,
    pub planner_bytes: usize,
    pub engine_ops: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Mean cross-entropy of every batch, in training order.
    pub batch_losses: Vec<f64>,
    /// Final parameter values by argument name.
    pub params: BTreeMap<String, DataVec>,
}

pub const CSV_HEADER: &str = "epoch,loss,acc,seconds,planner_bytes,engine_ops";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{:.6},{},{}", e.epoch, e.loss, e.acc, e.seconds, e.planner_bytes, e.engine_ops);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.acc)
    }
}

pub fn is_parameter(name: &str) -> bool {
    name != "data" && name != "label"
}

/// Glorot-uniform weights for rank-2 parameters, zeros otherwise.
pub fn init_params(g: &Graph, shapes: &ShapeMap, etype: ElemType, seed: u64) -> BTreeMap<String, DataVec> {
    let mut rng = SplitMix64::new(seed);
    let mut out = BTreeMap::new();
    for i in g.arguments() {
        let name = &g.nodes[i].name;
        if !is_parameter(name) {
            continue;
        }
        let shape = &shapes.shapes[i][0];
        let n = shape.num_elements();
        let values: Vec<f64> = match shape.dims() {
            [rows, cols] => {
                let a = (6.0 / (*rows + *cols) as f64).sqrt();
                (0..n).map(|_| (rng.next_f64() * 2.0 - 1.0) * a).collect()
            }
            _ => vec![0.0; n],
        };
        out.insert(name.clone(), DataVec::from_f64(etype, &values));
    }
    out
}

/// One momentum-SGD step as engine operations on `w` and its velocity `v`:
/// v = m*v, v += -eta*g, v += -eta*wd*w, w += v.
pub fn sgd_step(w: &Tensor, g: &Tensor, v: &Tensor, cfg: &OptimizerConfig) -> Result<(), TensorError> {
    scale(cfg.momentum, v)?;
    axpy(-cfg.eta, g, v)?;
    axpy(-cfg.eta * cfg.wd, w, v)?;
    axpy(1.0, v, w)
}

/// Summed cross-entropy and correct-prediction count of a probability
/// matrix `[rows, classes]` against float labels.
pub fn batch_metrics(probs: &[f64], labels: &[f32]) -> (f64, usize) {
    let rows = labels.len();
    if rows == 0 {
        return (0.0, 0);
    }
    let classes = probs.len() / rows;
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, &l) in labels.iter().enumerate() {
        let row = &probs[r * classes..(r + 1) * classes];
        let y = l as usize;
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        correct += (best == y) as usize;
    }
    (loss, correct)
}

fn labels_data(etype: ElemType, b: &Batch) -> DataVec {
    match etype {
        ElemType::F32 => DataVec::F32(b.labels.clone()),
        ElemType::F64 => DataVec::F64(b.labels.iter().map(|&x| x as f64).collect()),
    }
}

fn features_data(etype: ElemType, b: &Batch) -> DataVec {
    match etype {
        ElemType::F32 => DataVec::F32(b.features.clone()),
        ElemType::F64 => DataVec::F64(b.features.iter().map(|&x| x as f64).collect()),
    }
}

/// Input shapes for a batch of `rows` examples of `dim` features.
pub fn batch_shapes(rows: usize, dim: usize) -> Result<BTreeMap<String, Shape>, TrainError> {
    Ok(BTreeMap::from([("data".to_string(), Shape::new(vec![rows, dim]).map_err(GraphError::from)?)]))
}

/// An executor bound to a fixed batch shape, with gradients for every
/// parameter.
pub struct Model {
    pub engine: Arc<Engine>,
    pub exec: Executor,
    pub params: Vec<(String, Tensor)>,
    pub grads: Vec<Tensor>,
    data: Tensor,
    label: Tensor,
    etype: ElemType,
}

impl Model {
    pub fn bind(
        engine: &Arc<Engine>,
        symbol: &Symbol,
        rows: usize,
        dim: usize,
        init: &BTreeMap<String, DataVec>,
        cfg: &TrainConfig,
    ) -> Result<Model, TrainError> {
        let g = symbol.to_graph();
        let shapes = g.infer_shapes(&batch_shapes(rows, dim)?)?;
        let mut args = BTreeMap::new();
        let mut grads = BTreeMap::new();
        let mut params = Vec::new();
        let mut grad_list = Vec::new();
        for i in g.arguments() {
            let name = g.nodes[i].name.clone();
            let shape = shapes.shapes[i][0].clone();
            let t = Tensor::zeros(engine, shape, cfg.etype);
            if is_parameter(&name) {
                let v = init.get(&name).ok_or_else(|| TrainError::Config(format!("no initial value for `{name}`")))?;
                t.write(v.clone())?;
                let gt = t.zeros_like();
                grads.insert(name.clone(), (gt.clone(), GradReq::Write));
                params.push((name.clone(), t.clone()));
                grad_list.push(gt);
            }
            args.insert(name, t);
        }
        let data = args.get("data").cloned().ok_or_else(|| TrainError::Config("graph has no `data` argument".into()))?;
        let label = args.get("label").cloned().ok_or_else(|| TrainError::Config("graph has no `label` argument".into()))?;
        let exec = Executor::bind(engine, symbol, args, grads, BindOptions { strategy: cfg.strategy, fuse: cfg.fuse })?;
        Ok(Model { engine: engine.clone(), exec, params, grads: grad_list, data, label, etype: cfg.etype })
    }

    pub fn load(&self, b: &Batch) -> Result<(), TrainError> {
        self.data.write(features_data(self.etype, b))?;
        self.label.write(labels_data(self.etype, b))?;
        Ok(())
    }

    /// Forward and backward on the loaded batch; returns the probability
    /// output handle, still possibly being computed.
    pub fn step(&mut self) -> Result<Tensor, TrainError> {
        let out = self.exec.forward()?[0].clone();
        self.exec.backward()?;
        Ok(out)
    }
}

struct EpochAcc {
    loss: f64,
    correct: usize,
    seen: usize,
}

impl EpochAcc {
    fn new() -> EpochAcc {
        EpochAcc { loss: 0.0, correct: 0, seen: 0 }
    }

    fn add(&mut self, probs: &[f64], labels: &[f32], report: &mut TrainReport) {
        let (l, c) = batch_metrics(probs, labels);
        report.batch_losses.push(l / labels.len() as f64);
        self.loss += l;
        self.correct += c;
        self.seen += labels.len();
    }

    fn finish(&self, epoch: usize, start: Instant, planner_bytes: usize, engine_ops: u64) -> EpochStats {
        let n = self.seen.max(1) as f64;
        EpochStats {
            epoch,
            loss: self.loss / n,
            acc: self.correct as f64 / n,
            seconds: start.elapsed().as_secs_f64(),
            planner_bytes,
            engine_ops,
        }
    }
}

/// Plain minibatch SGD. Parameter updates are engine operations on the
/// weight tags, so they overlap with reading back the batch metrics and
/// are ordered before the next forward pass by the engine alone.
pub fn train_local(symbol: &Symbol, iter: &mut BatchIterator, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let engine = Engine::new(cfg.threads);
    let rows = iter.batch_size();
    let g = symbol.to_graph();
    let shapes = g.infer_shapes(&batch_shapes(rows, iter.dim())?)?;
    let init = init_params(&g, &shapes, cfg.etype, cfg.init_seed);
    let mut model = Model::bind(&engine, symbol, rows, iter.dim(), &init, cfg)?;
    let velocity: Vec<Tensor> = model.params.iter().map(|(_, w)| w.zeros_like()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            iter.reset();
        }
        let start = Instant::now();
        let ops = engine.ops_pushed();
        let mut acc = EpochAcc::new();
        while let Some(b) = iter.next_batch()? {
            model.load(&b)?;
            let out = model.step()?;
            for ((_, w), (g, v)) in model.params.iter().zip(model.grads.iter().zip(&velocity)) {
                sgd_step(w, g, v, &cfg.opt)?;
            }
            acc.add(&out.to_host()?, &b.labels, &mut report);
        }
        engine.wait_all()?;
        report.epochs.push(acc.finish(epoch, start, model.exec.plan().total_internal_bytes, engine.ops_pushed() - ops));
    }
    for (name, w) in &model.params {
        report.params.insert(name.clone(), w.to_data()?);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug)]
pub struct DistConfig {
    pub topology: Topology,
    pub mode: Consistency,
    pub transport: Transport,
}

enum ToWorker {
    Batch(Batch),
    Stop,
}

struct FromWorker {
    probs: Result<Vec<f64>, TrainError>,
    ops: u64,
    planner_bytes: usize,
}

/// Data-parallel SGD. Each global batch from `iter` is cut into
/// `machines * workers` contiguous row blocks, block `i` going to worker
/// `i`. Workers pull weights, run forward and backward on their block, and
/// push gradients scaled by one over the worker count; the level-2 server
/// applies momentum SGD to the merged gradient.
///
/// In sequential mode with power-of-two counts and block sizes the result
/// matches [`train_local`] on the same iterator bit for bit.
pub fn train_distributed(symbol: &Symbol, iter: &mut BatchIterator, cfg: &TrainConfig, dist: &DistConfig) -> Result<TrainReport, TrainError> {
    let n = dist.topology.total_workers();
    let rows = iter.batch_size();
    if n == 0 || !rows.is_multiple_of(n) {
        return Err(TrainError::Config(format!("batch {rows} does not split over {n} workers")));
    }
    let local_rows = rows / n;
    let dim = iter.dim();
    let g = symbol.to_graph();
    let shapes = g.infer_shapes(&batch_shapes(rows, dim)?)?;
    let init = init_params(&g, &shapes, cfg.etype, cfg.init_seed);
    let keys: Vec<String> = init.keys().cloned().collect();

    let kv = KvStore::with_transport(dist.topology, dist.mode, cfg.etype, dist.transport)?;
    kv.set_updater(SgdUpdater::new(cfg.opt));
    for (k, name) in keys.iter().enumerate() {
        kv.init(k as u64, &init[name])?;
    }

    let mut report = TrainReport::default();
    std::thread::scope(|s| -> Result<(), TrainError> {
        let mut to: Vec<Sender<ToWorker>> = Vec::new();
        let mut from: Vec<Receiver<FromWorker>> = Vec::new();
        for i in 0..n {
            let (tx, rx) = bounded::<ToWorker>(1);
            let (btx, brx) = bounded::<FromWorker>(1);
            let engine = Engine::new(cfg.threads.max(1));
            let kvw = kv.worker(i, &engine)?;
            let (init, keys) = (&init, &keys);
            s.spawn(move || worker_loop(engine, kvw, symbol, local_rows, dim, init, keys, n, cfg, rx, btx));
            to.push(tx);
            from.push(brx);
        }
        let mut result = Ok(());
        'epochs: for epoch in 0..cfg.epochs {
            if epoch > 0 {
                iter.reset();
            }
            let start = Instant::now();
            let mut acc = EpochAcc::new();
            let (mut ops, mut planner_bytes) = (0, 0);
            loop {
                let b = match iter.next_batch() {
                    Ok(Some(b)) => b,
                    Ok(None) => break,
                    Err(e) => {
                        result = Err(e.into());
                        break 'epochs;
                    }
                };
                for (i, tx) in to.iter().enumerate() {
                    let _ = tx.send(ToWorker::Batch(b.slice(i * local_rows, local_rows)));
                }
                let mut probs = Vec::with_capacity(rows * 2);
                for rx in &from {
                    let Ok(reply) = rx.recv() else {
                        result = Err(TrainError::Config("worker exited".into()));
                        break 'epochs;
                    };
                    match reply.probs {
                        Ok(p) => probs.extend(p),
                        Err(e) => {
                            result = Err(e);
                            break 'epochs;
                        }
                    }
                    ops += reply.ops;
                    planner_bytes = reply.planner_bytes;
                }
                acc.add(&probs, &b.labels, &mut report);
            }
            report.epochs.push(acc.finish(epoch, start, planner_bytes, ops));
        }
        for tx in &to {
            let _ = tx.send(ToWorker::Stop);
        }
        result
    })?;
    kv.quiesce()?;
    for (k, name) in keys.iter().enumerate() {
        report.params.insert(name.clone(), kv.replica(0, k as u64)?);
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn worker_loop(
    engine: Arc<Engine>,
    mut kvw: crate::kvstore::KvWorker,
    symbol: &Symbol,
    rows: usize,
    dim: usize,
    init: &BTreeMap<String, DataVec>,
    keys: &[String],
    workers: usize,
    cfg: &TrainConfig,
    rx: Receiver<ToWorker>,
    tx: Sender<FromWorker>,
) {
    let mut model = match Model::bind(&engine, symbol, rows, dim, init, cfg) {
        Ok(m) => m,
        Err(e) => {
            let _ = tx.send(FromWorker { probs: Err(e), ops: 0, planner_bytes: 0 });
            return;
        }
    };
    // Parameters in key order, matching `keys`.
    let order: Vec<usize> = keys.iter().map(|k| model.params.iter().position(|(n, _)| n == k).unwrap()).collect();
    let inv = 1.0 / workers as f64;
    while let Ok(ToWorker::Batch(b)) = rx.recv() {
        let before = engine.ops_pushed();
        let mut round = || -> Result<Vec<f64>, TrainError> {
            for (k, &p) in order.iter().enumerate() {
                kvw.pull(k as u64, &model.params[p].1)?;
            }
            model.load(&b)?;
            let out = model.step()?;
            for (k, &p) in order.iter().enumerate() {
                let g = &model.grads[p];
                scale(inv, g)?;
                kvw.push(k as u64, g)?;
            }
            Ok(out.to_host()?)
        };
        let probs = round();
        let failed = probs.is_err();
        let reply = FromWorker { probs, ops: engine.ops_pushed() - before, planner_bytes: model.exec.plan().total_internal_bytes };
        if tx.send(reply).is_err() || failed {
            return;
        }
    }
    let _ = engine.wait_all();
}
