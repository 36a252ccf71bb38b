//! Batching with a prefetch thread.

use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Receiver};
use tessel_core::rng::SplitMix64;

use super::record::{DataError, Example, RecordReader};

/// Random-access example storage shared with the prefetch thread.
pub trait ExampleSource: Send + Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn get(&self, i: usize) -> Result<Example, DataError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ExampleSource for RecordReader {
    fn len(&self) -> usize {
        RecordReader::len(self)
    }
    fn dim(&self) -> usize {
        RecordReader::dim(self)
    }
    fn get(&self, i: usize) -> Result<Example, DataError> {
        self.read_at(i)
    }
}

/// Examples held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub dim: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Dataset {
        Dataset { dim: examples.first().map_or(0, |e| e.features.len()), examples }
    }
}

impl ExampleSource for Dataset {
    fn len(&self) -> usize {
        self.examples.len()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn get(&self, i: usize) -> Result<Example, DataError> {
        self.examples.get(i).cloned().ok_or(DataError::OutOfRange(i))
    }
}

/// Per-feature `x * scale + shift`, applied while a batch is assembled.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct BatchConfig {
    pub batch: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Completed batches buffered ahead of the consumer. 0 assembles
    /// batches on the calling thread.
    pub prefetch: usize,
    pub normalize: Option<Affine>,
}

impl BatchConfig {
    pub fn new(batch: usize, seed: u64) -> BatchConfig {
        BatchConfig { batch, seed, shuffle: true, prefetch: 2, normalize: None }
    }
}

/// Row-major features `[rows, dim]` and labels as floats, ready to copy
/// into `data` and `label` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<f32>,
}

impl Batch {
    /// Rows `[start, start + rows)` as a new batch.
    pub fn slice(&self, start: usize, rows: usize) -> Batch {
        Batch {
            rows,
            dim: self.dim,
            features: self.features[start * self.dim..(start + rows) * self.dim].to_vec(),
            labels: self.labels[start..start + rows].to_vec(),
        }
    }
}

fn assemble(src: &dyn ExampleSource, ids: &[usize], norm: Option<&Affine>) -> Result<Batch, DataError> {
    let dim = src.dim();
    let mut features = Vec::with_capacity(ids.len() * dim);
    let mut labels = Vec::with_capacity(ids.len());
    for &i in ids {
        let e = src.get(i)?;
        match norm {
            Some(a) => features.extend(e.features.iter().zip(&a.scale).zip(&a.shift).map(|((x, s), b)| x * s + b)),
            None => features.extend_from_slice(&e.features),
        }
        labels.push(e.label as f32);
    }
    Ok(Batch { rows: ids.len(), dim, features, labels })
}

/// Epoch order: identity, or a Fisher-Yates shuffle seeded per epoch.
pub fn epoch_order(n: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        SplitMix64::new(seed).shuffle(&mut order);
    }
    order
}

/// Yields fixed-size batches. A final partial batch is dropped, so every
/// batch binds to the same executor shapes.
pub struct BatchIterator {
    src: Arc<dyn ExampleSource>,
    cfg: BatchConfig,
    epoch_seed: u64,
    order: Vec<usize>,
    next: usize,
    rx: Option<Receiver<Result<Batch, DataError>>>,
    worker: Option<JoinHandle<()>>,
}

impl BatchIterator {
    pub fn new(src: Arc<dyn ExampleSource>, cfg: BatchConfig) -> BatchIterator {
        assert!(cfg.batch > 0, "batch size must be positive");
        let epoch_seed = cfg.seed;
        let mut it = BatchIterator { src, cfg, epoch_seed, order: Vec::new(), next: 0, rx: None, worker: None };
        it.start();
        it
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.src.len() / self.cfg.batch
    }

    pub fn dim(&self) -> usize {
        self.src.dim()
    }

    pub fn batch_size(&self) -> usize {
        self.cfg.batch
    }

    fn start(&mut self) {
        self.order = epoch_order(self.src.len(), self.epoch_seed, self.cfg.shuffle);
        self.next = 0;
        if self.cfg.prefetch == 0 {
            return;
        }
        let (tx, rx) = bounded(self.cfg.prefetch);
        let (src, order, b, norm) = (self.src.clone(), self.order.clone(), self.cfg.batch, self.cfg.normalize.clone());
        self.worker = Some(
            std::thread::Builder::new()
                .name("tessel-prefetch".into())
                .spawn(move || {
                    for ids in order.chunks_exact(b) {
                        let batch = assemble(src.as_ref(), ids, norm.as_ref());
                        let failed = batch.is_err();
                        if tx.send(batch).is_err() || failed {
                            break;
                        }
                    }
                })
                .expect("spawn prefetch thread"),
        );
        self.rx = Some(rx);
    }

    fn stop(&mut self) {
        self.rx = None;
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }

    /// The next batch, or `Ok(None)` once the epoch is exhausted.
    pub fn next_batch(&mut self) -> Result<Option<Batch>, DataError> {
        if self.next >= self.batches_per_epoch() {
            return Ok(None);
        }
        self.next += 1;
        match &self.rx {
            Some(rx) => match rx.recv() {
                Ok(batch) => batch.map(Some),
                Err(_) => Err(DataError::Io(std::io::Error::other("prefetch thread stopped"))),
            },
            None => {
                let b = self.cfg.batch;
                let ids = &self.order[(self.next - 1) * b..self.next * b];
                assemble(self.src.as_ref(), ids, self.cfg.normalize.as_ref()).map(Some)
            }
        }
    }

    /// Starts the next epoch, reshuffled with the previous seed plus one.
    pub fn reset(&mut self) {
        self.stop();
        self.epoch_seed = self.epoch_seed.wrapping_add(1);
        self.start();
    }
}

impl Drop for BatchIterator {
    fn drop(&mut self) {
        self.stop();
    }
}
