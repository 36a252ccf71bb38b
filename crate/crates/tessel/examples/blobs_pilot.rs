//! Pilot runs behind the blobs accuracy thresholds used in tests.
//!
//! cargo run --release -p tessel --example blobs_pilot

use std::sync::Arc;

use tessel::data::{blobs, BatchConfig, BatchIterator, BlobsConfig, Dataset, ExampleSource};
use tessel::kvstore::{Consistency, Topology, Transport};
use tessel::train::{train_distributed, train_local, DistConfig, TrainConfig, TrainReport};
use tessel_core::models::mlp;
use tessel_core::sgd::OptimizerConfig;

fn summary(name: &str, seed: u64, r: &TrainReport) {
    let first5: Vec<String> = r.epochs.iter().take(5).map(|e| format!("{:.4}", e.loss)).collect();
    let worst = r.epochs.iter().map(|e| e.acc).fold(1.0, f64::min);
    println!("{name:<10} seed {seed}  final acc {:.4}  min acc {worst:.4}  loss[0..5] {}", r.final_accuracy().unwrap_or(0.0), first5.join(" "));
}

fn main() {
    let symbol = mlp(8, &[16], 2).unwrap();
    for seed in 0..5 {
        let src: Arc<dyn ExampleSource> = Arc::new(Dataset::new(blobs(&BlobsConfig { seed, ..BlobsConfig::default() })));
        let cfg = TrainConfig { opt: OptimizerConfig::new(0.1, 0.5, 0.0).unwrap(), epochs: 20, init_seed: seed, ..TrainConfig::default() };
        let mut it = BatchIterator::new(src.clone(), BatchConfig::new(32, seed));
        summary("local", seed, &train_local(&symbol, &mut it, &cfg).unwrap());
        let dist = DistConfig { topology: Topology { machines: 2, workers: 2 }, mode: Consistency::Eventual, transport: Transport::InProcess };
        let mut it = BatchIterator::new(src, BatchConfig::new(32, seed));
        summary("eventual", seed, &train_distributed(&symbol, &mut it, &cfg, &dist).unwrap());
    }
}
