use std::sync::Arc;

use tessel::data::{blobs, BatchConfig, BatchIterator, BlobsConfig, Dataset, ExampleSource};
use tessel::kvstore::{Consistency, Topology, Transport};
use tessel::train::{batch_metrics, sgd_step, train_distributed, train_local, DistConfig, TrainConfig, TrainReport, CSV_HEADER};
use tessel::{Engine, Tensor};
use tessel_core::models::mlp;
use tessel_core::planner::PlanStrategy;
use tessel_core::sgd::OptimizerConfig;
use tessel_core::{ElemType, Shape, Symbol};

fn source(seed: u64, n: usize) -> Arc<dyn ExampleSource> {
    Arc::new(Dataset::new(blobs(&BlobsConfig { examples: n, seed, ..BlobsConfig::default() })))
}

fn iter(src: &Arc<dyn ExampleSource>, batch: usize, seed: u64) -> BatchIterator {
    BatchIterator::new(src.clone(), BatchConfig::new(batch, seed))
}

fn model() -> Symbol {
    mlp(8, &[16], 2).unwrap()
}

// Blobs recipe from the pilot runs (examples/blobs_pilot.rs).
fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { opt: OptimizerConfig::new(0.1, 0.5, 0.0).unwrap(), epochs, ..TrainConfig::default() }
}

fn scalar(e: &Arc<Engine>, x: f64) -> Tensor {
    Tensor::from_host(e, Shape::new(vec![1]).unwrap(), ElemType::F64, &[x]).unwrap()
}

#[test]
fn sgd_step_examples() {
    let e = Engine::new(2);
    let c = OptimizerConfig::new(0.1, 0.9, 0.0).unwrap();
    let (w, g, v) = (scalar(&e, 1.0), scalar(&e, 0.5), scalar(&e, 0.0));
    sgd_step(&w, &g, &v, &c).unwrap();
    assert_eq!(w.to_host().unwrap(), vec![0.95]);
    assert_eq!(v.to_host().unwrap(), vec![-0.05]);

    // g = 0, wd = 0 with no velocity: nothing moves.
    let c = OptimizerConfig::new(0.1, 0.9, 0.0).unwrap();
    let (w, g, v) = (scalar(&e, 2.0), scalar(&e, 0.0), scalar(&e, 0.0));
    sgd_step(&w, &g, &v, &c).unwrap();
    assert_eq!(w.to_host().unwrap(), vec![2.0]);
    // With velocity, v decays by the momentum factor.
    let v = scalar(&e, 0.5);
    sgd_step(&w, &g, &v, &c).unwrap();
    assert_eq!(v.to_host().unwrap(), vec![0.9 * 0.5]);

    // Two steps follow the recursion v' = m v - eta (g + wd w), w' = w + v'.
    let c = OptimizerConfig::new(0.05, 0.9, 0.1).unwrap();
    let (w, g, v) = (scalar(&e, 1.0), scalar(&e, 0.3), scalar(&e, 0.0));
    let (mut hw, mut hv) = (1.0f64, 0.0f64);
    for _ in 0..2 {
        sgd_step(&w, &g, &v, &c).unwrap();
        hv *= 0.9;
        hv += -0.05 * 0.3;
        hv += -0.05 * 0.1 * hw;
        hw += hv;
    }
    assert_eq!(w.to_host().unwrap(), vec![hw]);
    assert_eq!(v.to_host().unwrap(), vec![hv]);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let src = source(1, 256);
    let c = TrainConfig { opt: OptimizerConfig::new(0.0, 0.9, 0.1).unwrap(), epochs: 2, ..TrainConfig::default() };
    let trained = train_local(&model(), &mut iter(&src, 32, 0), &c).unwrap();
    let untouched = train_local(&model(), &mut iter(&src, 32, 0), &TrainConfig { epochs: 0, ..c }).unwrap();
    assert!(untouched.epochs.is_empty() && untouched.batch_losses.is_empty());
    for (k, v) in &trained.params {
        assert_eq!(v.to_le_bytes(), untouched.params[k].to_le_bytes(), "{k}");
    }
}

#[test]
fn batch_metrics_by_hand() {
    let probs = [0.25, 0.75, 0.9, 0.1];
    let (loss, correct) = batch_metrics(&probs, &[1.0, 1.0]);
    assert!((loss - (-(0.75f64).ln() - (0.1f64).ln())).abs() < 1e-12);
    assert_eq!(correct, 1);
}

#[test]
fn planner_strategy_does_not_change_training() {
    let src = source(2, 512);
    let run = |strategy, fuse, threads| {
        let c = TrainConfig { strategy, fuse, threads, ..cfg(3) };
        train_local(&model(), &mut iter(&src, 32, 5), &c).unwrap()
    };
    let base = run(PlanStrategy::None, false, 0);
    for (s, fuse, threads) in [(PlanStrategy::Both, true, 2), (PlanStrategy::Inplace, false, 1), (PlanStrategy::Coshare, true, 3)] {
        let r = run(s, fuse, threads);
        assert_eq!(bits(&r.batch_losses), bits(&base.batch_losses), "{}", s.name());
        for (k, v) in &r.params {
            assert_eq!(v.to_le_bytes(), base.params[k].to_le_bytes());
        }
    }
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

fn assert_same(a: &TrainReport, b: &TrainReport) {
    assert_eq!(bits(&a.batch_losses), bits(&b.batch_losses));
    assert_eq!(a.params.len(), b.params.len());
    for (k, v) in &a.params {
        assert_eq!(v.to_le_bytes(), b.params[k].to_le_bytes(), "{k}");
    }
}

fn dist(machines: usize, workers: usize, mode: Consistency) -> DistConfig {
    DistConfig { topology: Topology { machines, workers }, mode, transport: Transport::InProcess }
}

#[test]
fn distributed_sequential_matches_local() {
    let src = source(3, 512);
    let local = train_local(&model(), &mut iter(&src, 32, 9), &cfg(2)).unwrap();
    for (m, w) in [(1, 1), (1, 4), (2, 2), (4, 2)] {
        let d = train_distributed(&model(), &mut iter(&src, 32, 9), &cfg(2), &dist(m, w, Consistency::Sequential)).unwrap();
        assert_same(&d, &local);
    }
}

#[test]
fn distributed_rejects_uneven_split() {
    let src = source(3, 64);
    assert!(train_distributed(&model(), &mut iter(&src, 12, 0), &cfg(1), &dist(1, 8, Consistency::Sequential)).is_err());
}

#[test]
fn eventual_mode_still_learns() {
    let src = source(4, 1024);
    let r = train_distributed(&model(), &mut iter(&src, 32, 1), &cfg(10), &dist(2, 2, Consistency::Eventual)).unwrap();
    assert!(r.final_accuracy().unwrap() >= 0.93, "{}", r.to_csv());
}

#[test]
fn blobs_reach_high_accuracy_and_loss_falls() {
    for seed in 0..5 {
        let src = source(seed, 1024);
        let c = TrainConfig { init_seed: seed, ..cfg(20) };
        let r = train_local(&model(), &mut iter(&src, 32, seed), &c).unwrap();
        assert!(r.final_accuracy().unwrap() >= 0.95, "seed {seed}\n{}", r.to_csv());
        let losses: Vec<f64> = r.epochs.iter().take(5).map(|e| e.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {losses:?}");
    }
}

#[test]
fn reports_are_reproducible_and_print_csv() {
    let src = source(5, 256);
    let a = train_local(&model(), &mut iter(&src, 32, 2), &cfg(2)).unwrap();
    let b = train_local(&model(), &mut iter(&src, 32, 2), &cfg(2)).unwrap();
    assert_same(&a, &b);
    let csv = a.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1].split(',').count(), 6);
    assert!(a.epochs.iter().all(|e| e.planner_bytes > 0 && e.engine_ops > 0));
}
