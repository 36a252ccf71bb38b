//! Acceptance run: one PASS/FAIL line per criterion, each under its time
//! budget. Built with `harness = false` so the lines always print.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tessel::bench::memory_table;
use tessel::data::{
    blobs, pack, scan, BatchConfig, BatchIterator, BlobsConfig, DataError, Dataset, Example, ExampleSource, RecordReader,
};
use tessel::enginecheck::{serializability, shared_rng_draws};
use tessel::kvstore::{Consistency, Topology, Transport};
use tessel::train::{batch_metrics, batch_shapes, init_params, train_distributed, train_local, DistConfig, TrainConfig, TrainReport};
use tessel::Engine;
use tessel_core::autodiff::gradient;
use tessel_core::interp::evaluate;
use tessel_core::models::mlp;
use tessel_core::planner::{plan_memory, validate_plan, PlanStrategy};
use tessel_core::rng::SplitMix64;
use tessel_core::sgd::{sgd_update, OptimizerConfig};
use tessel_core::testkit::{grad_cases, random_dag, worst_grad_error, GRAD_TOL};
use tessel_core::{DataVec, ElemType};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn blobs_source(seed: u64, examples: usize) -> Arc<dyn ExampleSource> {
    Arc::new(Dataset::new(blobs(&BlobsConfig { examples, seed, ..BlobsConfig::default() })))
}

fn blobs_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { opt: OptimizerConfig::new(0.1, 0.5, 0.0).unwrap(), epochs, init_seed: seed, ..TrainConfig::default() }
}

fn same_run(a: &TrainReport, b: &TrainReport) -> bool {
    let bits = |r: &TrainReport| r.batch_losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    bits(a) == bits(b)
        && a.params.len() == b.params.len()
        && a.params.iter().all(|(k, v)| b.params.get(k).is_some_and(|w| w.to_le_bytes() == v.to_le_bytes()))
}

fn memory_planner() -> Outcome {
    let net = mlp(64, &[64; 7], 10).map_err(|e| e.to_string())?;
    let train = memory_table(&net, 64, ElemType::F32, false).map_err(|e| e.to_string())?;
    let fwd = memory_table(&net, 64, ElemType::F32, true).map_err(|e| e.to_string())?;
    let (rt, rf) = (train[3].ratio, fwd[3].ratio);
    ensure(rt <= 0.5 && rf <= 0.25, || format!("both/none: train {rt:.3} (need <= 0.5), forward {rf:.3} (need <= 0.25)"))?;
    Ok(format!("8-layer MLP, batch 64: both/none = {rt:.3} forward+backward, {rf:.3} forward-only"))
}

fn planner_validity() -> Outcome {
    let mut violations = Vec::new();
    for seed in 0..500u64 {
        let mut rng = SplitMix64::new(seed);
        let (g, given) = random_dag(&mut rng, 12);
        let shapes = g.infer_shapes(&given).map_err(|e| e.to_string())?;
        for s in PlanStrategy::ALL {
            if let Err(v) = validate_plan(&g, &shapes, &plan_memory(&g, &shapes, ElemType::F32, s), seed) {
                violations.push(format!("seed {seed} {}: {v}", s.name()));
            }
        }
    }
    ensure(violations.is_empty(), || format!("{} violations, first: {}", violations.len(), violations[0]))?;
    Ok("500 random DAGs x 4 strategies, 0 violations".into())
}

fn gradient_correctness() -> Outcome {
    let mut worst = (0.0, String::new());
    let cases = grad_cases();
    for (label, make) in &cases {
        let e = worst_grad_error(make);
        if e >= worst.0 {
            worst = (e, label.clone());
        }
    }
    ensure(worst.0 < GRAD_TOL, || format!("{}: relative error {:e}", worst.1, worst.0))?;
    Ok(format!("{} case families x 20 seeds, worst relative error {:.1e} ({})", cases.len(), worst.0, worst.1))
}

fn engine_serializability() -> Outcome {
    let engine = Engine::new(4);
    let bad = serializability(&engine, 2024, 10_000, 16, 32).map_err(|e| e.to_string())?;
    ensure(bad == 0, || format!("{bad} of 10000 programs diverged from the sequential replay"))?;
    let first = shared_rng_draws(&engine, 7, 64, true).map_err(|e| e.to_string())?;
    for run in 1..100 {
        let again = shared_rng_draws(&engine, 7, 64, true).map_err(|e| e.to_string())?;
        ensure(again == first, || format!("seed-tag draws differ on run {run}"))?;
    }
    Ok("10000 programs over 16 tags match; 100 seed-tag runs identical".into())
}

fn kvstore_equivalence() -> Outcome {
    let src = blobs_source(0, 1024);
    let cfg = blobs_config(5, 0);
    let symbol = mlp(8, &[16], 2).map_err(|e| e.to_string())?;
    let iter = || BatchIterator::new(src.clone(), BatchConfig::new(32, 0));
    let local = train_local(&symbol, &mut iter(), &cfg).map_err(|e| e.to_string())?;
    for (m, w) in [(1, 4), (2, 2)] {
        let dist = DistConfig { topology: Topology { machines: m, workers: w }, mode: Consistency::Sequential, transport: Transport::InProcess };
        let d = train_distributed(&symbol, &mut iter(), &cfg, &dist).map_err(|e| e.to_string())?;
        ensure(same_run(&d, &local), || format!("M={m},W={w} differs from batch-32 local training"))?;
    }
    Ok(format!("M=1,W=4 and M=2,W=2 equal local batch 32 bitwise over 5 epochs ({} batches)", local.batch_losses.len()))
}

/// Host oracle: the gradient graph through the reference interpreter and
/// the slice SGD update, one batch at a time with nothing deferred.
fn eager_reference(src: &Arc<dyn ExampleSource>, cfg: &TrainConfig) -> Result<TrainReport, String> {
    let symbol = mlp(8, &[16], 2).map_err(|e| e.to_string())?;
    let g = symbol.to_graph();
    let params: Vec<String> = g.argument_names().into_iter().filter(|n| n != "data" && n != "label").collect();
    let wrt: Vec<&str> = params.iter().map(String::as_str).collect();
    let gg = gradient(&symbol, &wrt).map_err(|e| e.to_string())?.to_graph();
    let given = batch_shapes(32, 8).map_err(|e| e.to_string())?;
    let shapes = gg.infer_shapes(&given).map_err(|e| e.to_string())?;
    let init = init_params(&g, &g.infer_shapes(&given).map_err(|e| e.to_string())?, ElemType::F32, cfg.init_seed);
    let f32s = |d: &DataVec| match d {
        DataVec::F32(v) => v.clone(),
        _ => unreachable!(),
    };
    let mut w: BTreeMap<String, Vec<f32>> = init.iter().map(|(k, v)| (k.clone(), f32s(v))).collect();
    let mut vel: BTreeMap<String, Vec<f32>> = w.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
    let mut it = BatchIterator::new(src.clone(), BatchConfig::new(32, cfg.init_seed));
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            it.reset();
        }
        while let Some(b) = it.next_batch().map_err(|e| e.to_string())? {
            let mut args = w.clone();
            args.insert("data".into(), b.features.clone());
            args.insert("label".into(), b.labels.clone());
            let outs = evaluate(&gg, &shapes, &args).map_err(|e| e.to_string())?;
            let probs: Vec<f64> = outs[0].iter().map(|&p| p as f64).collect();
            let (loss, _) = batch_metrics(&probs, &b.labels);
            report.batch_losses.push(loss / b.rows as f64);
            for (k, grad) in params.iter().zip(&outs[1..]) {
                sgd_update(&cfg.opt, w.get_mut(k).unwrap(), grad, vel.get_mut(k).unwrap());
            }
        }
    }
    report.params = w.into_iter().map(|(k, v)| (k, DataVec::F32(v))).collect();
    Ok(report)
}

fn lazy_interop() -> Outcome {
    let src = blobs_source(1, 1600);
    let cfg = TrainConfig { threads: 4, ..blobs_config(2, 1) };
    let symbol = mlp(8, &[16], 2).map_err(|e| e.to_string())?;
    let lazy = train_local(&symbol, &mut BatchIterator::new(src.clone(), BatchConfig::new(32, 1)), &cfg).map_err(|e| e.to_string())?;
    ensure(lazy.batch_losses.len() == 100, || format!("{} batches, expected 100", lazy.batch_losses.len()))?;
    let reference = eager_reference(&src, &cfg)?;
    ensure(same_run(&lazy, &reference), || "lazy run differs from the host reference".into())?;
    let inline = TrainConfig { threads: 0, ..cfg.clone() };
    let eager = train_local(&symbol, &mut BatchIterator::new(src, BatchConfig::new(32, 1)), &inline).map_err(|e| e.to_string())?;
    ensure(same_run(&lazy, &eager), || "lazy run differs from the inline engine run".into())?;
    Ok("100 batches on 4 engine threads equal the host reference and the inline engine bitwise".into())
}

fn end_to_end() -> Outcome {
    let symbol = mlp(8, &[16], 2).map_err(|e| e.to_string())?;
    let mut accs = Vec::new();
    for seed in 0..5 {
        let mut it = BatchIterator::new(blobs_source(seed, 1024), BatchConfig::new(32, seed));
        let r = train_local(&symbol, &mut it, &blobs_config(20, seed)).map_err(|e| e.to_string())?;
        let acc = r.final_accuracy().unwrap_or(0.0);
        ensure(acc >= 0.95, || format!("seed {seed}: accuracy {acc:.4} after 20 epochs"))?;
        let first5: Vec<f64> = r.epochs.iter().take(5).map(|e| e.loss).collect();
        ensure(first5.windows(2).all(|w| w[1] < w[0]), || format!("seed {seed}: loss not decreasing {first5:?}"))?;
        accs.push(format!("{acc:.4}"));
    }
    Ok(format!("train accuracy after 20 epochs, seeds 0-4: {}", accs.join(" ")))
}

fn data_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("big.rec");
    let ex = blobs(&BlobsConfig { examples: 10_000, dim: 16, classes: 10, seed: 5, ..BlobsConfig::default() });
    pack(ex.clone(), &path).map_err(|e| e.to_string())?;
    let back: Vec<Example> = scan(&path).map_err(|e| e.to_string())?.collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure(back == ex, || "scan differs from packed examples".into())?;

    let src: Arc<dyn ExampleSource> = Arc::new(RecordReader::open(&path).map_err(|e| e.to_string())?);
    let drain = |depth: usize| -> Result<Vec<_>, DataError> {
        let mut it = BatchIterator::new(src.clone(), BatchConfig { prefetch: depth, ..BatchConfig::new(64, 9) });
        let mut out = Vec::new();
        for _ in 0..2 {
            while let Some(b) = it.next_batch()? {
                out.push(b);
            }
            it.reset();
        }
        Ok(out)
    };
    let base = drain(0).map_err(|e| e.to_string())?;
    for depth in [1, 2, 8] {
        ensure(drain(depth).map_err(|e| e.to_string())? == base, || format!("prefetch depth {depth} changed the batches"))?;
    }

    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let victim = 4321;
    let idx = std::fs::read(tessel::data::index_path(&path)).map_err(|e| e.to_string())?;
    let off = u64::from_le_bytes(idx[(victim + 1) * 8..(victim + 2) * 8].try_into().unwrap()) as usize;
    bytes[off + 8 + 10] ^= 0x01;
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    let errors: Vec<usize> = scan(&path)
        .map_err(|e| e.to_string())?
        .enumerate()
        .filter_map(|(i, r)| r.is_err().then_some(i))
        .collect();
    ensure(errors == [victim], || format!("scan flagged {errors:?}, expected [{victim}]"))?;
    let r = RecordReader::open(&path).map_err(|e| e.to_string())?;
    ensure(matches!(r.read_at(victim), Err(DataError::Crc { .. })), || "read_at missed the corrupt record".into())?;
    Ok("10000 records: scan identity, prefetch depths 0/1/2/8 agree, single-bit corruption caught at its record".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("memory planner", Duration::from_secs(1), memory_planner),
        ("planner validity", Duration::from_secs(60), planner_validity),
        ("gradient correctness", Duration::from_secs(30), gradient_correctness),
        ("engine serializability", Duration::from_secs(120), engine_serializability),
        ("kvstore sequential equivalence", Duration::from_secs(60), kvstore_equivalence),
        ("lazy evaluation interop", Duration::from_secs(120), lazy_interop),
        ("end-to-end blobs", Duration::from_secs(60), end_to_end),
        ("data round-trip", Duration::from_secs(30), data_round_trip),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(_) if took > budget => Err(format!("took {took:.2?}, budget {budget:?}")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name:<32} {:>8.3}s / {:>4}s  {detail}", took.as_secs_f64(), budget.as_secs()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<32} {:>8.3}s / {:>4}s  {why}", took.as_secs_f64(), budget.as_secs());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 8 acceptance criteria passed");
}
