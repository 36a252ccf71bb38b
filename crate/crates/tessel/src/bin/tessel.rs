use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tessel::bench::{engine_bench, format_memory_table, memory_table};
use tessel::data::{blobs, pack, read_csv, BatchConfig, BatchIterator, BlobsConfig, ExampleSource, RecordReader};
use tessel::kvstore::{Consistency, Topology, Transport};
use tessel::train::{train_distributed, train_local, DistConfig, TrainConfig, TrainReport};
use tessel_core::planner::PlanStrategy;
use tessel_core::serialize;
use tessel_core::sgd::OptimizerConfig;
use tessel_core::{ElemType, Symbol};

#[derive(Parser)]
#[command(name = "tessel", version, about = "Train and inspect tessel graphs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Single-process minibatch SGD
    Train(TrainArgs),
    /// Data-parallel SGD through the two-level key-value store
    TrainDist(DistArgs),
    /// Internal buffer bytes under each planning strategy
    BenchMemory {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long)]
        forward_only: bool,
    },
    /// Engine throughput plus a serializability self-check
    BenchEngine {
        #[arg(long, default_value_t = 100_000)]
        ops: usize,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long, default_value_t = 200)]
        programs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert `label,f1,...` CSV into a record file and index
    PackData {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a graph file as Graphviz dot
    ExportGraph {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        dot: PathBuf,
    },
    /// Write a seeded Gaussian-blobs record file
    GenBlobs {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        examples: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Record file written by `pack-data` or `gen-blobs`
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    wd: f64,
    #[arg(long, default_value = "both", value_parser = parse_strategy)]
    strategy: PlanStrategy,
    /// CSV report path; printed to stdout when absent
    #[arg(long)]
    report: Option<PathBuf>,
    /// Seeds both the shuffle order and parameter initialization
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    threads: usize,
    #[arg(long)]
    no_fuse: bool,
}

#[derive(Args)]
struct DistArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 1)]
    machines: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "sequential", value_parser = parse_mode)]
    mode: Consistency,
    /// Route level-1 to level-2 traffic over loopback TCP at this address
    #[arg(long)]
    tcp: Option<String>,
}

fn parse_strategy(s: &str) -> Result<PlanStrategy, String> {
    PlanStrategy::parse(s).ok_or_else(|| format!("unknown strategy `{s}` (none, inplace, coshare, both)"))
}

fn parse_mode(s: &str) -> Result<Consistency, String> {
    Consistency::parse(s).ok_or_else(|| format!("unknown mode `{s}` (sequential, eventual)"))
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn load_symbol(path: &Path) -> Res<Symbol> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serialize::load(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn setup(a: &TrainArgs) -> Res<(Symbol, BatchIterator, TrainConfig)> {
    let sym = load_symbol(&a.graph)?;
    let src: Arc<dyn ExampleSource> = Arc::new(RecordReader::open(&a.data).map_err(|e| format!("{}: {e}", a.data.display()))?);
    if a.batch == 0 {
        return Err("--batch must be positive".into());
    }
    let iter = BatchIterator::new(src, BatchConfig::new(a.batch, a.seed));
    let cfg = TrainConfig {
        opt: OptimizerConfig::new(a.lr, a.momentum, a.wd)?,
        epochs: a.epochs,
        strategy: a.strategy,
        fuse: !a.no_fuse,
        threads: a.threads,
        init_seed: a.seed,
        etype: ElemType::F32,
    };
    Ok((sym, iter, cfg))
}

fn emit(report: &TrainReport, path: Option<&Path>) -> Res<()> {
    match path {
        Some(p) => {
            report.write_csv(p)?;
            for e in &report.epochs {
                eprintln!("epoch {:>3}  loss {:.6}  acc {:.4}  {:.3}s", e.epoch, e.loss, e.acc, e.seconds);
            }
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn run(cmd: Cmd) -> Res<()> {
    match cmd {
        Cmd::Train(a) => {
            let (sym, mut iter, cfg) = setup(&a)?;
            emit(&train_local(&sym, &mut iter, &cfg)?, a.report.as_deref())
        }
        Cmd::TrainDist(d) => {
            let (sym, mut iter, cfg) = setup(&d.train)?;
            let transport = match &d.tcp {
                None => Transport::InProcess,
                Some(addr) => Transport::Tcp(addr.to_socket_addrs()?.next().ok_or_else(|| format!("cannot resolve {addr}"))?),
            };
            let dist = DistConfig { topology: Topology { machines: d.machines, workers: d.workers }, mode: d.mode, transport };
            emit(&train_distributed(&sym, &mut iter, &cfg, &dist)?, d.train.report.as_deref())
        }
        Cmd::BenchMemory { graph, batch, forward_only } => {
            let rows = memory_table(&load_symbol(&graph)?, batch, ElemType::F32, forward_only)?;
            print!("{}", format_memory_table(&rows));
            Ok(())
        }
        Cmd::BenchEngine { ops, threads, programs, seed } => {
            let b = engine_bench(threads, ops, programs, seed)?;
            println!("{} ops on {threads} threads in {:.3}s ({:.0} ops/s)", b.ops, b.seconds, b.ops_per_second());
            println!("serializability: {}/{} programs match the sequential replay", b.programs_checked - b.mismatches, b.programs_checked);
            if b.mismatches > 0 {
                return Err(format!("{} programs diverged", b.mismatches).into());
            }
            Ok(())
        }
        Cmd::PackData { csv, out } => {
            let n = pack(read_csv(&csv)?, &out)?;
            println!("packed {n} examples into {}", out.display());
            Ok(())
        }
        Cmd::ExportGraph { graph, dot } => {
            std::fs::write(&dot, serialize::to_dot(&load_symbol(&graph)?.to_graph()))?;
            Ok(())
        }
        Cmd::GenBlobs { out, examples, dim, classes, separation, spread, seed } => {
            if classes > 2 * dim {
                return Err(format!("{classes} classes need --dim of at least {}", classes.div_ceil(2)).into());
            }
            let n = pack(blobs(&BlobsConfig { examples, dim, classes, spread, separation, seed }), &out)?;
            println!("wrote {n} examples to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
