use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeMap;
use std::sync::Arc;

use tessel::tensor::{axpy, copy_to, elementwise, matmul, scalar_op, scale, BinOp, ScalarOp};
use tessel::{engine, BindOptions, Engine, Executor, GradReq, Tensor};
use tessel_core::models::mlp;
use tessel_core::rng::SplitMix64;
use tessel_core::{ElemType, Shape};

/// Counts allocations made while an engine operation is running.
struct Counting;

static TOTAL_IN_OP: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, l: Layout) -> *mut u8 {
        if engine::in_op() {
            TOTAL_IN_OP.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        }
        unsafe { System.alloc(l) }
    }
    unsafe fn dealloc(&self, p: *mut u8, l: Layout) {
        unsafe { System.dealloc(p, l) }
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

const N: usize = 16;

fn sq() -> Shape {
    Shape::new(vec![4, 4]).unwrap()
}

#[derive(Clone, Debug)]
enum Op {
    Bin(BinOp, usize, usize, usize),
    Scalar(ScalarOp, usize, f64, usize),
    Matmul(usize, usize, usize),
    Axpy(f64, usize, usize),
    Scale(f64, usize),
    Copy(usize, usize),
}

fn random_program(rng: &mut SplitMix64, slots: usize, len: usize) -> Vec<Op> {
    let pick = |rng: &mut SplitMix64| rng.below(slots as u64) as usize;
    (0..len)
        .map(|_| match rng.below(6) {
            0 => {
                let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][rng.below(4) as usize];
                Op::Bin(op, pick(rng), pick(rng), pick(rng))
            }
            1 => {
                let op = if rng.below(2) == 0 { ScalarOp::Add } else { ScalarOp::Mul };
                Op::Scalar(op, pick(rng), rng.next_f64() - 0.5, pick(rng))
            }
            2 => loop {
                let (a, b, o) = (pick(rng), pick(rng), pick(rng));
                if o != a && o != b {
                    break Op::Matmul(a, b, o);
                }
            },
            3 => Op::Axpy(rng.next_f64() - 0.5, pick(rng), pick(rng)),
            4 => Op::Scale(rng.next_f64() + 0.5, pick(rng)),
            _ => Op::Copy(pick(rng), pick(rng)),
        })
        .collect()
}

/// Plain host-side replay in program order.
fn eager(init: &[Vec<f64>], prog: &[Op]) -> Vec<Vec<f64>> {
    let mut v = init.to_vec();
    for op in prog {
        match *op {
            Op::Bin(op, a, b, o) => {
                v[o] = (0..N)
                    .map(|k| match op {
                        BinOp::Add => v[a][k] + v[b][k],
                        BinOp::Sub => v[a][k] - v[b][k],
                        BinOp::Mul => v[a][k] * v[b][k],
                        BinOp::Div => v[a][k] / v[b][k],
                    })
                    .collect()
            }
            Op::Scalar(op, a, c, o) => {
                v[o] = v[a].iter().map(|x| if matches!(op, ScalarOp::Add) { x + c } else { x * c }).collect()
            }
            Op::Matmul(a, b, o) => {
                let mut out = vec![0.0; N];
                for i in 0..4 {
                    for j in 0..4 {
                        let mut s = 0.0;
                        for p in 0..4 {
                            s += v[a][i * 4 + p] * v[b][p * 4 + j];
                        }
                        out[i * 4 + j] = s;
                    }
                }
                v[o] = out;
            }
            Op::Axpy(alpha, x, y) => {
                let xs = v[x].clone();
                for (y, x) in v[y].iter_mut().zip(xs) {
                    *y += alpha * x;
                }
            }
            Op::Scale(c, y) => v[y].iter_mut().for_each(|y| *y *= c),
            Op::Copy(s, d) => v[d] = v[s].clone(),
        }
    }
    v
}

fn lazy(e: &Arc<Engine>, init: &[Vec<f64>], prog: &[Op]) -> Vec<Vec<f64>> {
    let t: Vec<Tensor> = init.iter().map(|v| Tensor::from_host(e, sq(), ElemType::F64, v).unwrap()).collect();
    for op in prog {
        match *op {
            Op::Bin(op, a, b, o) => elementwise(op, &t[a], &t[b], &t[o]),
            Op::Scalar(op, a, c, o) => scalar_op(op, &t[a], c, &t[o]),
            Op::Matmul(a, b, o) => matmul(&t[a], &t[b], &t[o]),
            Op::Axpy(alpha, x, y) => axpy(alpha, &t[x], &t[y]),
            Op::Scale(c, y) => scale(c, &t[y]),
            Op::Copy(s, d) => copy_to(&t[s], &t[d]),
        }
        .unwrap();
    }
    t.iter().map(|t| t.to_host().unwrap()).collect()
}

fn bits(v: &[Vec<f64>]) -> Vec<Vec<u64>> {
    v.iter().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect()
}

#[test]
fn lazy_programs_match_eager_replay() {
    let e = Engine::new(4);
    let mut rng = SplitMix64::new(11);
    for _ in 0..1000 {
        let slots = 2 + rng.below(5) as usize;
        let init: Vec<Vec<f64>> = (0..slots).map(|_| (0..N).map(|_| rng.next_f64() * 2.0 - 1.0).collect()).collect();
        let len = 1 + rng.below(32) as usize;
        let prog = random_program(&mut rng, slots, len);
        assert_eq!(bits(&lazy(&e, &init, &prog)), bits(&eager(&init, &prog)), "{prog:?}");
    }
}

#[test]
fn in_place_equals_out_of_place() {
    let e = Engine::new(2);
    let v: Vec<f64> = (0..N).map(|k| k as f64 * 0.25 - 1.0).collect();
    let w: Vec<f64> = (0..N).map(|k| 3.0 - k as f64 * 0.5).collect();
    for op in [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div] {
        let a = Tensor::from_host(&e, sq(), ElemType::F64, &v).unwrap();
        let b = Tensor::from_host(&e, sq(), ElemType::F64, &w).unwrap();
        let out = a.zeros_like();
        elementwise(op, &a, &b, &out).unwrap();
        elementwise(op, &a, &b, &a).unwrap();
        assert_eq!(bits(&[a.to_host().unwrap()]), bits(&[out.to_host().unwrap()]));
        let c = Tensor::from_host(&e, sq(), ElemType::F64, &v).unwrap();
        let out = c.zeros_like();
        elementwise(op, &c, &c, &out).unwrap();
        elementwise(op, &c, &c, &c).unwrap();
        assert_eq!(bits(&[c.to_host().unwrap()]), bits(&[out.to_host().unwrap()]));
    }
}

#[test]
fn kernels_do_not_allocate_inside_engine_ops() {
    let e = Engine::new(2);
    let sym = mlp(16, &[32], 4).unwrap();
    let g = sym.to_graph();
    let given = BTreeMap::from([("data".to_string(), Shape::new(vec![8, 16]).unwrap())]);
    let shapes = g.infer_shapes(&given).unwrap();
    let mut rng = SplitMix64::new(2);
    let mut args = BTreeMap::new();
    let mut grads = BTreeMap::new();
    for i in g.arguments() {
        let name = g.nodes[i].name.clone();
        let shape = shapes.shapes[i][0].clone();
        let vals: Vec<f64> = (0..shape.num_elements())
            .map(|_| if name == "label" { rng.below(4) as f64 } else { rng.next_f64() - 0.5 })
            .collect();
        let t = Tensor::from_host(&e, shape, ElemType::F32, &vals).unwrap();
        if name != "data" && name != "label" {
            grads.insert(name.clone(), (t.zeros_like(), GradReq::Write));
        }
        args.insert(name, t);
    }
    let mut ex = Executor::bind(&e, &sym, args, grads, BindOptions::default()).unwrap();
    let w = ex.arg("fc1_weight").unwrap().clone();
    let gw = ex.grad("fc1_weight").unwrap().clone();
    e.wait_all().unwrap();
    let before = TOTAL_IN_OP.load(std::sync::atomic::Ordering::SeqCst);
    for _ in 0..3 {
        ex.forward().unwrap();
        ex.backward().unwrap();
        scale(0.9, &gw).unwrap();
        axpy(-0.1, &gw, &w).unwrap();
        elementwise(BinOp::Mul, &w, &w, &w).unwrap();
    }
    e.wait_all().unwrap();
    assert_eq!(TOTAL_IN_OP.load(std::sync::atomic::Ordering::SeqCst), before);
}
