//! Seeded random graphs and a central-difference gradient checker, shared
//! by the test suites.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{gradient, head_grad_name};
use crate::graph::{Graph, ShapeMap};
use crate::interp::evaluate;
use crate::models::mlp;
use crate::rng::SplitMix64;
use crate::shape::Shape;
use crate::symbol::Symbol;

/// A random DAG with at most `max_nodes` nodes (variables included) over
/// 4x4 and 4x2 operands, plus the shapes of its data variables. Every sink
/// is an output, as is roughly one interior node in five.
pub fn random_dag(rng: &mut SplitMix64, max_nodes: usize) -> (Graph, BTreeMap<String, Shape>) {
    assert!(max_nodes >= 2);
    let square = Shape::new([4, 4]).unwrap();
    let mut given = BTreeMap::new();
    let mut syms: Vec<(Symbol, Shape)> = Vec::new();
    let mut used: Vec<bool> = Vec::new();
    let nvars = 1 + rng.below(2.min(max_nodes as u64 - 1)) as usize;
    for v in 0..nvars {
        let name = format!("x{v}");
        given.insert(name.clone(), square.clone());
        syms.push((Symbol::variable(&name).unwrap(), square.clone()));
        used.push(false);
    }
    let mut nodes = nvars;
    let target = 2 + rng.below(max_nodes as u64 - 1) as usize;
    let mut k = 0;
    while nodes < target.max(nvars + 1) {
        k += 1;
        let name = format!("n{k}");
        let a = rng.below(syms.len() as u64) as usize;
        let sa = syms[a].1.clone();
        let partners: Vec<usize> = (0..syms.len()).filter(|&j| syms[j].1 == sa).collect();
        let b = partners[rng.below(partners.len() as u64) as usize];
        let choice = rng.below(8);
        let (sym, shape, extra, ins) = match choice {
            0 => unary(&name, "Activation", &[("act_type", "relu")], &syms, a),
            1 => unary(&name, "Activation", &[("act_type", "tanh")], &syms, a),
            2 => unary(&name, "ScalarMul", &[("scalar", "0.5")], &syms, a),
            3 => unary(&name, "ScalarAdd", &[("scalar", "1.0")], &syms, a),
            4 | 5 => {
                let op = if choice == 4 { "ElementwiseAdd" } else { "ElementwiseMul" };
                let s = Symbol::apply_named(Some(&name), op, &[], &[&syms[a].0, &syms[b].0]).unwrap();
                (s, sa.clone(), 0, vec![a, b])
            }
            6 if sa.dims()[1] == 4 => {
                let s = Symbol::apply_named(Some(&name), "MatMul", &[], &[&syms[a].0, &syms[b].0]).unwrap();
                let out = Shape::new([4, syms[b].1.dims()[1]]).unwrap();
                (s, out, 0, vec![a, b])
            }
            _ if nodes + 2 <= max_nodes => {
                let h = if rng.below(2) == 0 { "4" } else { "2" };
                let s = Symbol::apply_named(
                    Some(&name),
                    "FullyConnected",
                    &[("num_hidden", h), ("no_bias", "true")],
                    &[&syms[a].0],
                )
                .unwrap();
                let out = Shape::new([4, h.parse().unwrap()]).unwrap();
                (s, out, 1, vec![a])
            }
            _ => unary(&name, "ScalarMul", &[("scalar", "2.0")], &syms, a),
        };
        if nodes + 1 + extra > max_nodes {
            break;
        }
        nodes += 1 + extra;
        for i in ins {
            used[i] = true;
        }
        syms.push((sym, shape));
        used.push(false);
    }
    let mut outs: Vec<&Symbol> = Vec::new();
    for (i, (s, _)) in syms.iter().enumerate().skip(nvars) {
        if !used[i] || rng.below(5) == 0 {
            outs.push(s);
        }
    }
    if outs.is_empty() {
        outs.push(&syms.last().unwrap().0);
    }
    let g = Symbol::group(&outs).unwrap().to_graph();
    given.retain(|name, _| g.find_variable(name).is_some());
    (g, given)
}

fn unary(
    name: &str,
    op: &str,
    attrs: &[(&str, &str)],
    syms: &[(Symbol, Shape)],
    a: usize,
) -> (Symbol, Shape, usize, Vec<usize>) {
    let s = Symbol::apply_named(Some(name), op, attrs, &[&syms[a].0]).unwrap();
    (s, syms[a].1.clone(), 0, vec![a])
}

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;
pub const GRAD_SEEDS: u64 = 20;

pub type Args = BTreeMap<String, Vec<f64>>;

fn uniform(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect()
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = 0.1 + 0.9 * rng.next_f64();
            if rng.below(2) == 0 {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub struct GradCase {
    pub sym: Symbol,
    pub given: BTreeMap<String, Shape>,
    /// Variables to draw with `away_from_zero`.
    pub kinked: Vec<&'static str>,
}

/// Scalar objective: mean cross-entropy for loss heads, `sum(r * y)`
/// with fixed random `r` for every other head.
fn objective(g: &Graph, shapes: &ShapeMap, args: &Args, heads: &[Vec<f64>]) -> f64 {
    let outs = evaluate(g, shapes, args).unwrap();
    let mut total = 0.0;
    for (k, e) in g.outputs.iter().enumerate() {
        let node = &g.nodes[e.node];
        if node.op.is_loss() {
            let labels = &args["label"];
            let (rows, cols) = shapes.get(*e).flat2();
            for r in 0..rows {
                total -= Float::ln(outs[k][r * cols + labels[r] as usize]) / rows as f64;
            }
        } else {
            total += outs[k].iter().zip(&heads[k]).map(|(y, w)| y * w).sum::<f64>();
        }
    }
    total
}

/// Relative error `|a - n| / (|a| + |n|)` between the gradient graph's
/// output and central differences of the forward graph, over every
/// non-label argument.
pub fn grad_check(case: &GradCase, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let g = case.sym.to_graph();
    let shapes = g.infer_shapes(&case.given).unwrap();
    let mut args: Args = BTreeMap::new();
    for i in g.arguments() {
        let name = g.nodes[i].name.clone();
        let s = &shapes.shapes[i][0];
        let v = if name == "label" {
            let classes = g
                .nodes
                .iter()
                .find(|n| n.op.is_loss())
                .map(|n| shapes.get(n.inputs[0]).dims()[1])
                .unwrap();
            (0..s.num_elements()).map(|_| rng.below(classes as u64) as f64).collect()
        } else if case.kinked.contains(&name.as_str()) {
            away_from_zero(&mut rng, s.num_elements())
        } else {
            uniform(&mut rng, s.num_elements(), -1.0, 1.0)
        };
        args.insert(name, v);
    }
    let heads: Vec<Vec<f64>> = g
        .outputs
        .iter()
        .map(|e| uniform(&mut rng, shapes.get(*e).num_elements(), -1.0, 1.0))
        .collect();

    let wrt: Vec<String> = g.argument_names().into_iter().filter(|n| n != "label").collect();
    let wrt_refs: Vec<&str> = wrt.iter().map(String::as_str).collect();
    let gg = gradient(&case.sym, &wrt_refs).unwrap().to_graph();
    let mut gargs = args.clone();
    for (k, e) in g.outputs.iter().enumerate() {
        let node = &g.nodes[e.node];
        if !node.op.is_loss() {
            gargs.insert(head_grad_name(&node.name, e.index, node.op.num_outputs()), heads[k].clone());
        }
    }
    let gshapes = gg.infer_shapes(&case.given).unwrap();
    let analytic: Vec<f64> = evaluate(&gg, &gshapes, &gargs).unwrap()[g.outputs.len()..].concat();

    let mut numeric = Vec::with_capacity(analytic.len());
    for name in &wrt {
        for j in 0..args[name].len() {
            let mut plus = args.clone();
            plus.get_mut(name).unwrap()[j] += GRAD_STEP;
            let mut minus = args.clone();
            minus.get_mut(name).unwrap()[j] -= GRAD_STEP;
            let d = objective(&g, &shapes, &plus, &heads) - objective(&g, &shapes, &minus, &heads);
            numeric.push(d / (2.0 * GRAD_STEP));
        }
    }
    assert_eq!(analytic.len(), numeric.len());
    let diff = Float::sqrt(analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>());
    let na = Float::sqrt(analytic.iter().map(|a| a * a).sum::<f64>());
    let nn = Float::sqrt(numeric.iter().map(|a| a * a).sum::<f64>());
    diff / (na + nn).max(1e-300)
}

fn var(name: &str) -> Symbol {
    Symbol::variable(name).unwrap()
}

fn dims(rng: &mut SplitMix64) -> (usize, usize) {
    (1 + rng.below(4) as usize, 1 + rng.below(5) as usize)
}

pub fn given(pairs: &[(&str, &[usize])]) -> BTreeMap<String, Shape> {
    pairs.iter().map(|(n, d)| (n.to_string(), Shape::new(d.to_vec()).unwrap())).collect()
}

pub type CaseMaker = Box<dyn Fn(&mut SplitMix64) -> GradCase>;

/// One randomized case family per operator (and attribute variant), plus
/// the two-layer MLP with input dim 20, hidden 64, 10 classes, batch 4.
pub fn grad_cases() -> Vec<(String, CaseMaker)> {
    let mut out: Vec<(String, CaseMaker)> = Vec::new();
    out.push((
        "FullyConnected".into(),
        Box::new(|rng| {
            let (b, d) = dims(rng);
            let nh = (1 + rng.below(4)).to_string();
            let no_bias = if rng.below(2) == 0 { "true" } else { "false" };
            let sym = Symbol::apply("FullyConnected", &[("num_hidden", &nh), ("no_bias", no_bias)], &[&var("x")]).unwrap();
            GradCase { sym, given: given(&[("x", &[b, d])]), kinked: vec![] }
        }),
    ));
    out.push((
        "FullyConnected rank 3".into(),
        Box::new(|rng| {
            let (b, d) = dims(rng);
            let sym = Symbol::apply("FullyConnected", &[("num_hidden", "3")], &[&var("x")]).unwrap();
            GradCase { sym, given: given(&[("x", &[b, d, 2])]), kinked: vec![] }
        }),
    ));
    for act in ["relu", "sigmoid", "tanh"] {
        out.push((
            format!("Activation {act}"),
            Box::new(move |rng| {
                let (b, d) = dims(rng);
                let sym = Symbol::apply("Activation", &[("act_type", act)], &[&var("x")]).unwrap();
                GradCase { sym, given: given(&[("x", &[b, d])]), kinked: vec!["x"] }
            }),
        ));
    }
    out.push((
        "SoftmaxOutput".into(),
        Box::new(|rng| {
            let b = 1 + rng.below(5) as usize;
            let c = 2 + rng.below(4) as usize;
            let sym = Symbol::apply("SoftmaxOutput", &[], &[&var("x")]).unwrap();
            GradCase { sym, given: given(&[("x", &[b, c])]), kinked: vec![] }
        }),
    ));
    for op in ["ElementwiseAdd", "ElementwiseMul"] {
        out.push((
            op.into(),
            Box::new(move |rng| {
                let (b, d) = dims(rng);
                let sym = Symbol::apply(op, &[], &[&var("a"), &var("b")]).unwrap();
                GradCase { sym, given: given(&[("a", &[b, d]), ("b", &[b, d])]), kinked: vec![] }
            }),
        ));
    }
    for op in ["ScalarAdd", "ScalarMul"] {
        out.push((
            op.into(),
            Box::new(move |rng| {
                let (b, d) = dims(rng);
                let c = format!("{:?}", -2.0 + 4.0 * rng.next_f64());
                let sym = Symbol::apply(op, &[("scalar", &c)], &[&var("x")]).unwrap();
                GradCase { sym, given: given(&[("x", &[b, d])]), kinked: vec![] }
            }),
        ));
    }
    out.push((
        "MatMul".into(),
        Box::new(|rng| {
            let (m, k) = dims(rng);
            let n = 1 + rng.below(4) as usize;
            let sym = Symbol::apply("MatMul", &[], &[&var("a"), &var("b")]).unwrap();
            GradCase { sym, given: given(&[("a", &[m, k]), ("b", &[k, n])]), kinked: vec![] }
        }),
    ));
    out.push((
        "Flatten".into(),
        Box::new(|rng| {
            let (b, d) = dims(rng);
            let sym = Symbol::apply("Flatten", &[], &[&var("x")]).unwrap();
            GradCase { sym, given: given(&[("x", &[b, d, 3])]), kinked: vec![] }
        }),
    ));
    out.push((
        "x*x fan-out".into(),
        Box::new(|_| {
            let x = var("x");
            let sym = Symbol::apply("ElementwiseMul", &[], &[&x, &x]).unwrap();
            GradCase { sym, given: given(&[("x", &[3])]), kinked: vec![] }
        }),
    ));
    out.push((
        "MLP".into(),
        Box::new(|_| GradCase { sym: mlp(20, &[64], 10).unwrap(), given: given(&[("data", &[4, 20])]), kinked: vec![] }),
    ));
    out
}

/// Worst relative error of a case family over [`GRAD_SEEDS`] seeds.
pub fn worst_grad_error(make: &CaseMaker) -> f64 {
    (0..GRAD_SEEDS)
        .map(|seed| {
            let mut rng = SplitMix64::new(1000 + seed);
            grad_check(&make(&mut rng), seed)
        })
        .fold(0.0, f64::max)
}
