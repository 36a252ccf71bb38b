use std::collections::BTreeMap;

use proptest::prelude::*;
use tessel_core::autodiff::gradient;
use tessel_core::graph::{Entry, Graph, ShapeMap};
use tessel_core::models::mlp;
use tessel_core::planner::{fuse, plan_memory, prune, validate_plan, AllocationPlan, PlanStrategy, Violation};
use tessel_core::rng::SplitMix64;
use tessel_core::testkit::random_dag;
use tessel_core::{ElemType, Shape, Symbol};

fn shape(d: &[usize]) -> Shape {
    Shape::new(d.to_vec()).unwrap()
}

fn infer(g: &Graph, given: &[(&str, &[usize])]) -> ShapeMap {
    let map: BTreeMap<String, Shape> = given.iter().map(|(n, d)| (n.to_string(), shape(d))).collect();
    g.infer_shapes(&map).unwrap()
}

fn plan(g: &Graph, shapes: &ShapeMap, s: PlanStrategy) -> AllocationPlan {
    plan_memory(g, shapes, ElemType::F32, s)
}

fn chain(len: usize) -> Symbol {
    let mut s = Symbol::variable("x").unwrap();
    for i in 0..len {
        s = if i % 2 == 0 {
            Symbol::apply("Activation", &[("act_type", "sigmoid")], &[&s]).unwrap()
        } else {
            Symbol::apply("ScalarMul", &[("scalar", "3.0")], &[&s]).unwrap()
        };
    }
    s
}

/// Minimum slot count for a fixed serial order when no buffer may be
/// handed over inside one operator: the largest number of simultaneously
/// live internal entries.
fn max_live_internal(g: &Graph) -> usize {
    let consumers = g.consumers();
    let requested: Vec<Entry> = g.outputs.clone();
    let mut intervals = Vec::new();
    for (i, n) in g.nodes.iter().enumerate() {
        for o in 0..n.op.num_outputs() {
            let e = Entry { node: i, index: o };
            if n.is_variable() || requested.contains(&e) {
                continue;
            }
            let last = consumers[i][o].iter().copied().max().unwrap_or(i);
            intervals.push((i, last));
        }
    }
    (0..g.nodes.len())
        .map(|t| intervals.iter().filter(|(a, b)| *a <= t && t <= *b).count())
        .max()
        .unwrap_or(0)
}

#[test]
fn nine_node_chain_needs_at_most_two_slots() {
    let g = chain(9).to_graph();
    let shapes = infer(&g, &[("x", &[16, 16])]);
    let none = plan(&g, &shapes, PlanStrategy::None);
    assert_eq!(none.num_internal_slots(), 8);
    assert_eq!(none.total_internal_bytes, 8 * 16 * 16 * 4);
    assert_eq!(max_live_internal(&g), 2);
    let coshare = plan(&g, &shapes, PlanStrategy::Coshare);
    assert_eq!(coshare.num_internal_slots(), 2);
    let both = plan(&g, &shapes, PlanStrategy::Both);
    // In-place handoffs go below the no-handoff optimum.
    assert_eq!(both.num_internal_slots(), 1);
    assert!(both.total_internal_bytes * 4 <= none.total_internal_bytes);
    for p in [&none, &coshare, &both] {
        validate_plan(&g, &shapes, p, 0).unwrap();
    }
}

#[test]
fn single_op_and_chain_accounting() {
    let g = chain(1).to_graph();
    let shapes = infer(&g, &[("x", &[3])]);
    for s in PlanStrategy::ALL {
        assert_eq!(plan(&g, &shapes, s).total_internal_bytes, 0);
    }
    for k in 2..7 {
        let g = chain(k).to_graph();
        let shapes = infer(&g, &[("x", &[5, 2])]);
        assert_eq!(plan(&g, &shapes, PlanStrategy::None).total_internal_bytes, (k - 1) * 40);
    }
}

#[test]
fn diamond_branches_are_serialized_and_valid() {
    let a0 = Symbol::variable("a").unwrap();
    let a = Symbol::apply_named(Some("a1"), "ScalarMul", &[("scalar", "2.0")], &[&a0]).unwrap();
    let b = Symbol::apply_named(Some("b"), "Activation", &[("act_type", "tanh")], &[&a]).unwrap();
    let c = Symbol::apply_named(Some("c"), "Activation", &[("act_type", "sigmoid")], &[&a]).unwrap();
    let d = Symbol::apply_named(Some("d"), "ElementwiseAdd", &[], &[&b, &c]).unwrap();
    let e = Symbol::apply("ScalarAdd", &[("scalar", "1.0")], &[&d]).unwrap();
    let f = Symbol::apply("Activation", &[("act_type", "relu")], &[&e]).unwrap();
    let g = f.to_graph();
    let shapes = infer(&g, &[("a", &[4, 4])]);
    let idx = |name: &str| g.nodes.iter().position(|n| n.name == name).unwrap();
    let (ib, ic, id) = (idx("b"), idx("c"), idx("d"));
    for s in PlanStrategy::ALL {
        let p = plan(&g, &shapes, s);
        validate_plan(&g, &shapes, &p, 0).unwrap();
        // b and c are both read by d, so they can never share.
        assert_ne!(p.slot(Entry { node: ib, index: 0 }), p.slot(Entry { node: ic, index: 0 }));
    }
    let p = plan(&g, &shapes, PlanStrategy::Coshare);
    // d's output takes the buffer freed by a once both branches finished.
    let a_slot = p.slot(Entry { node: idx("a1"), index: 0 });
    assert_eq!(p.slot(Entry { node: id, index: 0 }), a_slot);
    assert!(p.extra_dep_edges.iter().all(|&(_, to)| to >= id));
}

fn mlp_graphs() -> (Graph, Graph, ShapeMap, ShapeMap) {
    let net = mlp(64, &[64; 7], 10).unwrap();
    let params: Vec<String> = net
        .list_arguments()
        .into_iter()
        .filter(|a| a.ends_with("_weight") || a.ends_with("_bias"))
        .collect();
    let wrt: Vec<&str> = params.iter().map(String::as_str).collect();
    let train = gradient(&net, &wrt).unwrap().to_graph();
    let fwd = net.to_graph();
    let st = infer(&train, &[("data", &[64, 64])]);
    let sf = infer(&fwd, &[("data", &[64, 64])]);
    (train, fwd, st, sf)
}

#[test]
fn eight_layer_mlp_reductions() {
    let (train, fwd, st, sf) = mlp_graphs();
    let ratio = |g: &Graph, s: &ShapeMap| {
        let none = plan(g, s, PlanStrategy::None).total_internal_bytes as f64;
        plan(g, s, PlanStrategy::Both).total_internal_bytes as f64 / none
    };
    assert!(ratio(&train, &st) <= 0.5, "{}", ratio(&train, &st));
    assert!(ratio(&fwd, &sf) <= 0.25, "{}", ratio(&fwd, &sf));
    for s in PlanStrategy::ALL {
        validate_plan(&train, &st, &plan(&train, &st, s), 1).unwrap();
    }
}

fn assert_monotone(g: &Graph, shapes: &ShapeMap) {
    let b: Vec<usize> = PlanStrategy::ALL.iter().map(|&s| plan(g, shapes, s).total_internal_bytes).collect();
    let (none, inplace, coshare, both) = (b[0], b[1], b[2], b[3]);
    assert!(none >= inplace && inplace >= both, "{b:?}");
    assert!(none >= coshare && coshare >= both, "{b:?}");
}

#[test]
fn mlp_strategies_are_monotone() {
    let (train, fwd, st, sf) = mlp_graphs();
    assert_monotone(&train, &st);
    assert_monotone(&fwd, &sf);
}

fn linear_bound(g: &Graph, p: &AllocationPlan) {
    let size = g.nodes.len() + g.num_edges();
    assert!(p.visits <= 8 * size, "visits {} for size {size}", p.visits);
}

#[test]
fn planner_work_is_linear() {
    let (train, fwd, st, sf) = mlp_graphs();
    for s in PlanStrategy::ALL {
        linear_bound(&train, &plan(&train, &st, s));
        linear_bound(&fwd, &plan(&fwd, &sf, s));
    }
    for len in [10, 100, 1000] {
        let g = chain(len).to_graph();
        let shapes = infer(&g, &[("x", &[2])]);
        for s in PlanStrategy::ALL {
            linear_bound(&g, &plan(&g, &shapes, s));
        }
    }
}

#[test]
fn colliding_plan_names_both_nodes() {
    let g = chain(3).to_graph();
    let shapes = infer(&g, &[("x", &[2])]);
    let mut p = plan(&g, &shapes, PlanStrategy::None);
    // act1 is read by mulscalar1, whose output now lands on the same slot.
    p.slot_of[2][0] = p.slot_of[1][0];
    match validate_plan(&g, &shapes, &p, 0) {
        Err(Violation::Collision { first, second, .. }) => {
            assert_eq!((first.as_str(), second.as_str()), ("act1", "mulscalar1"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn cyclic_extra_edges_are_rejected() {
    let g = chain(3).to_graph();
    let shapes = infer(&g, &[("x", &[2])]);
    let mut p = plan(&g, &shapes, PlanStrategy::None);
    p.extra_dep_edges.push((3, 1));
    assert!(matches!(validate_plan(&g, &shapes, &p, 0), Err(Violation::Cycle(_))));
}

#[test]
fn unrecorded_inplace_handoff_is_a_collision() {
    let g = chain(3).to_graph();
    let shapes = infer(&g, &[("x", &[2])]);
    let mut p = plan(&g, &shapes, PlanStrategy::Inplace);
    assert!(!p.inplace.is_empty());
    p.inplace.clear();
    assert!(matches!(validate_plan(&g, &shapes, &p, 0), Err(Violation::Collision { .. })));
}

#[test]
fn dump_lists_every_entry() {
    let g = chain(3).to_graph();
    let shapes = infer(&g, &[("x", &[2])]);
    let text = plan(&g, &shapes, PlanStrategy::Both).dump(&g);
    assert_eq!(text.lines().count(), 1 + g.nodes.len() + 1);
    assert!(text.contains("act1\t0\t"));
}

fn dag(seed: u64, max_nodes: usize) -> (Graph, ShapeMap) {
    let mut rng = SplitMix64::new(seed);
    let (g, given) = random_dag(&mut rng, max_nodes);
    let shapes = g.infer_shapes(&given).unwrap();
    (g, shapes)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn random_dag_plans_are_valid_and_monotone(seed in any::<u64>()) {
        let (g, shapes) = dag(seed, 12);
        for s in PlanStrategy::ALL {
            let p = plan(&g, &shapes, s);
            prop_assert!(validate_plan(&g, &shapes, &p, seed).is_ok(), "{s:?}: {:?}", validate_plan(&g, &shapes, &p, seed));
            linear_bound(&g, &p);
        }
        assert_monotone(&g, &shapes);
    }

    #[test]
    fn prune_is_idempotent(seed in any::<u64>(), pick in any::<u64>()) {
        let (g, _) = dag(seed, 12);
        let e = g.outputs[(pick % g.outputs.len() as u64) as usize];
        let once = prune(&g, &[e]).unwrap();
        prop_assert_eq!(prune(&once, &once.outputs).unwrap(), once.clone());
        once.validate().unwrap();
    }

    #[test]
    fn fused_graphs_stay_valid_and_plannable(seed in any::<u64>()) {
        let (g, shapes) = dag(seed, 12);
        let f = fuse(&g);
        f.validate().unwrap();
        prop_assert_eq!(f.outputs.len(), g.outputs.len());
        let given: BTreeMap<String, Shape> = g
            .arguments()
            .into_iter()
            .filter(|&i| !g.nodes[i].name.contains("weight"))
            .map(|i| (g.nodes[i].name.clone(), shapes.shapes[i][0].clone()))
            .collect();
        let fs = f.infer_shapes(&given).unwrap();
        for (a, b) in g.outputs.iter().zip(&f.outputs) {
            prop_assert_eq!(shapes.get(*a), fs.get(*b));
        }
        for s in PlanStrategy::ALL {
            let p = plan(&f, &fs, s);
            prop_assert!(validate_plan(&f, &fs, &p, seed).is_ok());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradient_graph_plans_are_valid(seed in any::<u64>()) {
        let (g, shapes) = dag(seed, 9);
        let sym = Symbol::from_graph(&g);
        let wrt: Vec<String> = g.argument_names();
        let wrt: Vec<&str> = wrt.iter().map(String::as_str).collect();
        let gg = gradient(&sym, &wrt).unwrap().to_graph();
        let given: BTreeMap<String, Shape> = g
            .arguments()
            .into_iter()
            .map(|i| (g.nodes[i].name.clone(), shapes.shapes[i][0].clone()))
            .collect();
        let gs = gg.infer_shapes(&given).unwrap();
        for s in PlanStrategy::ALL {
            let p = plan(&gg, &gs, s);
            prop_assert!(validate_plan(&gg, &gs, &p, seed).is_ok(), "{s:?}: {:?}", validate_plan(&gg, &gs, &p, seed));
        }
        assert_monotone(&gg, &gs);
    }
}
