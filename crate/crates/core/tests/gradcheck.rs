//! Central-difference checks of every operator's gradient in f64.

use std::collections::BTreeMap;

use tessel_core::autodiff::gradient;
use tessel_core::interp::evaluate;
use tessel_core::ops::PUBLIC_OPERATORS;
use tessel_core::testkit::{given, grad_cases, worst_grad_error, Args, GRAD_TOL};
use tessel_core::{OpKind, Symbol};

fn var(name: &str) -> Symbol {
    Symbol::variable(name).unwrap()
}

fn run(label: &str) {
    let cases = grad_cases();
    let (_, make) = cases.iter().find(|(l, _)| l == label).unwrap();
    let err = worst_grad_error(make);
    assert!(err < GRAD_TOL, "{label}: relative error {err:e}");
}

#[test]
fn every_public_operator_has_a_case() {
    let labels: Vec<String> = grad_cases().into_iter().map(|(l, _)| l).collect();
    for op in PUBLIC_OPERATORS {
        assert!(labels.iter().any(|l| l.starts_with(op)), "{op}");
    }
}

#[test]
fn fully_connected() {
    run("FullyConnected");
    run("FullyConnected rank 3");
}

#[test]
fn activations() {
    for act in ["relu", "sigmoid", "tanh"] {
        run(&format!("Activation {act}"));
    }
}

#[test]
fn softmax_cross_entropy() {
    run("SoftmaxOutput");
}

#[test]
fn elementwise_and_scalar() {
    for op in ["ElementwiseAdd", "ElementwiseMul", "ScalarAdd", "ScalarMul"] {
        run(op);
    }
}

#[test]
fn matmul_and_flatten() {
    run("MatMul");
    run("Flatten");
}

#[test]
fn two_layer_mlp() {
    run("MLP");
}

#[test]
fn square_fan_out_is_twice_x() {
    let x = var("x");
    let sq = Symbol::apply("ElementwiseMul", &[], &[&x, &x]).unwrap();
    let gg = gradient(&sq, &["x"]).unwrap().to_graph();
    let given = given(&[("x", &[3])]);
    let shapes = gg.infer_shapes(&given).unwrap();
    let mut args: Args = BTreeMap::new();
    args.insert("x".into(), vec![1.5, -2.0, 0.25]);
    args.insert("mul1_head_grad".into(), vec![1.0; 3]);
    let out = evaluate(&gg, &shapes, &args).unwrap();
    assert_eq!(out[1], vec![3.0, -4.0, 0.5]);
    run("x*x fan-out");
}

#[test]
fn duplicated_path_doubles_the_gradient() {
    let x = var("x");
    let t = Symbol::apply("Activation", &[("act_type", "tanh")], &[&x]).unwrap();
    let twice = Symbol::apply("ElementwiseAdd", &[], &[&t, &t]).unwrap();
    let given = given(&[("x", &[4])]);
    let mut args: Args = BTreeMap::new();
    args.insert("x".into(), vec![0.3, -0.7, 1.1, 0.0]);
    let grad_of = |sym: &Symbol, head: &str| {
        let gg = gradient(sym, &["x"]).unwrap().to_graph();
        let shapes = gg.infer_shapes(&given).unwrap();
        let mut a = args.clone();
        a.insert(head.into(), vec![1.0; 4]);
        evaluate(&gg, &shapes, &a).unwrap()[1].clone()
    };
    let single = grad_of(&t, "act1_head_grad");
    let double = grad_of(&twice, "add1_head_grad");
    for (s, d) in single.iter().zip(&double) {
        assert_eq!(2.0 * s, *d);
    }
}

#[test]
fn unreachable_argument_gradient_is_zero() {
    let x = var("x");
    let y = Symbol::apply("Activation", &[("act_type", "sigmoid")], &[&x]).unwrap();
    let s = Symbol::apply("SoftmaxOutput", &[], &[&y]).unwrap();
    let gg = gradient(&s, &["label"]).unwrap().to_graph();
    assert!(matches!(gg.nodes[gg.outputs[1].node].op, OpKind::ZerosLike));
    let shapes = gg.infer_shapes(&given(&[("x", &[2, 3])])).unwrap();
    let mut args: Args = BTreeMap::new();
    args.insert("x".into(), vec![0.1; 6]);
    args.insert("label".into(), vec![0.0, 2.0]);
    assert_eq!(evaluate(&gg, &shapes, &args).unwrap()[1], vec![0.0, 0.0]);
}
