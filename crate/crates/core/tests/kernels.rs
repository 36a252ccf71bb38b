use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

use proptest::prelude::*;
use tessel_core::ops::kernels::{self, softmax_rows};
use tessel_core::{serialize, ActType, OpKind, Shape, Symbol};

struct Counting;

thread_local! {
    static ALLOCS: Cell<usize> = const { Cell::new(0) };
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let _ = ALLOCS.try_with(|c| c.set(c.get() + 1));
        System.alloc(layout)
    }
    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

fn allocations_during(f: impl FnOnce()) -> usize {
    let before = ALLOCS.with(Cell::get);
    f();
    ALLOCS.with(Cell::get) - before
}

fn s(d: &[usize]) -> Shape {
    Shape::new(d.to_vec()).unwrap()
}

#[test]
fn kernels_do_not_allocate() {
    let x = vec![0.5f32; 8 * 16];
    let w = vec![0.25f32; 4 * 16];
    let b = vec![1.0f32; 4];
    let dy = vec![1.0f32; 8 * 4];
    let mut y = vec![0.0f32; 8 * 4];
    let mut dx = vec![0.0f32; 8 * 16];
    let mut dw = vec![0.0f32; 4 * 16];
    let mut db = vec![0.0f32; 4];
    let fc = OpKind::FullyConnected { num_hidden: 4, no_bias: false };
    let fc_back = OpKind::Backward(Box::new(fc.clone()));
    let relu = OpKind::Activation(ActType::Relu);
    let shapes = [s(&[8, 16]), s(&[4, 16]), s(&[4])];
    let back_shapes = [s(&[8, 4]), s(&[8, 16]), s(&[4, 16])];
    let y_shape = [s(&[8, 4])];
    let n = allocations_during(|| {
        kernels::run(&fc, &[&x, &w, &b], &shapes, &mut [&mut y]).unwrap();
        kernels::run(&fc_back, &[&dy, &x, &w], &back_shapes, &mut [&mut dx, &mut dw, &mut db]).unwrap();
        let mut z = [0.0f32; 32];
        kernels::run(&relu, &[&y], &y_shape, &mut [&mut z]).unwrap();
        let mut p = [0.0f32; 32];
        softmax_rows(&z, &mut p, 8, 4);
    });
    assert_eq!(n, 0);
}

#[test]
fn perfect_prediction_has_near_zero_cross_entropy() {
    let logits = [60.0f64, 0.0, 0.0, 0.0, 60.0, 0.0];
    let mut p = [0.0; 6];
    softmax_rows(&logits, &mut p, 2, 3);
    let ce = -(p[0].ln() + p[4].ln()) / 2.0;
    assert!((0.0..1e-20).contains(&ce), "{ce}");
}

#[test]
fn composing_leaves_existing_symbols_unchanged() {
    let x = Symbol::variable("x").unwrap();
    let h = Symbol::apply("FullyConnected", &[("num_hidden", "8")], &[&x]).unwrap();
    let before = serialize::save(&h);
    let a = Symbol::apply("Activation", &[("act_type", "tanh")], &[&h]).unwrap();
    let _ = Symbol::group(&[&a, &h]).unwrap();
    let _ = tessel_core::autodiff::gradient(&a, &["x"]).unwrap();
    assert_eq!(serialize::save(&h), before);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        let mut rng = tessel_core::rng::SplitMix64::new(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| scale * (2.0 * rng.next_f64() - 1.0)).collect();
        let mut p = vec![0.0; rows * cols];
        softmax_rows(&x, &mut p, rows, cols);
        for r in 0..rows {
            let row = &p[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut p32 = vec![0.0f32; rows * cols];
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        softmax_rows(&x32, &mut p32, rows, cols);
        for r in 0..rows {
            let sum: f32 = p32[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(cols in 1usize..9, seed in any::<u64>(), shift in -100.0f64..100.0) {
        let mut rng = tessel_core::rng::SplitMix64::new(seed);
        let x: Vec<f64> = (0..cols).map(|_| 4.0 * rng.next_f64()).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let (mut a, mut b) = (vec![0.0; cols], vec![0.0; cols]);
        softmax_rows(&x, &mut a, 1, cols);
        softmax_rows(&shifted, &mut b, 1, cols);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}
