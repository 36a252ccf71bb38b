//! Pairwise summation with a fixed reduction tree.
//!
//! Terms are merged like a binary counter: leaf `i` is pushed at level 0 and
//! equal-level neighbours are combined left-to-right. For a power-of-two term
//! count this is the perfect binary tree, so the sum over `2^k` terms equals
//! the pairwise sum of the pairwise sums of its aligned halves. Data-parallel
//! gradient aggregation relies on that identity to reproduce large-batch
//! gradients bit for bit.

use num_traits::Float;

const MAX_DEPTH: usize = 64;

/// Pairwise sum of `n` terms produced by `term(i)`. Returns zero for `n == 0`.
pub fn pairwise_sum<T: Float>(n: usize, mut term: impl FnMut(usize) -> T) -> T {
    let mut stack = [(T::zero(), 0u32); MAX_DEPTH];
    let mut top = 0usize;
    for i in 0..n {
        let mut value = term(i);
        let mut level = 0u32;
        while top > 0 && stack[top - 1].1 == level {
            top -= 1;
            value = stack[top].0 + value;
            level += 1;
        }
        stack[top] = (value, level);
        top += 1;
    }
    if top == 0 {
        return T::zero();
    }
    top -= 1;
    let mut acc = stack[top].0;
    while top > 0 {
        top -= 1;
        acc = stack[top].0 + acc;
    }
    acc
}
