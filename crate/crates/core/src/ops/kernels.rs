//! CPU kernels. None of them allocate; batch reductions use
//! [`pairwise_sum`](crate::reduce::pairwise_sum).

use crate::error::KernelError;
use crate::ops::{ActType, OpKind};
use crate::reduce::pairwise_sum;
use crate::shape::{Element, Shape};

/// Element `k` of a pointwise operator given element `k` of each input.
///
/// # Panics
/// If `op` is not pointwise.
#[inline]
pub fn pointwise<T: Element>(op: &OpKind, x: impl Fn(usize) -> T) -> T {
    match op {
        OpKind::Activation(t) => activate(*t, x(0)),
        OpKind::ElementwiseAdd => x(0) + x(1),
        OpKind::ElementwiseMul => x(0) * x(1),
        OpKind::ScalarAdd(c) => x(0) + T::from_f64(*c),
        OpKind::ScalarMul(c) => x(0) * T::from_f64(*c),
        OpKind::Flatten => x(0),
        OpKind::ElementwiseSum(n) => {
            let mut acc = x(0);
            for i in 1..*n {
                acc = acc + x(i);
            }
            acc
        }
        OpKind::ZerosLike => T::zero(),
        OpKind::Fused(p) => p.eval(x),
        OpKind::Backward(fwd) => match **fwd {
            // inputs: [dy, y]
            OpKind::Activation(t) => activate_grad(t, x(0), x(1)),
            OpKind::ScalarMul(c) => x(0) * T::from_f64(c),
            OpKind::ScalarAdd(_) | OpKind::Flatten => x(0),
            _ => unreachable!("not pointwise: {}", op.name()),
        },
        _ => unreachable!("not pointwise: {}", op.name()),
    }
}

#[inline]
fn activate<T: Element>(t: ActType, v: T) -> T {
    match t {
        ActType::Relu => {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        }
        ActType::Sigmoid => T::one() / (T::one() + (-v).exp()),
        ActType::Tanh => v.tanh(),
    }
}

#[inline]
fn activate_grad<T: Element>(t: ActType, dy: T, y: T) -> T {
    match t {
        ActType::Relu => {
            if y > T::zero() {
                dy
            } else {
                T::zero()
            }
        }
        ActType::Sigmoid => dy * (y * (T::one() - y)),
        ActType::Tanh => dy * (T::one() - y * y),
    }
}

/// Runs `op` over non-aliased buffers. For gradient operators `ins` follows
/// the operator's [`BackwardLayout`](crate::ops::BackwardLayout).
pub fn run<T: Element>(
    op: &OpKind,
    ins: &[&[T]],
    in_shapes: &[Shape],
    outs: &mut [&mut [T]],
) -> Result<(), KernelError> {
    if op.is_pointwise() {
        let out = &mut *outs[0];
        for (k, o) in out.iter_mut().enumerate() {
            *o = pointwise(op, |j| ins[j][k]);
        }
        return Ok(());
    }
    match op {
        OpKind::FullyConnected { num_hidden, no_bias } => {
            let (batch, in_dim) = in_shapes[0].flat2();
            let bias = if *no_bias { None } else { Some(ins[2]) };
            fc_forward(ins[0], ins[1], bias, outs[0], batch, in_dim, *num_hidden);
            Ok(())
        }
        OpKind::SoftmaxOutput => {
            let (rows, cols) = in_shapes[0].flat2();
            softmax_rows(ins[0], outs[0], rows, cols);
            Ok(())
        }
        OpKind::MatMul => {
            let (m, k) = (in_shapes[0].dims()[0], in_shapes[0].dims()[1]);
            let n = in_shapes[1].dims()[1];
            matmul(ins[0], ins[1], outs[0], m, k, n);
            Ok(())
        }
        OpKind::Backward(fwd) => run_backward(fwd, ins, in_shapes, outs),
        _ => Err(KernelError::Unsupported(op.name().into())),
    }
}

fn run_backward<T: Element>(
    fwd: &OpKind,
    ins: &[&[T]],
    in_shapes: &[Shape],
    outs: &mut [&mut [T]],
) -> Result<(), KernelError> {
    match fwd {
        OpKind::FullyConnected { num_hidden, no_bias } => {
            // ins: [dy, x, w]; outs: [dx, dw, (db)]
            let (batch, in_dim) = in_shapes[1].flat2();
            let (dy, x, w) = (ins[0], ins[1], ins[2]);
            let h = *num_hidden;
            let (dx, rest) = outs.split_at_mut(1);
            for b in 0..batch {
                for d in 0..in_dim {
                    let mut acc = T::zero();
                    for j in 0..h {
                        acc = acc + dy[b * h + j] * w[j * in_dim + d];
                    }
                    dx[0][b * in_dim + d] = acc;
                }
            }
            for j in 0..h {
                for d in 0..in_dim {
                    rest[0][j * in_dim + d] =
                        pairwise_sum(batch, |b| dy[b * h + j] * x[b * in_dim + d]);
                }
            }
            if !no_bias {
                for j in 0..h {
                    rest[1][j] = pairwise_sum(batch, |b| dy[b * h + j]);
                }
            }
            Ok(())
        }
        OpKind::SoftmaxOutput => {
            // ins: [label, prob]; outs: [dx, dlabel]
            let (label, prob) = (ins[0], ins[1]);
            let (rows, cols) = in_shapes[1].flat2();
            let scale = T::from_f64(rows as f64);
            for r in 0..rows {
                let l = label[r].as_f64();
                let li = l as i64;
                if l != li as f64 || li < 0 || li as usize >= cols {
                    return Err(KernelError::LabelOutOfRange { label: li, classes: cols, row: r });
                }
                for c in 0..cols {
                    let p = prob[r * cols + c];
                    let g = if c == li as usize { p - T::one() } else { p };
                    outs[0][r * cols + c] = g / scale;
                }
            }
            outs[1].iter_mut().for_each(|v| *v = T::zero());
            Ok(())
        }
        OpKind::ElementwiseAdd => {
            outs[0].copy_from_slice(ins[0]);
            outs[1].copy_from_slice(ins[0]);
            Ok(())
        }
        OpKind::ElementwiseMul => {
            // ins: [dy, a, b]
            let (dy, a, b) = (ins[0], ins[1], ins[2]);
            for k in 0..dy.len() {
                outs[0][k] = dy[k] * b[k];
                outs[1][k] = dy[k] * a[k];
            }
            Ok(())
        }
        OpKind::ElementwiseSum(_) => {
            for o in outs.iter_mut() {
                o.copy_from_slice(ins[0]);
            }
            Ok(())
        }
        OpKind::MatMul => {
            // ins: [dc, a, b]; dA = dC B^T, dB = A^T dC
            let (dc, a, b) = (ins[0], ins[1], ins[2]);
            let (m, k) = (in_shapes[1].dims()[0], in_shapes[1].dims()[1]);
            let n = in_shapes[2].dims()[1];
            let (da, db) = outs.split_at_mut(1);
            for i in 0..m {
                for p in 0..k {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc = acc + dc[i * n + j] * b[p * n + j];
                    }
                    da[0][i * k + p] = acc;
                }
            }
            for p in 0..k {
                for j in 0..n {
                    db[0][p * n + j] = pairwise_sum(m, |i| a[i * k + p] * dc[i * n + j]);
                }
            }
            Ok(())
        }
        _ => Err(KernelError::Unsupported(fwd.name().into())),
    }
}

/// `out[b, h] = sum_d x[b, d] * w[h, d] + bias[h]`.
pub fn fc_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
    batch: usize,
    in_dim: usize,
    hidden: usize,
) {
    for b in 0..batch {
        let row = &x[b * in_dim..(b + 1) * in_dim];
        for h in 0..hidden {
            let wr = &w[h * in_dim..(h + 1) * in_dim];
            let mut acc = T::zero();
            for d in 0..in_dim {
                acc = acc + row[d] * wr[d];
            }
            out[b * hidden + h] = match bias {
                Some(bv) => acc + bv[h],
                None => acc,
            };
        }
    }
}

/// Row-major `out[m, n] = sum_k a[m, k] * b[k, n]`, summed in `k` order.
pub fn matmul<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

pub fn softmax_rows<T: Element>(x: &[T], out: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut max = xr[0];
        for &v in &xr[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for c in 0..cols {
            let e = (xr[c] - max).exp();
            or[c] = e;
            sum = sum + e;
        }
        for v in or.iter_mut() {
            *v = *v / sum;
        }
    }
}
