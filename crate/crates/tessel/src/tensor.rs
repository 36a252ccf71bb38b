//! Imperative tensors. Every operation is pushed to the engine and returns
//! immediately; [`Tensor::to_host`] is the synchronization point.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use tessel_core::sgd;
use tessel_core::{DataVec, ElemType, Element, Shape, ShapeError};

use crate::engine::{Engine, EngineError, Tag};

static BUFFERS_ALLOCATED: AtomicUsize = AtomicUsize::new(0);

/// Number of tensor buffers allocated by this process so far.
pub fn buffers_allocated() -> usize {
    BUFFERS_ALLOCATED.load(Ordering::Relaxed)
}

/// A fixed-size buffer. Access goes through the raw pointer captured at
/// creation and is serialized by the engine tag of the owning tensor.
pub(crate) struct Storage {
    _data: DataVec,
    ptr: *mut u8,
    len: usize,
    etype: ElemType,
}

// SAFETY: the buffer is only touched inside engine operations, which hold
// read or write access to the owning tag.
unsafe impl Send for Storage {}
unsafe impl Sync for Storage {}

impl Storage {
    pub(crate) fn new(mut data: DataVec) -> Arc<Storage> {
        BUFFERS_ALLOCATED.fetch_add(1, Ordering::Relaxed);
        let (ptr, len) = match &mut data {
            DataVec::F32(v) => (v.as_mut_ptr() as *mut u8, v.len()),
            DataVec::F64(v) => (v.as_mut_ptr() as *mut u8, v.len()),
        };
        let etype = data.etype();
        Arc::new(Storage { _data: data, ptr, len, etype })
    }

    pub(crate) fn ptr<T: Element>(&self) -> *mut T {
        assert_eq!(T::ETYPE, self.etype);
        self.ptr as *mut T
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    /// # Safety
    /// The caller must hold at least read access to the owning tag.
    pub(crate) unsafe fn slice<T: Element>(&self) -> &[T] {
        std::slice::from_raw_parts(self.ptr::<T>(), self.len)
    }

    /// # Safety
    /// The caller must hold write access to the owning tag, and no other
    /// reference into this buffer may be live.
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn slice_mut<T: Element>(&self) -> &mut [T] {
        std::slice::from_raw_parts_mut(self.ptr::<T>(), self.len)
    }

    /// # Safety
    /// As for [`slice`](Self::slice).
    pub(crate) unsafe fn copy_out(&self) -> DataVec {
        match self.etype {
            ElemType::F32 => DataVec::F32(self.slice::<f32>().to_vec()),
            ElemType::F64 => DataVec::F64(self.slice::<f64>().to_vec()),
        }
    }

    /// Overwrites the buffer with `src`; false on a type or length mismatch.
    ///
    /// # Safety
    /// As for [`slice_mut`](Self::slice_mut).
    pub(crate) unsafe fn copy_in(&self, src: &DataVec) -> bool {
        if src.len() != self.len {
            return false;
        }
        match (self.etype, src) {
            (ElemType::F32, DataVec::F32(v)) => self.slice_mut::<f32>().copy_from_slice(v),
            (ElemType::F64, DataVec::F64(v)) => self.slice_mut::<f64>().copy_from_slice(v),
            _ => return false,
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
    #[error("element type mismatch: {0} vs {1}")]
    TypeMismatch(&'static str, &'static str),
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("matmul needs (m,k) @ (k,n) -> (m,n), got {0} @ {1} -> {2}")]
    MatmulDims(Shape, Shape, Shape),
    #[error("matmul output must not alias an input")]
    Alias,
    #[error("tensor has been released")]
    Released,
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

struct Inner {
    shape: Shape,
    tag: Tag,
    storage: Arc<Storage>,
    engine: Arc<Engine>,
    device: usize,
    released: AtomicBool,
}

impl Drop for Inner {
    fn drop(&mut self) {
        if !self.released.swap(true, Ordering::SeqCst) {
            let storage = self.storage.clone();
            let _ = self.engine.push_delete_with(self.tag, move || drop(storage));
        }
    }
}

/// Handle to a dense row-major array. Clones share the same buffer and tag.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}, {}, tag {})", self.inner.shape, self.etype().name(), self.inner.tag.id())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarOp {
    Add,
    Mul,
}

/// Raw pointer that may cross into an engine closure.
#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}

impl Tensor {
    /// Wraps `data` in a new buffer with a fresh tag; no operation is pushed.
    pub fn from_data(engine: &Arc<Engine>, shape: Shape, data: DataVec, label: &str) -> Result<Tensor, TensorError> {
        if data.len() != shape.num_elements() {
            return Err(TensorError::Length { expected: shape.num_elements(), got: data.len() });
        }
        let tag = engine.new_tag(label);
        Ok(Tensor {
            inner: Arc::new(Inner {
                shape,
                tag,
                storage: Storage::new(data),
                engine: engine.clone(),
                device: 0,
                released: AtomicBool::new(false),
            }),
        })
    }

    pub fn zeros(engine: &Arc<Engine>, shape: Shape, etype: ElemType) -> Tensor {
        let n = shape.num_elements();
        Tensor::from_data(engine, shape, DataVec::zeros(etype, n), "tensor").expect("length matches")
    }

    pub fn ones(engine: &Arc<Engine>, shape: Shape, etype: ElemType) -> Tensor {
        Tensor::full(engine, shape, etype, 1.0)
    }

    /// Buffer whose fill with `value` is scheduled on the engine.
    pub fn full(engine: &Arc<Engine>, shape: Shape, etype: ElemType, value: f64) -> Tensor {
        let t = Tensor::zeros(engine, shape, etype);
        let s = t.inner.storage.clone();
        t.schedule("fill", &[], move || {
            match s.etype {
                ElemType::F32 => unsafe { s.slice_mut::<f32>() }.fill(value as f32),
                ElemType::F64 => unsafe { s.slice_mut::<f64>() }.fill(value),
            }
            Ok(())
        })
        .expect("fresh tag is live");
        t
    }

    /// Schedules a copy of `values` (converted to `etype`) into a new tensor.
    pub fn from_host(engine: &Arc<Engine>, shape: Shape, etype: ElemType, values: &[f64]) -> Result<Tensor, TensorError> {
        if values.len() != shape.num_elements() {
            return Err(TensorError::Length { expected: shape.num_elements(), got: values.len() });
        }
        let t = Tensor::zeros(engine, shape, etype);
        let src = DataVec::from_f64(etype, values);
        let s = t.inner.storage.clone();
        t.schedule("from_host", &[], move || {
            write_data(&s, &src);
            Ok(())
        })?;
        Ok(t)
    }

    /// Like [`from_host`](Self::from_host) without conversion.
    pub fn from_vec<T: IntoData>(engine: &Arc<Engine>, shape: Shape, values: Vec<T>) -> Result<Tensor, TensorError> {
        let data = T::to_data(values);
        let etype = data.etype();
        let n = shape.num_elements();
        if data.len() != n {
            return Err(TensorError::Length { expected: n, got: data.len() });
        }
        let t = Tensor::zeros(engine, shape, etype);
        let s = t.inner.storage.clone();
        t.schedule("from_host", &[], move || {
            write_data(&s, &data);
            Ok(())
        })?;
        Ok(t)
    }

    /// Schedules overwriting this tensor with `data`.
    pub fn write(&self, data: DataVec) -> Result<(), TensorError> {
        if data.len() != self.shape().num_elements() {
            return Err(TensorError::Length { expected: self.shape().num_elements(), got: data.len() });
        }
        if data.etype() != self.etype() {
            return Err(TensorError::TypeMismatch(data.etype().name(), self.etype().name()));
        }
        let s = self.inner.storage.clone();
        self.schedule("write", &[], move || {
            write_data(&s, &data);
            Ok(())
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.inner.shape
    }

    pub fn etype(&self) -> ElemType {
        self.inner.storage.etype
    }

    pub fn tag(&self) -> Tag {
        self.inner.tag
    }

    pub fn device(&self) -> usize {
        self.inner.device
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.inner.engine
    }

    pub(crate) fn storage(&self) -> &Arc<Storage> {
        &self.inner.storage
    }

    /// True when both handles refer to the same buffer.
    pub fn same_buffer(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner.storage, &other.inner.storage)
    }

    fn live(&self) -> Result<(), TensorError> {
        if self.inner.released.load(Ordering::SeqCst) {
            Err(TensorError::Released)
        } else {
            Ok(())
        }
    }

    /// Pushes `f` writing this tensor and reading `reads`.
    pub(crate) fn schedule<F>(&self, name: &str, reads: &[&Tensor], f: F) -> Result<(), TensorError>
    where
        F: FnOnce() -> Result<(), String> + Send + 'static,
    {
        self.live()?;
        let mut tags = Vec::with_capacity(reads.len());
        for r in reads {
            r.live()?;
            tags.push(r.tag());
        }
        self.inner.engine.push(name, &tags, &[self.tag()], f)?;
        Ok(())
    }

    /// Blocks until every pending operation on this tensor has finished and
    /// returns its values widened to `f64`.
    pub fn to_host(&self) -> Result<Vec<f64>, TensorError> {
        Ok(self.to_data()?.to_f64())
    }

    pub fn to_host_typed<T: Element>(&self) -> Result<Vec<T>, TensorError> {
        let d = self.to_data()?;
        T::slice(&d)
            .map(<[T]>::to_vec)
            .ok_or(TensorError::TypeMismatch(T::ETYPE.name(), self.etype().name()))
    }

    /// Row-major little-endian IEEE-754 bytes.
    pub fn to_le_bytes(&self) -> Result<Vec<u8>, TensorError> {
        Ok(self.to_data()?.to_le_bytes())
    }

    pub fn to_data(&self) -> Result<DataVec, TensorError> {
        self.live()?;
        let e = &self.inner.engine;
        let out = Arc::new(std::sync::Mutex::new(DataVec::zeros(self.etype(), self.inner.storage.len())));
        let (o, s) = (out.clone(), self.inner.storage.clone());
        e.push("to_host", &[self.tag()], &[], move || {
            let mut o = o.lock().unwrap();
            read_into(&s, &mut o);
            Ok(())
        })?;
        e.wait_for(self.tag())?;
        let data = std::mem::replace(&mut *out.lock().unwrap(), DataVec::F32(Vec::new()));
        Ok(data)
    }

    /// Blocks until pending operations on this tensor finish.
    pub fn wait(&self) -> Result<(), TensorError> {
        self.live()?;
        Ok(self.inner.engine.wait_for(self.tag())?)
    }

    /// Schedules the buffer to be freed after pending operations; later use
    /// of any handle to it is an error.
    pub fn release(&self) -> Result<(), TensorError> {
        if self.inner.released.swap(true, Ordering::SeqCst) {
            return Err(TensorError::Released);
        }
        let storage = self.inner.storage.clone();
        self.inner.engine.push_delete_with(self.tag(), move || drop(storage))?;
        Ok(())
    }

    fn check_same(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(self.shape().clone(), other.shape().clone()));
        }
        if self.etype() != other.etype() {
            return Err(TensorError::TypeMismatch(self.etype().name(), other.etype().name()));
        }
        Ok(())
    }

    /// New tensor of the same shape and type, zero-filled.
    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(self.engine(), self.shape().clone(), self.etype())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let out = self.zeros_like();
        elementwise(BinOp::Add, self, other, &out)?;
        Ok(out)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let out = self.zeros_like();
        elementwise(BinOp::Mul, self, other, &out)?;
        Ok(out)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        let out = self.zeros_like();
        scalar_op(ScalarOp::Mul, self, c, &out)?;
        Ok(out)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        let out = self.zeros_like();
        scalar_op(ScalarOp::Add, self, c, &out)?;
        Ok(out)
    }
}

fn write_data(dst: &Storage, src: &DataVec) {
    match src {
        DataVec::F32(v) => unsafe { dst.slice_mut::<f32>() }.copy_from_slice(v),
        DataVec::F64(v) => unsafe { dst.slice_mut::<f64>() }.copy_from_slice(v),
    }
}

fn read_into(src: &Storage, dst: &mut DataVec) {
    match dst {
        DataVec::F32(v) => v.copy_from_slice(unsafe { src.slice::<f32>() }),
        DataVec::F64(v) => v.copy_from_slice(unsafe { src.slice::<f64>() }),
    }
}

/// Runs `$body` with `$t` bound to the element type of `$etype`.
macro_rules! dispatch {
    ($etype:expr, $t:ident => $body:expr) => {
        match $etype {
            ElemType::F32 => {
                type $t = f32;
                $body
            }
            ElemType::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}

#[inline]
fn bin<T: Element>(op: BinOp, a: T, b: T) -> T {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
    }
}

/// `out = a op b`. `out` may be the same tensor as `a` or `b`.
pub fn elementwise(op: BinOp, a: &Tensor, b: &Tensor, out: &Tensor) -> Result<(), TensorError> {
    a.check_same(b)?;
    a.check_same(out)?;
    let n = out.shape().num_elements();
    dispatch!(out.etype(), T => {
        let pa = SendPtr(a.storage().ptr::<T>());
        let pb = SendPtr(b.storage().ptr::<T>());
        let po = SendPtr(out.storage().ptr::<T>());
        let keep = (a.storage().clone(), b.storage().clone(), out.storage().clone());
        out.schedule("elementwise", &[a, b], move || {
            let _keep = &keep;
            let (pa, pb, po) = (pa, pb, po);
            // Raw pointers: `out` may alias an input. Each element is read
            // before it is written.
            for k in 0..n {
                unsafe { *po.0.add(k) = bin(op, *pa.0.add(k), *pb.0.add(k)) };
            }
            Ok(())
        })
    })
}

/// `out = a op c`. `out` may be the same tensor as `a`.
pub fn scalar_op(op: ScalarOp, a: &Tensor, c: f64, out: &Tensor) -> Result<(), TensorError> {
    a.check_same(out)?;
    let n = out.shape().num_elements();
    dispatch!(out.etype(), T => {
        let pa = SendPtr(a.storage().ptr::<T>());
        let po = SendPtr(out.storage().ptr::<T>());
        let keep = (a.storage().clone(), out.storage().clone());
        let c = T::from_f64(c);
        out.schedule("scalar", &[a], move || {
            let _keep = &keep;
            let (pa, po) = (pa, po);
            for k in 0..n {
                unsafe {
                    let x = *pa.0.add(k);
                    *po.0.add(k) = match op {
                        ScalarOp::Add => x + c,
                        ScalarOp::Mul => x * c,
                    };
                }
            }
            Ok(())
        })
    })
}

/// `out[m,n] = a[m,k] @ b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor, out: &Tensor) -> Result<(), TensorError> {
    let (sa, sb, so) = (a.shape().dims(), b.shape().dims(), out.shape().dims());
    if sa.len() != 2 || sb.len() != 2 || so.len() != 2 || sa[1] != sb[0] || so != [sa[0], sb[1]] {
        return Err(TensorError::MatmulDims(a.shape().clone(), b.shape().clone(), out.shape().clone()));
    }
    if a.etype() != out.etype() || b.etype() != out.etype() {
        return Err(TensorError::TypeMismatch(a.etype().name(), out.etype().name()));
    }
    if out.same_buffer(a) || out.same_buffer(b) {
        return Err(TensorError::Alias);
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (ta, tb, to) = (a.storage().clone(), b.storage().clone(), out.storage().clone());
    dispatch!(out.etype(), T => out.schedule("matmul", &[a, b], move || {
        let (x, y) = unsafe { (ta.slice::<T>(), tb.slice::<T>()) };
        tessel_core::ops::kernels::matmul(x, y, unsafe { to.slice_mut::<T>() }, m, k, n);
        Ok(())
    }))
}

/// `y = y + alpha * x`, the SGD primitive.
pub fn axpy(alpha: f64, x: &Tensor, y: &Tensor) -> Result<(), TensorError> {
    x.check_same(y)?;
    let n = y.shape().num_elements();
    dispatch!(y.etype(), T => {
        let px = SendPtr(x.storage().ptr::<T>());
        let py = SendPtr(y.storage().ptr::<T>());
        let keep = (x.storage().clone(), y.storage().clone());
        let alpha = T::from_f64(alpha);
        y.schedule("axpy", &[x], move || {
            let _keep = &keep;
            let (px, py) = (px, py);
            if px.0 == py.0 {
                let ys = unsafe { std::slice::from_raw_parts_mut(py.0, n) };
                for v in ys.iter_mut() {
                    *v = *v + alpha * *v;
                }
            } else {
                let (xs, ys) = unsafe { (std::slice::from_raw_parts(px.0, n), std::slice::from_raw_parts_mut(py.0, n)) };
                sgd::axpy(alpha, xs, ys);
            }
            Ok(())
        })
    })
}

/// `y = y * c`.
pub fn scale(c: f64, y: &Tensor) -> Result<(), TensorError> {
    let s = y.storage().clone();
    dispatch!(y.etype(), T => {
        let c = T::from_f64(c);
        y.schedule("scale", &[], move || {
            sgd::scale(c, unsafe { s.slice_mut::<T>() });
            Ok(())
        })
    })
}

/// Schedules `dst = src`; copying a tensor onto itself is a no-op.
pub fn copy_to(src: &Tensor, dst: &Tensor) -> Result<(), TensorError> {
    src.check_same(dst)?;
    src.live()?;
    dst.live()?;
    if src.same_buffer(dst) {
        return Ok(());
    }
    let (s, d) = (src.storage().clone(), dst.storage().clone());
    dispatch!(dst.etype(), T => dst.schedule("copy", &[src], move || {
        unsafe { d.slice_mut::<T>() }.copy_from_slice(unsafe { s.slice::<T>() });
        Ok(())
    }))
}

/// Element types that can be moved into a [`DataVec`] without conversion.
pub trait IntoData: Element {
    fn to_data(v: Vec<Self>) -> DataVec;
}

impl IntoData for f32 {
    fn to_data(v: Vec<f32>) -> DataVec {
        DataVec::F32(v)
    }
}

impl IntoData for f64 {
    fn to_data(v: Vec<f64>) -> DataVec {
        DataVec::F64(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(d: &[usize]) -> Shape {
        Shape::new(d.to_vec()).unwrap()
    }

    #[test]
    fn ones_times_two() {
        let e = Engine::new(2);
        let a = Tensor::ones(&e, s(&[2, 3]), ElemType::F32);
        assert_eq!(a.mul_scalar(2.0).unwrap().to_host().unwrap(), vec![2.0; 6]);
    }

    #[test]
    fn host_round_trip_and_zero() {
        let e = Engine::new(0);
        let t = Tensor::from_host(&e, s(&[2, 2]), ElemType::F64, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.to_host().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Tensor::zeros(&e, s(&[1]), ElemType::F32).to_host().unwrap(), vec![0.0]);
        assert!(matches!(
            Tensor::from_host(&e, s(&[3]), ElemType::F32, &[1.0]),
            Err(TensorError::Length { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn thousand_increments() {
        let e = Engine::new(2);
        let t = Tensor::zeros(&e, s(&[1]), ElemType::F32);
        for _ in 0..1000 {
            scalar_op(ScalarOp::Add, &t, 1.0, &t).unwrap();
        }
        assert_eq!(t.to_host().unwrap(), vec![1000.0]);
    }

    #[test]
    fn ieee_division_and_identities() {
        let e = Engine::new(1);
        let one = Tensor::from_host(&e, s(&[1]), ElemType::F32, &[1.0]).unwrap();
        let zero = Tensor::zeros(&e, s(&[1]), ElemType::F32);
        let q = zero.zeros_like();
        elementwise(BinOp::Div, &one, &zero, &q).unwrap();
        assert_eq!(q.to_host().unwrap(), vec![f64::INFINITY]);
        let x = Tensor::from_host(&e, s(&[2]), ElemType::F64, &[1.0, 2.0]).unwrap();
        let y = Tensor::from_host(&e, s(&[2]), ElemType::F64, &[3.0, 4.0]).unwrap();
        assert_eq!(x.add(&y).unwrap().to_host().unwrap(), vec![4.0, 6.0]);
        let z = Tensor::zeros(&e, s(&[2]), ElemType::F64);
        assert_eq!(x.add(&z).unwrap().to_host().unwrap(), vec![1.0, 2.0]);
        assert_eq!(x.mul_scalar(1.0).unwrap().to_host().unwrap(), vec![1.0, 2.0]);
        assert_eq!(x.add_scalar(0.0).unwrap().to_host().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn mismatches_are_rejected_before_scheduling() {
        let e = Engine::new(0);
        let a = Tensor::zeros(&e, s(&[2]), ElemType::F32);
        let b = Tensor::zeros(&e, s(&[3]), ElemType::F32);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch(..))));
        let c = Tensor::zeros(&e, s(&[2]), ElemType::F64);
        assert!(matches!(a.add(&c), Err(TensorError::TypeMismatch(..))));
        let m = Tensor::zeros(&e, s(&[2, 2]), ElemType::F32);
        assert_eq!(matmul(&m, &m, &m), Err(TensorError::Alias));
        let bad = Tensor::zeros(&e, s(&[3, 2]), ElemType::F32);
        assert!(matches!(matmul(&m, &bad, &m), Err(TensorError::MatmulDims(..))));
    }

    #[test]
    fn matmul_values() {
        let e = Engine::new(1);
        let a = Tensor::from_host(&e, s(&[2, 2]), ElemType::F64, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::from_host(&e, s(&[2, 2]), ElemType::F64, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = Tensor::zeros(&e, s(&[2, 2]), ElemType::F64);
        matmul(&a, &i, &out).unwrap();
        assert_eq!(out.to_host().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_host(&e, s(&[2, 1]), ElemType::F64, &[5.0, 6.0]).unwrap();
        let c = Tensor::zeros(&e, s(&[2, 1]), ElemType::F64);
        matmul(&a, &b, &c).unwrap();
        assert_eq!(c.to_host().unwrap(), vec![17.0, 39.0]);
    }

    #[test]
    fn axpy_cases() {
        let e = Engine::new(2);
        let g = Tensor::from_host(&e, s(&[1]), ElemType::F64, &[0.5]).unwrap();
        let w = Tensor::from_host(&e, s(&[1]), ElemType::F64, &[1.0]).unwrap();
        axpy(-0.1, &g, &w).unwrap();
        assert_eq!(w.to_host().unwrap(), vec![0.95]);
        axpy(0.0, &g, &w).unwrap();
        assert_eq!(w.to_host().unwrap(), vec![0.95]);
        let ones = Tensor::ones(&e, s(&[3]), ElemType::F32);
        let y = Tensor::zeros(&e, s(&[3]), ElemType::F32);
        for _ in 0..10 {
            axpy(1.0, &ones, &y).unwrap();
        }
        assert_eq!(y.to_host().unwrap(), vec![10.0; 3]);
        axpy(1.0, &y, &y).unwrap();
        assert_eq!(y.to_host().unwrap(), vec![20.0; 3]);
    }

    #[test]
    fn copy_then_mutate_source() {
        let e = Engine::new(2);
        let src = Tensor::from_host(&e, s(&[2]), ElemType::F32, &[1.0, 2.0]).unwrap();
        let dst = src.zeros_like();
        copy_to(&src, &dst).unwrap();
        scalar_op(ScalarOp::Mul, &src, 10.0, &src).unwrap();
        assert_eq!(dst.to_host().unwrap(), vec![1.0, 2.0]);
        assert_eq!(src.to_host().unwrap(), vec![10.0, 20.0]);
        copy_to(&src, &src).unwrap();
    }

    #[test]
    fn release_then_use_fails() {
        let e = Engine::new(1);
        let t = Tensor::ones(&e, s(&[4]), ElemType::F32);
        let alias = t.clone();
        t.release().unwrap();
        assert_eq!(alias.to_host(), Err(TensorError::Released));
        assert_eq!(t.release(), Err(TensorError::Released));
        e.wait_all().unwrap();
    }

    #[test]
    fn failed_writer_surfaces_at_to_host() {
        let e = Engine::new(1);
        let t = Tensor::zeros(&e, s(&[1]), ElemType::F32);
        t.schedule("fails", &[], || Err("disk on fire".into())).unwrap();
        let u = t.add_scalar(1.0).unwrap();
        let want = EngineError::Failed { op: "fails".into(), message: "disk on fire".into() };
        assert_eq!(t.to_host(), Err(TensorError::Engine(want.clone())));
        assert_eq!(u.to_host(), Err(TensorError::Engine(want)));
    }

    #[test]
    fn little_endian_host_bytes() {
        let e = Engine::new(0);
        let t = Tensor::from_vec(&e, s(&[2]), vec![1.5f32, -2.0]).unwrap();
        let b = t.to_le_bytes().unwrap();
        assert_eq!(&b[..4], &1.5f32.to_le_bytes());
        assert_eq!(&b[4..], &(-2.0f32).to_le_bytes());
    }
}
