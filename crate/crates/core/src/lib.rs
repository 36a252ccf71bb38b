//! Symbolic graphs, automatic differentiation, CPU kernels and memory
//! planning. Needs only `alloc`; the threaded runtime lives in `tessel`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod interp;
pub mod models;
pub mod ops;
pub mod planner;
pub mod reduce;
pub mod rng;
pub mod serialize;
pub mod sgd;
pub mod shape;
pub mod symbol;
pub mod wire;
#[doc(hidden)]
pub mod testkit;

pub use error::{GraphError, KernelError, ShapeError};
pub use graph::{Entry, GNode, Graph, ShapeMap};
pub use ops::{ActType, OpKind};
pub use shape::{DataVec, ElemType, Element, Shape};
pub use symbol::Symbol;
