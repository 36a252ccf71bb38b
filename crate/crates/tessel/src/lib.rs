//! Threaded runtime: dependency engine, lazily scheduled tensors, graph
//! executors, a two-level key-value store, record files and training loops.

pub mod bench;
pub mod data;
pub mod engine;
pub mod enginecheck;
pub mod executor;
pub mod kvstore;
pub mod tensor;
pub mod train;

pub use engine::{Engine, EngineError, Tag};
pub use executor::{BindOptions, ExecError, Executor, GradReq};
pub use tensor::{Tensor, TensorError};
