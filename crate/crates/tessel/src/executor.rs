//! Bound, planned graphs. Binding builds the gradient graph, optionally
//! fuses elementwise chains, plans memory and allocates one tensor per
//! storage slot. Each pass then pushes one engine operation per node,
//! reading the tags of its input slots and writing those of its outputs.
//! Slots shared under the plan share a tag, which is what turns co-share's
//! extra ordering edges into real engine dependencies.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use tessel_core::autodiff::gradient;
use tessel_core::ops::kernels;
use tessel_core::planner::{fuse, plan_memory, AllocationPlan, PlanStrategy, SlotKind};
use tessel_core::{ElemType, Element, Entry, Graph, GraphError, OpKind, Shape, ShapeMap, Symbol};

use crate::engine::{Engine, EngineError, Tag};
use crate::tensor::{axpy, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradReq {
    Null,
    Write,
    Add,
}

#[derive(Clone, Copy, Debug)]
pub struct BindOptions {
    pub strategy: PlanStrategy,
    pub fuse: bool,
}

impl Default for BindOptions {
    fn default() -> Self {
        BindOptions { strategy: PlanStrategy::Both, fuse: true }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("argument `{0}` is not bound")]
    Unbound(String),
    #[error("`{name}` has shape {got}, expected {expected}")]
    ShapeMismatch { name: String, expected: Shape, got: Shape },
    #[error("all bound tensors must share one element type")]
    MixedTypes,
    #[error("gradient requested for `{0}` without a gradient tensor")]
    MissingGrad(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("plan interleaves forward and backward nodes")]
    Interleaved,
    #[error("plan aliases an input of non-pointwise node `{0}`")]
    BadAlias(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Pointer table for one node, fixed at bind time.
struct NodeKernel {
    op: OpKind,
    in_shapes: Vec<Shape>,
    ins: Vec<(usize, usize)>,
    outs: Vec<(usize, usize)>,
    etype: ElemType,
    _keep: Vec<Tensor>,
}

// SAFETY: the addresses point into tensors kept alive by `_keep`; access is
// serialized by the engine tags pushed with every run.
unsafe impl Send for NodeKernel {}
unsafe impl Sync for NodeKernel {}

const MAX_ARGS: usize = 4;

impl NodeKernel {
    fn run(&self) -> Result<(), String> {
        match self.etype {
            ElemType::F32 => self.run_typed::<f32>(),
            ElemType::F64 => self.run_typed::<f64>(),
        }
    }

    fn run_typed<T: Element>(&self) -> Result<(), String> {
        if self.op.is_pointwise() {
            // Outputs may alias inputs (in-place plans): read element `k` of
            // every input before writing element `k` of the output.
            let (out, n) = self.outs[0];
            let out = out as *mut T;
            let ins = &self.ins;
            for k in 0..n {
                let v = kernels::pointwise(&self.op, |j| unsafe { *(ins[j].0 as *const T).add(k) });
                unsafe { *out.add(k) = v };
            }
            return Ok(());
        }
        let res = if self.ins.len() <= MAX_ARGS && self.outs.len() <= MAX_ARGS {
            let ins: [&[T]; MAX_ARGS] = std::array::from_fn(|j| match self.ins.get(j) {
                Some(&(p, n)) => unsafe { std::slice::from_raw_parts(p as *const T, n) },
                None => &[][..],
            });
            let mut outs: [&mut [T]; MAX_ARGS] = std::array::from_fn(|j| match self.outs.get(j) {
                Some(&(p, n)) => unsafe { std::slice::from_raw_parts_mut(p as *mut T, n) },
                None => &mut [][..],
            });
            kernels::run(&self.op, &ins[..self.ins.len()], &self.in_shapes, &mut outs[..self.outs.len()])
        } else {
            let ins: Vec<&[T]> =
                self.ins.iter().map(|&(p, n)| unsafe { std::slice::from_raw_parts(p as *const T, n) }).collect();
            let mut outs: Vec<&mut [T]> =
                self.outs.iter().map(|&(p, n)| unsafe { std::slice::from_raw_parts_mut(p as *mut T, n) }).collect();
            kernels::run(&self.op, &ins, &self.in_shapes, &mut outs)
        };
        res.map_err(|e| e.to_string())
    }
}

struct Prepared {
    name: String,
    reads: Vec<Tag>,
    writes: Vec<Tag>,
    kernel: Arc<NodeKernel>,
}

pub struct Executor {
    engine: Arc<Engine>,
    graph: Graph,
    shapes: ShapeMap,
    plan: AllocationPlan,
    args: BTreeMap<String, Tensor>,
    outputs: Vec<Tensor>,
    grads: BTreeMap<String, Tensor>,
    accumulate: Vec<(Tensor, Tensor)>,
    forward_ops: Vec<Prepared>,
    backward_ops: Vec<Prepared>,
    forward_done: bool,
}

impl Executor {
    /// Binds `args` (every free variable of `symbol`, plus head gradients
    /// `<node>_head_grad` for non-loss outputs when gradients are requested)
    /// and gradient tensors for arguments with `Write` or `Add` requests.
    pub fn bind(
        engine: &Arc<Engine>,
        symbol: &Symbol,
        args: BTreeMap<String, Tensor>,
        grads: BTreeMap<String, (Tensor, GradReq)>,
        opts: BindOptions,
    ) -> Result<Executor, ExecError> {
        let fwd = symbol.to_graph();
        let n_fwd = fwd.outputs.len();
        let wrt: Vec<String> = fwd
            .argument_names()
            .into_iter()
            .filter(|n| grads.get(n).is_some_and(|(_, r)| *r != GradReq::Null))
            .collect();
        for name in grads.keys() {
            if fwd.find_variable(name).is_none() {
                return Err(GraphError::UnknownArgument(name.clone()).into());
            }
        }
        let mut graph = if wrt.is_empty() {
            fwd
        } else {
            let refs: Vec<&str> = wrt.iter().map(String::as_str).collect();
            gradient(symbol, &refs)?.to_graph()
        };
        if opts.fuse {
            graph = fuse(&graph);
        }

        let mut etype = None;
        let mut given = BTreeMap::new();
        for i in graph.arguments() {
            let name = &graph.nodes[i].name;
            let t = args.get(name).ok_or_else(|| ExecError::Unbound(name.clone()))?;
            if *etype.get_or_insert(t.etype()) != t.etype() {
                return Err(ExecError::MixedTypes);
            }
            given.insert(name.clone(), t.shape().clone());
        }
        let etype = etype.unwrap_or(ElemType::F32);
        let shapes = graph.infer_shapes(&given)?;
        for i in graph.arguments() {
            let name = &graph.nodes[i].name;
            let expected = &shapes.shapes[i][0];
            if &given[name] != expected {
                return Err(ExecError::ShapeMismatch { name: name.clone(), expected: expected.clone(), got: given[name].clone() });
            }
        }

        let plan = plan_memory(&graph, &shapes, etype, opts.strategy);

        // One tensor per slot.
        let mut slot_tensor: Vec<Option<Tensor>> = vec![None; plan.slot_bytes.len()];
        for i in graph.arguments() {
            slot_tensor[plan.slot_of[i][0]] = Some(args[&graph.nodes[i].name].clone());
        }
        let mut outputs = Vec::with_capacity(n_fwd);
        let mut grad_map = BTreeMap::new();
        let mut accumulate = Vec::new();
        for (k, &e) in graph.outputs.iter().enumerate() {
            let s = plan.slot(e);
            if slot_tensor[s].is_some() {
                // An output that is itself a bound argument.
                if k < n_fwd {
                    outputs.push(slot_tensor[s].clone().unwrap());
                }
                continue;
            }
            let shape = shapes.get(e).clone();
            let t = if k < n_fwd {
                let t = Tensor::zeros(engine, shape, etype);
                outputs.push(t.clone());
                t
            } else {
                let name = &wrt[k - n_fwd];
                let (user, req) = grads.get(name).ok_or_else(|| ExecError::MissingGrad(name.clone()))?;
                if user.shape() != &shape {
                    return Err(ExecError::ShapeMismatch { name: name.clone(), expected: shape, got: user.shape().clone() });
                }
                if user.etype() != etype {
                    return Err(ExecError::MixedTypes);
                }
                grad_map.insert(name.clone(), user.clone());
                match req {
                    GradReq::Add => {
                        let tmp = Tensor::zeros(engine, shape, etype);
                        accumulate.push((tmp.clone(), user.clone()));
                        tmp
                    }
                    _ => user.clone(),
                }
            };
            slot_tensor[s] = Some(t);
        }
        for (s, kind) in plan.slot_kind.iter().enumerate() {
            if *kind == SlotKind::Internal {
                let n = plan.slot_bytes[s] / etype.width();
                slot_tensor[s] = Some(Tensor::zeros(engine, Shape::new([n]).map_err(GraphError::from)?, etype));
            }
        }
        let slot_tensor: Vec<Tensor> = slot_tensor.into_iter().map(|t| t.expect("every slot is filled")).collect();

        // Forward nodes: ancestors of the forward outputs.
        let mut is_fwd = vec![false; graph.nodes.len()];
        let mut stack: Vec<usize> = graph.outputs[..n_fwd].iter().map(|e| e.node).collect();
        while let Some(v) = stack.pop() {
            if !std::mem::replace(&mut is_fwd[v], true) {
                stack.extend(graph.nodes[v].inputs.iter().map(|e| e.node));
            }
        }
        let mut forward_ops = Vec::new();
        let mut backward_ops = Vec::new();
        for &i in &plan.order {
            let node = &graph.nodes[i];
            let entry_ptr = |e: Entry| {
                let t = &slot_tensor[plan.slot(e)];
                let n = shapes.get(e).num_elements();
                let p = match etype {
                    ElemType::F32 => t.storage().ptr::<f32>() as usize,
                    ElemType::F64 => t.storage().ptr::<f64>() as usize,
                };
                (p, n)
            };
            let outs: Vec<Entry> = (0..node.op.num_outputs()).map(|o| Entry { node: i, index: o }).collect();
            let mut keep: Vec<Tensor> = Vec::new();
            let mut reads = Vec::new();
            let mut writes = Vec::new();
            for e in &node.inputs {
                let t = &slot_tensor[plan.slot(*e)];
                reads.push(t.tag());
                keep.push(t.clone());
            }
            for e in &outs {
                let t = &slot_tensor[plan.slot(*e)];
                writes.push(t.tag());
                keep.push(t.clone());
            }
            let in_slots: BTreeSet<usize> = node.inputs.iter().map(|e| plan.slot(*e)).collect();
            if !node.op.is_pointwise() && outs.iter().any(|e| in_slots.contains(&plan.slot(*e))) {
                return Err(ExecError::BadAlias(node.name.clone()));
            }
            let kernel = NodeKernel {
                op: node.op.clone(),
                in_shapes: node.inputs.iter().map(|e| shapes.get(*e).clone()).collect(),
                ins: node.inputs.iter().map(|e| entry_ptr(*e)).collect(),
                outs: outs.iter().map(|e| entry_ptr(*e)).collect(),
                etype,
                _keep: keep,
            };
            let p = Prepared { name: node.name.clone(), reads, writes, kernel: Arc::new(kernel) };
            if is_fwd[i] {
                if !backward_ops.is_empty() {
                    return Err(ExecError::Interleaved);
                }
                forward_ops.push(p);
            } else {
                backward_ops.push(p);
            }
        }

        Ok(Executor {
            engine: engine.clone(),
            graph,
            shapes,
            plan,
            args,
            outputs,
            grads: grad_map,
            accumulate,
            forward_ops,
            backward_ops,
            forward_done: false,
        })
    }

    fn push_all(&self, ops: &[Prepared]) -> Result<(), ExecError> {
        for p in ops {
            let k = p.kernel.clone();
            self.engine.push(&p.name, &p.reads, &p.writes, move || k.run())?;
        }
        Ok(())
    }

    /// Schedules the forward pass and returns the output handles.
    pub fn forward(&mut self) -> Result<&[Tensor], ExecError> {
        self.push_all(&self.forward_ops)?;
        self.forward_done = true;
        Ok(&self.outputs)
    }

    /// Schedules the backward pass of the most recent forward.
    pub fn backward(&mut self) -> Result<(), ExecError> {
        if !self.forward_done {
            return Err(ExecError::BackwardBeforeForward);
        }
        self.push_all(&self.backward_ops)?;
        for (tmp, user) in &self.accumulate {
            axpy(1.0, tmp, user)?;
        }
        Ok(())
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    pub fn arg(&self, name: &str) -> Option<&Tensor> {
        self.args.get(name)
    }

    pub fn args(&self) -> &BTreeMap<String, Tensor> {
        &self.args
    }

    /// Gradient tensor for `name`; absent for `GradReq::Null`.
    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shapes(&self) -> &ShapeMap {
        &self.shapes
    }

    pub fn plan(&self) -> &AllocationPlan {
        &self.plan
    }

    /// Operations pushed per forward plus backward pass.
    pub fn ops_per_step(&self) -> usize {
        self.forward_ops.len() + self.backward_ops.len() + self.accumulate.len()
    }
}
