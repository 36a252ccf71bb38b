//! Graph rewrites and static memory planning run before binding.

mod alloc_plan;
mod fuse;
mod prune;
mod validate;

pub use alloc_plan::{plan_memory, AllocationPlan, SlotKind};
pub use fuse::fuse;
pub use prune::prune;
pub use validate::{validate_plan, Violation, EXHAUSTIVE_LIMIT, SAMPLED_ORDERS};

use crate::graph::{Graph, ShapeMap};
use crate::shape::ElemType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlanStrategy {
    None,
    Inplace,
    Coshare,
    Both,
}

impl PlanStrategy {
    pub const ALL: [PlanStrategy; 4] =
        [PlanStrategy::None, PlanStrategy::Inplace, PlanStrategy::Coshare, PlanStrategy::Both];

    pub fn name(self) -> &'static str {
        match self {
            PlanStrategy::None => "none",
            PlanStrategy::Inplace => "inplace",
            PlanStrategy::Coshare => "coshare",
            PlanStrategy::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    fn inplace(self) -> bool {
        matches!(self, PlanStrategy::Inplace | PlanStrategy::Both)
    }

    fn coshare(self) -> bool {
        matches!(self, PlanStrategy::Coshare | PlanStrategy::Both)
    }
}

/// Internal-buffer bytes of the plan for `strategy`; bound arguments and
/// requested outputs are not counted.
pub fn estimate_memory(g: &Graph, shapes: &ShapeMap, etype: ElemType, strategy: PlanStrategy) -> usize {
    plan_memory(g, shapes, etype, strategy).total_internal_bytes
}
