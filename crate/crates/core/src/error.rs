use thiserror::Error;

use crate::types::{Violation, WorkItem};

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", join_violations(.0))]
    InvalidConfig(Vec<Violation>),

    #[error(
        "infeasible assignment: {} K-FAC works unplaced within {horizon_cap} steps (deficit {deficit:.6} ms)",
        unplaced.len()
    )]
    Infeasible {
        unplaced: Vec<WorkItem>,
        deficit: f64,
        horizon_cap: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("inconsistent critical-path counts: bubble time {0} is negative")]
    NegativeBubble(f64),

    #[error("no pipeline bubble to hold {work} ms of curvature/inversion work")]
    NoBubble { work: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix not positive definite (pivot {pivot} = {value:e}); increase damping")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dense matrix of {requested} entries exceeds the limit of {limit}")]
    TooLarge { requested: usize, limit: usize },

    #[error("{parts} blocks do not evenly divide dimension {dim}")]
    Indivisible { dim: usize, parts: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
