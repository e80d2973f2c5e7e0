//! Desk-scale dataflow runtime: job planning, an interpreter for UDFs,
//! phase-by-phase execution in object or decomposed mode, metrics, and a
//! dynamic data-size oracle.

mod exec;
mod interp;
mod metrics;
mod oracle;
mod plan;
pub mod workloads;

use thiserror::Error;

use crate::containers::ContainerError;
use crate::ir::IrError;
use crate::pagestore::LayoutError;

pub use exec::{EngineConfig, RunOutcome, Session, ShuffleStat};
pub use interp::{coerce_datum, Env, Interp, Outcome};
pub use metrics::{digest, Metrics, Sample};
pub use oracle::{
    check_call_graphs, check_soundness, Instance, OracleTrace, Origin, Violation, ViolationKind,
};
pub use plan::{plan_job, ContainerPlan, Decision, ExecutionPlan, PhasePlan, Sharing, TypePlan};

/// How containers hold their records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Every record stays an object graph.
    Object,
    /// Records of fixed-size types are stored as byte segments in pages.
    Decomposed,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "object" => Some(Mode::Object),
            "decomposed" => Some(Mode::Decomposed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Object => "object",
            Mode::Decomposed => "decomposed",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("cannot compile `{method}`: {msg}")]
    Compile { method: String, msg: String },
    #[error("job error: {0}")]
    Job(String),
    #[error("runtime error in `{method}`: {msg}")]
    Runtime { method: String, msg: String },
    #[error("`{ty}` stored into `{owner}.{field}` is outside the field's inferred type-set")]
    TypeSet {
        owner: String,
        field: String,
        ty: String,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown workload `{name}`; available: {}", available.join(", "))]
    UnknownWorkload {
        name: String,
        available: Vec<String>,
    },
    #[error("input error: {0}")]
    Input(String),
}

impl EngineError {
    /// Process exit code: 1 configuration, 2 analysis, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_)
            | EngineError::UnknownWorkload { .. }
            | EngineError::Input(_) => 1,
            EngineError::Ir(_) | EngineError::Compile { .. } | EngineError::Job(_) => 2,
            _ => 3,
        }
    }
}
