//! The mini typed IR: declarations, statements, jobs, and the derived graphs
//! (type dependency, type-sets, call graphs) consumed by the classifier.

mod ast;
mod graph;
mod parse;
mod pointsto;
mod print;

use thiserror::Error;

pub use ast::*;
pub use graph::{
    build_call_graph, build_type_dependency_graph, find_dependency_cycle, has_dependency_cycle,
    lineage_roots, phase_roots, stage_roots, CallEdge, CallGraph, TypeDependencyGraph,
};
pub use parse::parse_program;
pub use pointsto::{
    AllocSite, FieldKey, MethodRef, Part, PointsTo, SiteId, SiteKind, StoreFact, TypeSets,
};
pub use print::print_program;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: u32, col: u32, msg: String },
    #[error("duplicate type `{0}`")]
    DuplicateType(String),
    #[error("`{0}` is a reserved type name")]
    ReservedTypeName(String),
    #[error("unknown type `{name}` at {line}:{col}")]
    UnknownType { name: String, line: u32, col: u32 },
    #[error("`{0}` is not a class")]
    NotAClass(String),
    #[error("duplicate field `{field}` in class `{class}`")]
    DuplicateField { class: String, field: String },
    #[error("duplicate method `{0}`")]
    DuplicateMethod(String),
    #[error("call to undeclared method `{0}`")]
    UnknownMethod(String),
    #[error("unknown container `{0}`")]
    UnknownContainer(String),
    #[error("phase `{phase}` of stage `{stage}` does not read the previous phase's sink")]
    BrokenPhaseChain { stage: String, phase: String },
    #[error("field `{field}` declared `{declared}` is assigned incompatible type `{assigned}`")]
    IncompatibleAssignment {
        field: String,
        declared: String,
        assigned: String,
    },
    #[error("field `{field}` has abstract declared type `{declared}` and no inferable runtime types; annotate it with `types`")]
    AbstractTypeSet { field: String, declared: String },
}

/// Everything the classifier and engine derive from a program once.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub pta: PointsTo,
    pub type_sets: TypeSets,
}

impl Analysis {
    pub fn new(program: &Program) -> Result<Self, IrError> {
        let pta = PointsTo::analyze(program)?;
        let type_sets = pta.type_sets(program)?;
        Ok(Analysis { pta, type_sets })
    }
}

/// Convenience wrapper over [`PointsTo::type_sets`].
pub fn infer_type_sets(program: &Program) -> Result<TypeSets, IrError> {
    Analysis::new(program).map(|a| a.type_sets)
}
