//! Size-type classification of data types, locally from declarations and
//! globally from the code that runs in each stage or phase.

mod local;
mod refine;
mod symbolic;

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::ir::{Analysis, IrError, Program};

pub use local::{classify_local, LocalVerdict};
pub use refine::{is_fixed_length, is_init_only, FixedLength, Refiner, Scope};
pub use symbolic::{symbolic_propagate, SymbolicEnv, SymbolicValue};

/// Size variability of a type. The first three variants are ordered from
/// least to most variable; `RecurDef` sits outside that order and absorbs
/// everything under `max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SizeType {
    StaticFixed,
    RuntimeFixed,
    Variable,
    RecurDef,
}

impl SizeType {
    pub fn name(self) -> &'static str {
        match self {
            SizeType::StaticFixed => "StaticFixed",
            SizeType::RuntimeFixed => "RuntimeFixed",
            SizeType::Variable => "Variable",
            SizeType::RecurDef => "RecurDef",
        }
    }

    /// Whether instances can be laid out as byte segments.
    pub fn decomposable(self) -> bool {
        matches!(self, SizeType::StaticFixed | SizeType::RuntimeFixed)
    }
}

impl fmt::Display for SizeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One classification verdict with the facts that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub size: SizeType,
    pub evidence: Vec<String>,
}

/// Every verdict for every composite type of a program.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ClassificationReport {
    /// Type-only verdicts.
    pub local: BTreeMap<String, Verdict>,
    /// Verdicts per `(type, stage)`.
    pub stages: BTreeMap<(String, String), Verdict>,
    /// Verdicts per `(type, "stage/phase")`, present for every phase of every
    /// stage; phases only refine types that are Variable at stage scope.
    pub phases: BTreeMap<(String, String), Verdict>,
    /// Stage names in declaration order.
    pub stage_order: Vec<String>,
}

impl ClassificationReport {
    pub fn local(&self, ty: &str) -> Option<SizeType> {
        self.local.get(ty).map(|v| v.size)
    }

    pub fn stage(&self, ty: &str, stage: &str) -> Option<SizeType> {
        self.stages
            .get(&(ty.to_string(), stage.to_string()))
            .map(|v| v.size)
    }

    pub fn phase(&self, ty: &str, stage: &str, phase: &str) -> Option<SizeType> {
        self.phases
            .get(&(ty.to_string(), format!("{stage}/{phase}")))
            .map(|v| v.size)
    }

    /// Human-readable lines `TYPE SCOPE VERDICT`, followed by indented evidence.
    pub fn render(&self, program: &Program, with_evidence: bool) -> String {
        let mut out = String::new();
        let mut line = |ty: &str, scope: &str, v: &Verdict| {
            out.push_str(&format!("{ty} {scope} {}\n", v.size));
            if with_evidence {
                for e in &v.evidence {
                    out.push_str(&format!("  because {e}\n"));
                }
            }
        };
        for ty in program.composite_types() {
            let Some(lv) = self.local.get(&ty) else {
                continue;
            };
            if lv.size == SizeType::RecurDef {
                line(&ty, "*", lv);
                continue;
            }
            line(&ty, "local", lv);
            for st in &self.stage_order {
                let Some(sv) = self.stages.get(&(ty.clone(), st.clone())) else {
                    continue;
                };
                line(&ty, st, sv);
                if sv.size == SizeType::Variable {
                    let prefix = format!("{st}/");
                    for ((t, scope), pv) in &self.phases {
                        if t == &ty && scope.starts_with(&prefix) {
                            line(&ty, scope, pv);
                        }
                    }
                }
            }
        }
        out
    }

    /// Tab-separated `type scope verdict evidence` records.
    pub fn render_machine(&self, program: &Program) -> String {
        let mut out = String::new();
        let mut rec = |ty: &str, scope: &str, v: &Verdict| {
            out.push_str(&format!(
                "{ty}\t{scope}\t{}\t{}\n",
                v.size,
                v.evidence.join("; ")
            ));
        };
        for ty in program.composite_types() {
            let Some(lv) = self.local.get(&ty) else {
                continue;
            };
            if lv.size == SizeType::RecurDef {
                rec(&ty, "*", lv);
                continue;
            }
            rec(&ty, "local", lv);
            for st in &self.stage_order {
                if let Some(sv) = self.stages.get(&(ty.clone(), st.clone())) {
                    rec(&ty, st, sv);
                }
            }
            for ((t, scope), pv) in &self.phases {
                if t == &ty {
                    rec(&ty, scope, pv);
                }
            }
        }
        out
    }
}

/// Classifies every composite type of `program` at local, stage and phase scope.
pub fn classify_program(
    program: &Program,
    analysis: &Analysis,
) -> Result<ClassificationReport, IrError> {
    let mut report = ClassificationReport::default();
    for ty in program.composite_types() {
        let lv = classify_local(&ty, program, &analysis.type_sets)?;
        report.local.insert(
            ty,
            Verdict {
                size: lv.size,
                evidence: lv.evidence,
            },
        );
    }
    for stage in &program.job.stages {
        report.stage_order.push(stage.name.clone());
        let scope = Scope::stage(program, analysis, stage)?;
        let mut variable = Vec::new();
        for (ty, lv) in &report.local {
            let mut r = Refiner::new(program, analysis, &scope);
            let size = r.classify_global(ty, lv.size);
            if size == SizeType::Variable {
                variable.push(ty.clone());
            }
            report.stages.insert(
                (ty.clone(), stage.name.clone()),
                Verdict {
                    size,
                    evidence: r.evidence,
                },
            );
        }
        phased_refine(program, analysis, stage, &variable, &mut report)?;
    }
    Ok(report)
}

/// Re-runs global classification per phase for types that are Variable at
/// stage scope; other types inherit their stage verdict.
pub fn phased_refine(
    program: &Program,
    analysis: &Analysis,
    stage: &crate::ir::StageDecl,
    variable: &[String],
    report: &mut ClassificationReport,
) -> Result<(), IrError> {
    for phase in &stage.phases {
        let scope_name = format!("{}/{}", stage.name, phase.name);
        let scope = if variable.is_empty() {
            None
        } else {
            Some(Scope::phase(program, analysis, stage, phase)?)
        };
        let types: Vec<String> = report.local.keys().cloned().collect();
        for ty in types {
            let stage_v = report.stages[&(ty.clone(), stage.name.clone())].clone();
            let v = match (&scope, variable.contains(&ty)) {
                (Some(sc), true) => {
                    let mut r = Refiner::new(program, analysis, sc);
                    let size = r.classify_global(&ty, report.local[&ty].size);
                    Verdict {
                        size,
                        evidence: r.evidence,
                    }
                }
                _ => stage_v,
            };
            report.phases.insert((ty, scope_name.clone()), v);
        }
    }
    Ok(())
}
