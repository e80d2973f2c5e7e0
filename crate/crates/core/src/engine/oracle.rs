use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::classify::{ClassificationReport, Scope, SizeType};
use crate::ir::{Analysis, MethodRef, Program};

use super::EngineError;

/// How an observed instance came into the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    /// Constructed or allocated by a UDF.
    New,
    /// Materialised from a container, an input or a broadcast value.
    Import,
}

/// One observed object and its data size over time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Instance {
    pub id: usize,
    pub ty: String,
    pub stage: String,
    pub phase: String,
    pub origin: Origin,
    /// Data size at construction (or import), then after every change.
    pub timeline: Vec<u64>,
}

impl Instance {
    pub fn scope(&self) -> String {
        format!("{}/{}", self.stage, self.phase)
    }
}

/// Everything the data-size oracle saw during an object-mode run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OracleTrace {
    pub instances: Vec<Instance>,
    /// Methods invoked per stage.
    pub invoked: BTreeMap<String, BTreeSet<String>>,
    #[serde(skip)]
    scope: (String, String),
}

impl OracleTrace {
    pub fn new() -> Self {
        OracleTrace::default()
    }

    /// Tags later observations with a stage and phase.
    pub fn set_scope(&mut self, stage: &str, phase: &str) {
        self.scope = (stage.to_string(), phase.to_string());
    }

    pub(crate) fn record(&mut self, ty: &str, origin: Origin, size: u64) -> usize {
        let id = self.instances.len();
        self.instances.push(Instance {
            id,
            ty: ty.to_string(),
            stage: self.scope.0.clone(),
            phase: self.scope.1.clone(),
            origin,
            timeline: vec![size],
        });
        id
    }

    pub(crate) fn update(&mut self, idx: usize, size: u64) {
        let t = &mut self.instances[idx].timeline;
        if t.last() != Some(&size) {
            t.push(size);
        }
    }

    pub(crate) fn invoked(&mut self, method: &str) {
        let stage = self.scope.0.clone();
        let set = self.invoked.entry(stage).or_default();
        if !set.contains(method) {
            set.insert(method.to_string());
        }
    }

    pub fn of_type<'a>(&'a self, ty: &'a str) -> impl Iterator<Item = &'a Instance> + 'a {
        self.instances.iter().filter(move |i| i.ty == ty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    /// A StaticFixed type whose instances differ in size within the scope.
    StaticFixed,
    /// A fixed-size type whose instance changed size after construction.
    RuntimeFixed,
    /// A method ran that the stage's call graph does not contain.
    CallGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub ty: String,
    pub scope: String,
    pub instances: Vec<usize>,
    pub detail: String,
}

fn verdict(report: &ClassificationReport, i: &Instance) -> Option<(SizeType, String)> {
    let stage = report.stage(&i.ty, &i.stage)?;
    if stage == SizeType::Variable {
        let p = report.phase(&i.ty, &i.stage, &i.phase)?;
        return Some((p, i.scope()));
    }
    Some((stage, i.stage.clone()))
}

/// Checks observed data sizes against the classification: every instance
/// of a fixed-size type keeps one size, and all instances of a StaticFixed
/// type in one scope share it.
pub fn check_soundness(report: &ClassificationReport, trace: &OracleTrace) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut fixed: BTreeMap<(String, String), Vec<&Instance>> = BTreeMap::new();
    for i in &trace.instances {
        let Some((v, scope)) = verdict(report, i) else {
            continue;
        };
        if !v.decomposable() {
            continue;
        }
        if i.timeline.windows(2).any(|w| w[0] != w[1]) {
            out.push(Violation {
                kind: ViolationKind::RuntimeFixed,
                ty: i.ty.clone(),
                scope: scope.clone(),
                instances: vec![i.id],
                detail: format!(
                    "{} is {v} in {scope} but instance {} changed size: {:?}",
                    i.ty, i.id, i.timeline
                ),
            });
        }
        if v == SizeType::StaticFixed {
            fixed.entry((i.ty.clone(), scope)).or_default().push(i);
        }
    }
    for ((ty, scope), insts) in fixed {
        let first = insts[0].timeline[0];
        let odd: Vec<&Instance> = insts
            .iter()
            .copied()
            .filter(|i| i.timeline[0] != first)
            .collect();
        if let Some(o) = odd.first() {
            out.push(Violation {
                kind: ViolationKind::StaticFixed,
                ty: ty.clone(),
                scope: scope.clone(),
                instances: std::iter::once(insts[0].id).chain(odd.iter().map(|i| i.id)).collect(),
                detail: format!(
                    "{ty} is StaticFixed in {scope} but instance {} has size {first} and instance {} has size {}",
                    insts[0].id, o.id, o.timeline[0]
                ),
            });
        }
    }
    out
}

/// Methods that ran in a stage but are missing from its call graph.
pub fn check_call_graphs(
    program: &Program,
    analysis: &Analysis,
    trace: &OracleTrace,
) -> Result<Vec<Violation>, EngineError> {
    let mut out = Vec::new();
    for (stage, methods) in &trace.invoked {
        let Some(st) = program.job.stage(stage) else {
            continue;
        };
        let cg = Scope::stage(program, analysis, st)?.cg;
        for m in methods {
            if !cg.contains(&MethodRef::Ir(m.clone())) {
                out.push(Violation {
                    kind: ViolationKind::CallGraph,
                    ty: String::new(),
                    scope: stage.clone(),
                    instances: Vec::new(),
                    detail: format!("`{m}` ran in {stage} but is not in its call graph"),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::Verdict;

    fn report(ty: &str, v: SizeType) -> ClassificationReport {
        let mut r = ClassificationReport::default();
        r.stages.insert(
            (ty.into(), "s".into()),
            Verdict {
                size: v,
                evidence: vec![],
            },
        );
        r
    }

    fn trace(sizes: &[&[u64]]) -> OracleTrace {
        let mut t = OracleTrace::new();
        t.set_scope("s", "p");
        for s in sizes {
            let i = t.record("T", Origin::New, s[0]);
            for &x in &s[1..] {
                t.update(i, x);
            }
        }
        t
    }

    #[test]
    fn empty_trace_is_sound() {
        assert!(
            check_soundness(&report("T", SizeType::StaticFixed), &OracleTrace::new()).is_empty()
        );
    }

    #[test]
    fn forced_static_with_varying_sizes_is_one_violation() {
        let v = check_soundness(
            &report("T", SizeType::StaticFixed),
            &trace(&[&[40], &[40], &[72]]),
        );
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::StaticFixed);
        assert_eq!(v[0].ty, "T");
        assert_eq!(v[0].instances, vec![0, 2]);
    }

    #[test]
    fn runtime_fixed_allows_different_instances() {
        assert!(check_soundness(
            &report("T", SizeType::RuntimeFixed),
            &trace(&[&[40], &[72]])
        )
        .is_empty());
        let v = check_soundness(&report("T", SizeType::RuntimeFixed), &trace(&[&[40, 48]]));
        assert_eq!(v[0].kind, ViolationKind::RuntimeFixed);
    }

    #[test]
    fn variable_types_are_not_checked() {
        assert!(
            check_soundness(&report("T", SizeType::Variable), &trace(&[&[8, 16, 24]])).is_empty()
        );
    }
}
