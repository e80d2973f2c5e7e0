use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::classify::{
    classify_program, is_fixed_length, ClassificationReport, Scope, SizeType, SymbolicValue,
};
use crate::containers::{assign_ownership, ContainerKind as HolderKind, Holder, Role};
use crate::ir::{
    visit_stmts, Analysis, ContainerDecl, ContainerKind, MethodRef, Operand, PhaseDecl, Program,
    StageDecl, StmtKind,
};
use crate::pagestore::{compute_data_size, compute_layout, Layout};

use super::EngineError;

/// Verdict and layout of one type as a container stores it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypePlan {
    pub ty: String,
    pub verdict: SizeType,
    pub layout: Option<Layout>,
    pub data_size: Option<String>,
    /// Why there is no layout.
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "decision", rename_all = "kebab-case")]
pub enum Decision {
    /// Records become byte segments in the container's own page group.
    Decompose,
    Objects {
        reason: String,
    },
    /// Secondary sharing the primary's page group.
    Share {
        primary: String,
    },
    /// Secondary holding pointers into the primary's page group.
    Pointers {
        primary: String,
    },
}

impl Decision {
    pub fn uses_pages(&self) -> bool {
        !matches!(self, Decision::Objects { .. })
    }
}

/// How a phase that only forwards its cached input is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sharing {
    None,
    /// Every record is forwarded exactly once: the sink shares the source's pages.
    Share,
    /// Some records are forwarded: the sink points at them.
    Subset,
    /// Records are forwarded into a sort shuffle by pointer.
    PointerSort,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainerPlan {
    pub name: String,
    pub kind: ContainerKind,
    /// `stage/phase` that writes the container, if any.
    pub writer: Option<String>,
    pub verdict: SizeType,
    /// Element type, or key type of keyed containers.
    pub elem: Option<TypePlan>,
    pub value: Option<TypePlan>,
    pub group: Option<TypePlan>,
    pub combine: Option<String>,
    pub role: Role,
    pub decision: Decision,
    /// Combined values overwrite their segment.
    pub in_place: bool,
    /// Key and value share one allocation and no pointer array.
    pub elide_pointers: bool,
    /// Reading scopes in which the element type is not fixed-size; a
    /// size-changing write-back there turns blocks back into objects.
    pub reconstruct_in: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhasePlan {
    pub stage: String,
    pub phase: String,
    pub source: String,
    pub udf: String,
    pub sink: String,
    pub sharing: Sharing,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExecutionPlan {
    pub containers: Vec<ContainerPlan>,
    pub phases: Vec<PhasePlan>,
    #[serde(skip)]
    pub report: ClassificationReport,
}

impl ExecutionPlan {
    pub fn container(&self, name: &str) -> Option<&ContainerPlan> {
        self.containers.iter().find(|c| c.name == name)
    }

    pub fn phase(&self, stage: &str, phase: &str) -> Option<&PhasePlan> {
        self.phases
            .iter()
            .find(|p| p.stage == stage && p.phase == phase)
    }

    /// Human-readable plan: per container its verdict, role, decision and
    /// layout offsets; then the phases.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.containers {
            let _ = writeln!(
                out,
                "container {} ({}) written in {}",
                c.name,
                c.kind.keyword(),
                c.writer.as_deref().unwrap_or("-")
            );
            let _ = writeln!(out, "  verdict {}  role {:?}", c.verdict, c.role);
            let decision = match &c.decision {
                Decision::Decompose => "decompose".to_string(),
                Decision::Objects { reason } => format!("objects ({reason})"),
                Decision::Share { primary } => format!("share pages of {primary}"),
                Decision::Pointers { primary } => format!("pointers into {primary}"),
            };
            let _ = writeln!(out, "  decision {decision}");
            if c.in_place {
                let _ = writeln!(
                    out,
                    "  combine in place{}",
                    if c.elide_pointers {
                        ", pointers elided"
                    } else {
                        ""
                    }
                );
            }
            for (label, tp) in [
                ("element", &c.elem),
                ("value", &c.value),
                ("group", &c.group),
            ] {
                let Some(tp) = tp else { continue };
                let label = if c.kind.is_keyed() && label == "element" {
                    "key"
                } else {
                    label
                };
                let _ = write!(out, "  {label} {} {}", tp.ty, tp.verdict);
                match (&tp.data_size, &tp.reason) {
                    (Some(ds), _) => {
                        let _ = writeln!(out, " dataSize {ds}");
                    }
                    (None, Some(r)) => {
                        let _ = writeln!(out, " ({r})");
                    }
                    _ => out.push('\n'),
                }
                if let Some(l) = &tp.layout {
                    if matches!(l, Layout::Struct { .. }) {
                        for (path, off) in l.offset_table() {
                            match off {
                                Some(o) => {
                                    let _ = writeln!(out, "    {path:<24} @{o}");
                                }
                                None => {
                                    let _ = writeln!(out, "    {path:<24} @dynamic");
                                }
                            }
                        }
                    }
                }
            }
            if !c.reconstruct_in.is_empty() {
                let _ = writeln!(out, "  may reconstruct in {}", c.reconstruct_in.join(", "));
            }
        }
        for p in &self.phases {
            let _ = write!(
                out,
                "phase {}/{}: {} -> {} via {}",
                p.stage, p.phase, p.source, p.sink, p.udf
            );
            match p.sharing {
                Sharing::None => out.push('\n'),
                s => {
                    let _ = writeln!(
                        out,
                        " [{}]",
                        serde_json::to_value(s)
                            .unwrap_or_default()
                            .as_str()
                            .unwrap_or("")
                    );
                }
            }
        }
        out
    }
}

fn const_len(
    arr: &str,
    via: Option<(&str, &str)>,
    scope: &Scope,
    analysis: &Analysis,
) -> Option<usize> {
    let f = is_fixed_length(arr, via, scope, analysis);
    if !f.fixed {
        return None;
    }
    match f.lengths.first() {
        Some((_, SymbolicValue::Const(n))) if *n >= 0 => Some(*n as usize),
        _ => None,
    }
}

fn type_plan(
    ty: &str,
    verdict: SizeType,
    scope: &Scope,
    program: &Program,
    analysis: &Analysis,
) -> TypePlan {
    let mut tp = TypePlan {
        ty: ty.to_string(),
        verdict,
        layout: None,
        data_size: None,
        reason: None,
    };
    if !verdict.decomposable() {
        tp.reason = Some(format!("{ty} is {verdict} in {}", scope.name));
        return tp;
    }
    let cl = |a: &str, via: Option<(&str, &str)>| const_len(a, via, scope, analysis);
    match compute_layout(ty, verdict, program, &analysis.type_sets, &cl) {
        Ok(l) => {
            tp.data_size = Some(compute_data_size(&l).to_string());
            tp.layout = Some(l);
        }
        Err(e) => tp.reason = Some(e.to_string()),
    }
    tp
}

fn verdict_in(report: &ClassificationReport, ty: &str, stage: &str, phase: &str) -> SizeType {
    if Program::is_primitive(ty) {
        return SizeType::StaticFixed;
    }
    report
        .phase(ty, stage, phase)
        .or_else(|| report.local(ty))
        .unwrap_or(SizeType::Variable)
}

/// Whether `phase` only forwards the records of its cached source, and how.
fn sharing_of(
    program: &Program,
    phase: &PhaseDecl,
    src: &ContainerDecl,
    sink: &ContainerDecl,
    scope: &Scope,
) -> Sharing {
    if src.kind != ContainerKind::Cache
        || !matches!(sink.kind, ContainerKind::Cache | ContainerKind::ShuffleSort)
    {
        return Sharing::None;
    }
    let held = match sink.kind {
        ContainerKind::Cache => &sink.ty,
        _ => &sink.value_ty,
    };
    if src.ty.is_none() || held != &src.ty {
        return Sharing::None;
    }
    let Some(m) = program.method(&phase.udf) else {
        return Sharing::None;
    };
    if m.params.len() != 1 {
        return Sharing::None;
    }
    let p = m.params[0].name.as_str();
    let mut ok = true;
    let mut returns = false;
    visit_stmts(&m.body, &mut |s| match &s.kind {
        StmtKind::Emit { key, value } => {
            ok &= *value == Operand::Var(p.to_string());
            ok &= key.is_some() == (sink.kind == ContainerKind::ShuffleSort);
            if let Some(Operand::Var(k)) = key {
                ok &= k != p;
            }
        }
        StmtKind::Return(_) => returns = true,
        StmtKind::Store { .. } | StmtKind::AStore { .. } => ok = false,
        k => {
            if dst_of(k) == Some(p) {
                ok = false;
            }
        }
    });
    // Nothing else reachable may emit or write into existing objects.
    for node in &scope.cg.nodes {
        let MethodRef::Ir(name) = node else { continue };
        if name == &phase.udf {
            continue;
        }
        let Some(other) = program.method(name) else {
            continue;
        };
        let ctor = other.is_constructor();
        visit_stmts(&other.body, &mut |s| match &s.kind {
            StmtKind::Emit { .. } | StmtKind::AStore { .. } => ok = false,
            StmtKind::Store { obj, .. } if !(ctor && obj == "this") => ok = false,
            _ => {}
        });
    }
    if !ok {
        return Sharing::None;
    }
    if sink.kind == ContainerKind::ShuffleSort {
        return Sharing::PointerSort;
    }
    let top_emits = m
        .body
        .iter()
        .filter(|s| matches!(s.kind, StmtKind::Emit { .. }))
        .count();
    let all_emits = {
        let mut n = 0;
        visit_stmts(&m.body, &mut |s| {
            n += matches!(s.kind, StmtKind::Emit { .. }) as usize
        });
        n
    };
    if top_emits == 1 && all_emits == 1 && !returns {
        Sharing::Share
    } else {
        Sharing::Subset
    }
}

fn dst_of(k: &StmtKind) -> Option<&str> {
    match k {
        StmtKind::Const { dst, .. }
        | StmtKind::Copy { dst, .. }
        | StmtKind::Global { dst, .. }
        | StmtKind::Read { dst, .. }
        | StmtKind::Bin { dst, .. }
        | StmtKind::Un { dst, .. }
        | StmtKind::New { dst, .. }
        | StmtKind::NewArray { dst, .. }
        | StmtKind::Load { dst, .. }
        | StmtKind::ALoad { dst, .. }
        | StmtKind::ALen { dst, .. } => Some(dst),
        StmtKind::Call { dst, .. } | StmtKind::Invoke { dst, .. } => dst.as_deref(),
        _ => None,
    }
}

fn holder_kind(k: ContainerKind) -> Option<HolderKind> {
    match k {
        ContainerKind::Cache => Some(HolderKind::CacheBlock),
        ContainerKind::ShuffleSort => Some(HolderKind::ShuffleSort),
        ContainerKind::ShuffleHashReduce => Some(HolderKind::ShuffleHashReduce),
        ContainerKind::ShuffleHashGroup => Some(HolderKind::ShuffleHashGroup),
        _ => None,
    }
}

/// Classifies the program and decides, per container, whether and how its
/// records are decomposed.
pub fn plan_job(program: &Program, analysis: &Analysis) -> Result<ExecutionPlan, EngineError> {
    let report = classify_program(program, analysis)?;
    let job = &program.job;
    let mut scopes: BTreeMap<(String, String), Scope> = BTreeMap::new();
    let mut order: Vec<(&StageDecl, &PhaseDecl)> = Vec::new();
    for st in &job.stages {
        for ph in &st.phases {
            scopes.insert(
                (st.name.clone(), ph.name.clone()),
                Scope::phase(program, analysis, st, ph)?,
            );
            order.push((st, ph));
        }
    }
    let lookup = |name: &str| {
        job.container(name)
            .ok_or_else(|| EngineError::Job(format!("unknown container `{name}`")))
    };

    // Phase plans and sharing.
    let mut phases = Vec::new();
    for (st, ph) in &order {
        let scope = &scopes[&(st.name.clone(), ph.name.clone())];
        let sharing = sharing_of(program, ph, lookup(&ph.source)?, lookup(&ph.sink)?, scope);
        phases.push(PhasePlan {
            stage: st.name.clone(),
            phase: ph.name.clone(),
            source: ph.source.clone(),
            udf: ph.udf.clone(),
            sink: ph.sink.clone(),
            sharing,
        });
    }

    // Object sets and ownership.
    let mut set_of: BTreeMap<String, String> = BTreeMap::new();
    let mut sets: BTreeMap<String, Vec<Holder>> = BTreeMap::new();
    for (i, p) in phases.iter().enumerate() {
        if let Some(src_set) = set_of.get(&p.source).cloned() {
            sets.entry(src_set).or_default().push(Holder {
                container: format!("{}/{}:vars", p.stage, p.phase),
                kind: HolderKind::UdfVars,
                created: i,
            });
        }
        let sink = lookup(&p.sink)?;
        let Some(kind) = holder_kind(sink.kind) else {
            continue;
        };
        if set_of.contains_key(&p.sink) {
            continue;
        }
        let set = match (p.sharing, set_of.get(&p.source)) {
            (Sharing::None, _) | (_, None) => p.sink.clone(),
            (_, Some(s)) => s.clone(),
        };
        set_of.insert(p.sink.clone(), set.clone());
        sets.entry(set).or_default().push(Holder {
            container: p.sink.clone(),
            kind,
            created: i,
        });
    }
    let roles = assign_ownership(&sets);
    let primary_of = |set: &str| {
        roles
            .iter()
            .find(|((s, _), r)| s == set && **r == Role::Primary)
            .map(|((_, c), _)| c.clone())
    };

    let mut containers: Vec<ContainerPlan> = Vec::new();
    for c in &job.containers {
        let writer = phases.iter().find(|p| p.sink == c.name);
        let reader = phases.iter().find(|p| p.source == c.name);
        let Some(at) = writer.or(reader) else {
            return Err(EngineError::Job(format!(
                "container `{}` is never used",
                c.name
            )));
        };
        let scope = &scopes[&(at.stage.clone(), at.phase.clone())];
        let tp = |ty: &Option<String>| {
            ty.as_ref().map(|t| {
                let v = verdict_in(&report, t, &at.stage, &at.phase);
                type_plan(t, v, scope, program, analysis)
            })
        };
        let elem = tp(&c.ty);
        let value = tp(&c.value_ty);
        let group = tp(&c.group);
        let verdict = match c.kind {
            ContainerKind::ShuffleHashGroup => group.as_ref().map(|g| g.verdict),
            k if k.is_keyed() => match (&elem, &value) {
                (Some(a), Some(b)) => Some(a.verdict.max(b.verdict)),
                _ => None,
            },
            _ => elem.as_ref().map(|e| e.verdict),
        }
        .unwrap_or(SizeType::Variable);

        let set = set_of.get(&c.name);
        let role = match set {
            Some(s) => roles
                .get(&(s.clone(), c.name.clone()))
                .copied()
                .unwrap_or(Role::Primary),
            None => Role::Primary,
        };
        let has = |t: &Option<TypePlan>| t.as_ref().and_then(|t| t.layout.as_ref()).is_some();
        let is_static = |t: &Option<TypePlan>| {
            t.as_ref()
                .and_then(|t| t.layout.as_ref())
                .and_then(Layout::static_size)
                .is_some()
        };
        let no_layout = |t: &Option<TypePlan>| {
            t.as_ref()
                .and_then(|t| t.reason.clone())
                .unwrap_or_else(|| "no element type".to_string())
        };
        let sharing = writer.map(|w| w.sharing).unwrap_or(Sharing::None);
        let mut in_place = false;
        let mut elide = false;
        let decision = match c.kind {
            ContainerKind::Input => Decision::Objects {
                reason: "input records are streamed".into(),
            },
            ContainerKind::Reduce => Decision::Objects {
                reason: "driver-side accumulator".into(),
            },
            ContainerKind::Output => Decision::Objects {
                reason: "job output".into(),
            },
            ContainerKind::ShuffleHashGroup => Decision::Objects {
                reason: "value lists grow while the buffer fills".into(),
            },
            ContainerKind::Cache | ContainerKind::ShuffleSort
                if role == Role::Secondary && sharing != Sharing::None =>
            {
                let primary = set.and_then(|s| primary_of(s)).unwrap_or_default();
                let prim_pages = containers
                    .iter()
                    .find(|p| p.name == primary)
                    .map(|p| p.decision.uses_pages())
                    .unwrap_or(false);
                if !prim_pages {
                    Decision::Objects {
                        reason: format!("primary {primary} keeps objects"),
                    }
                } else if sharing == Sharing::Share {
                    Decision::Share { primary }
                } else if sharing == Sharing::PointerSort && !has(&elem) {
                    Decision::Objects {
                        reason: no_layout(&elem),
                    }
                } else {
                    Decision::Pointers { primary }
                }
            }
            ContainerKind::Cache => {
                if has(&elem) {
                    Decision::Decompose
                } else {
                    Decision::Objects {
                        reason: no_layout(&elem),
                    }
                }
            }
            ContainerKind::ShuffleSort => {
                if has(&elem) && has(&value) {
                    Decision::Decompose
                } else if !has(&elem) {
                    Decision::Objects {
                        reason: no_layout(&elem),
                    }
                } else {
                    Decision::Objects {
                        reason: no_layout(&value),
                    }
                }
            }
            ContainerKind::ShuffleHashReduce => {
                in_place = is_static(&value);
                elide = in_place && is_static(&elem);
                if has(&elem) || in_place {
                    Decision::Decompose
                } else {
                    Decision::Objects {
                        reason: no_layout(&elem),
                    }
                }
            }
        };
        let mut reconstruct_in = Vec::new();
        if decision.uses_pages() && c.kind == ContainerKind::Cache {
            if let Some(t) = &c.ty {
                for p in phases.iter().filter(|p| p.source == c.name) {
                    if !verdict_in(&report, t, &p.stage, &p.phase).decomposable() {
                        reconstruct_in.push(format!("{}/{}", p.stage, p.phase));
                    }
                }
            }
        }
        containers.push(ContainerPlan {
            name: c.name.clone(),
            kind: c.kind,
            writer: writer.map(|w| format!("{}/{}", w.stage, w.phase)),
            verdict,
            elem,
            value,
            group,
            combine: c.combine.clone(),
            role,
            decision,
            in_place,
            elide_pointers: elide,
            reconstruct_in,
        });
    }
    Ok(ExecutionPlan {
        containers,
        phases,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn plan(src: &str) -> ExecutionPlan {
        let p = parse_program(src).unwrap();
        let a = Analysis::new(&p).unwrap();
        plan_job(&p, &a).unwrap()
    }

    const SHARE: &str = "
class P
  field x long final
method P.<init>(x long)
  (store this x x)
end
method mk(x long)
  (new p P <init> x)
  (emit p)
end
method keep(p P)
  (emit p)
end
method pick(p P)
  (load x p x)
  (gt c x 3)
  (if c (then (emit p)))
end
method bykey(p P)
  (load x p x)
  (emit x p)
end
container in input long
container a cache P
container b cache P
container c cache P
container s shuffle-sort long P
stage s1
  phase build source=in udf=mk sink=a
stage s2
  phase copy source=a udf=keep sink=b
stage s3
  phase filter source=a udf=pick sink=c
stage s4
  phase sort source=a udf=bykey sink=s
";

    #[test]
    fn forwarding_phases_share_or_point() {
        let pl = plan(SHARE);
        assert_eq!(pl.phase("s2", "copy").unwrap().sharing, Sharing::Share);
        assert_eq!(pl.phase("s3", "filter").unwrap().sharing, Sharing::Subset);
        assert_eq!(
            pl.phase("s4", "sort").unwrap().sharing,
            Sharing::PointerSort
        );
        let a = pl.container("a").unwrap();
        assert_eq!(a.role, Role::Primary);
        assert_eq!(a.decision, Decision::Decompose);
        assert_eq!(
            pl.container("b").unwrap().decision,
            Decision::Share {
                primary: "a".into()
            }
        );
        assert_eq!(
            pl.container("c").unwrap().decision,
            Decision::Pointers {
                primary: "a".into()
            }
        );
        assert_eq!(
            pl.container("s").unwrap().decision,
            Decision::Pointers {
                primary: "a".into()
            }
        );
        assert_eq!(pl.container("b").unwrap().role, Role::Secondary);
    }

    #[test]
    fn every_container_has_a_verdict_and_role() {
        let pl = plan(SHARE);
        assert_eq!(pl.containers.len(), 5);
        assert_eq!(pl.container("in").unwrap().verdict, SizeType::StaticFixed);
        assert!(pl.render().contains("container a (cache)"));
    }
}
