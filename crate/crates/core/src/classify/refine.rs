use std::collections::{BTreeMap, BTreeSet};

use crate::ir::{
    array_element, build_call_graph, is_ctor_name, lineage_roots, phase_roots, stage_roots,
    Analysis, CallGraph, IrError, MethodRef, PhaseDecl, Program, SiteKind, StageDecl, Stmt,
    StmtKind, ELEMENT_FIELD,
};

use super::symbolic::{symbolic_propagate, SymbolicEnv, SymbolicValue};
use super::SizeType;

/// An analysis scope: the methods that run in it, plus the lineage of methods
/// that may have allocated the objects it observes.
#[derive(Debug, Clone)]
pub struct Scope {
    pub name: String,
    pub cg: CallGraph,
    pub lineage: CallGraph,
    pub sym: SymbolicEnv,
}

impl Scope {
    pub fn stage(
        program: &Program,
        analysis: &Analysis,
        stage: &StageDecl,
    ) -> Result<Scope, IrError> {
        let phases: Vec<&PhaseDecl> = stage.phases.iter().collect();
        Self::build(
            stage.name.clone(),
            &stage_roots(program, stage),
            &phases,
            program,
            analysis,
        )
    }

    pub fn phase(
        program: &Program,
        analysis: &Analysis,
        stage: &StageDecl,
        phase: &PhaseDecl,
    ) -> Result<Scope, IrError> {
        Self::build(
            format!("{}/{}", stage.name, phase.name),
            &phase_roots(program, phase),
            &[phase],
            program,
            analysis,
        )
    }

    /// A scope over explicit root methods, with no data lineage beyond them.
    pub fn from_roots(
        name: &str,
        roots: &[MethodRef],
        program: &Program,
        analysis: &Analysis,
    ) -> Result<Scope, IrError> {
        let cg = build_call_graph(name, roots, program, &analysis.pta)?;
        let sym = symbolic_propagate(&cg, program, &analysis.pta);
        Ok(Scope {
            name: name.to_string(),
            lineage: cg.clone(),
            cg,
            sym,
        })
    }

    fn build(
        name: String,
        roots: &[MethodRef],
        phases: &[&PhaseDecl],
        program: &Program,
        analysis: &Analysis,
    ) -> Result<Scope, IrError> {
        let cg = build_call_graph(&name, roots, program, &analysis.pta)?;
        let lineage = build_call_graph(
            &name,
            &lineage_roots(program, phases),
            program,
            &analysis.pta,
        )?;
        let sym = symbolic_propagate(&lineage, program, &analysis.pta);
        Ok(Scope {
            name,
            cg,
            lineage,
            sym,
        })
    }
}

/// Result of [`is_fixed_length`] with the observed lengths per allocation site.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedLength {
    pub fixed: bool,
    pub lengths: Vec<(String, SymbolicValue)>,
}

/// Whether every array of type `array_ty` stored into `field` (or, for
/// `None`, every array of that type) within the scope's lineage is created
/// with one and the same non-`Top` symbolic length.
pub fn is_fixed_length(
    array_ty: &str,
    field: Option<(&str, &str)>,
    scope: &Scope,
    analysis: &Analysis,
) -> FixedLength {
    let pta = &analysis.pta;
    let ids: Vec<_> = match field {
        Some((t, f)) => pta.field_sites(t, f).into_iter().collect(),
        None => pta.sites.iter().map(|s| s.id).collect(),
    };
    let mut lengths = Vec::new();
    for id in ids {
        let site = pta.site(id);
        if site.ty != array_ty || !scope.lineage.contains(&site.method) {
            continue;
        }
        let v = match &site.kind {
            SiteKind::NewArray { len } => scope.sym.operand(&site.method, len),
            _ => SymbolicValue::Top,
        };
        lengths.push((
            format!("{}@{}:{}", site.method, site.span.line, site.span.col),
            v,
        ));
    }
    let fixed = match lengths.first() {
        None => true,
        Some((_, first)) => !first.is_top() && lengths.iter().all(|(_, v)| v == first),
    };
    FixedLength { fixed, lengths }
}

/// Whether field `field` of `owner` is assigned only during construction,
/// at most once along any constructor calling sequence, within the scope.
pub fn is_init_only(
    owner: &str,
    field: &str,
    scope: &Scope,
    program: &Program,
    analysis: &Analysis,
) -> Result<(), String> {
    if field == ELEMENT_FIELD {
        return Err(format!("{owner} elements are always assignable"));
    }
    let declared_final = program
        .fields_of(owner)
        .into_iter()
        .any(|(n, _, fin)| n == field && fin);
    if declared_final {
        return Ok(());
    }
    let mut ctors: BTreeSet<String> = BTreeSet::new();
    for st in &analysis.pta.stores {
        if st.field != field || !st.owners.contains(owner) || !scope.cg.contains(&st.method) {
            continue;
        }
        let in_own_ctor = match &st.method {
            MethodRef::Ir(q) => program
                .method(q)
                .is_some_and(|d| d.is_constructor() && d.owner.as_deref() == Some(owner)),
            MethodRef::GroupInsert(c) => {
                return Err(format!(
                    "{owner}.{field} is appended to by grouping container {c}"
                ));
            }
        };
        if !(in_own_ctor && st.on_this) {
            return Err(format!(
                "{owner}.{field} is assigned outside its constructors in {} at {}:{}",
                st.method, st.span.line, st.span.col
            ));
        }
        if let MethodRef::Ir(q) = &st.method {
            ctors.insert(q.clone());
        }
    }
    // Every constructor reachable in scope, not only those storing directly,
    // may start a calling sequence through delegation.
    for m in &scope.cg.nodes {
        let MethodRef::Ir(q) = m else { continue };
        let Some(d) = program.method(q) else { continue };
        if d.is_constructor() && d.owner.as_deref() == Some(owner) {
            ctors.insert(q.clone());
        }
    }
    for q in ctors {
        let mut stack = Vec::new();
        let n = ctor_store_count(program, owner, &q, field, &mut stack);
        if n > 1 {
            return Err(format!(
                "{owner}.{field} may be assigned more than once by constructor {q}"
            ));
        }
    }
    Ok(())
}

/// Upper bound (saturating at 2) on stores to `this.field` along one run of
/// constructor `q`, including delegated constructors.
fn ctor_store_count(
    program: &Program,
    owner: &str,
    q: &str,
    field: &str,
    stack: &mut Vec<String>,
) -> u32 {
    if stack.iter().any(|s| s == q) {
        return 2;
    }
    let Some(def) = program.method(q) else {
        return 0;
    };
    stack.push(q.to_string());
    let n = block_count(program, owner, &def.body, field, stack);
    stack.pop();
    n
}

fn block_count(
    program: &Program,
    owner: &str,
    body: &[Stmt],
    field: &str,
    stack: &mut Vec<String>,
) -> u32 {
    let mut n = 0u32;
    for s in body {
        let k = match &s.kind {
            StmtKind::Store { obj, field: f, .. } if obj == "this" && f == field => 1,
            StmtKind::InitCall { ctor, .. } if is_ctor_name(ctor) => {
                ctor_store_count(program, owner, &format!("{owner}.{ctor}"), field, stack)
            }
            StmtKind::If { then, els, .. } => block_count(program, owner, then, field, stack)
                .max(block_count(program, owner, els, field, stack)),
            StmtKind::While { body, .. } if block_count(program, owner, body, field, stack) > 0 => {
                2
            }
            _ => 0,
        };
        n = (n + k).min(2);
    }
    n
}

/// Scope-bound refinement state with memoised SRefine results.
pub struct Refiner<'a> {
    pub program: &'a Program,
    pub analysis: &'a Analysis,
    pub scope: &'a Scope,
    smemo: BTreeMap<(String, Option<(String, String)>), bool>,
    active: BTreeSet<String>,
    pub evidence: Vec<String>,
}

impl<'a> Refiner<'a> {
    pub fn new(program: &'a Program, analysis: &'a Analysis, scope: &'a Scope) -> Self {
        Refiner {
            program,
            analysis,
            scope,
            smemo: BTreeMap::new(),
            active: BTreeSet::new(),
            evidence: Vec::new(),
        }
    }

    /// Global classification of a type whose local verdict is `local`.
    pub fn classify_global(&mut self, ty: &str, local: SizeType) -> SizeType {
        if local == SizeType::RecurDef {
            return SizeType::RecurDef;
        }
        if Program::is_primitive(ty) || self.srefine(ty, None) {
            SizeType::StaticFixed
        } else if local == SizeType::RuntimeFixed || self.rrefine(ty) {
            SizeType::RuntimeFixed
        } else {
            SizeType::Variable
        }
    }

    /// True when every instance of `ty` reached through `via` has the same size.
    pub fn srefine(&mut self, ty: &str, via: Option<(&str, &str)>) -> bool {
        let key = (
            ty.to_string(),
            via.map(|(a, b)| (a.to_string(), b.to_string())),
        );
        if let Some(&r) = self.smemo.get(&key) {
            return r;
        }
        if !self.active.insert(ty.to_string()) {
            return false;
        }
        let mut ok = true;
        'fields: for (f, _, _) in self.program.fields_of(ty) {
            for m in self.analysis.type_sets.of(ty, &f) {
                if !Program::is_primitive(&m) && !self.srefine(&m, Some((ty, &f))) {
                    ok = false;
                    break 'fields;
                }
            }
        }
        if ok && array_element(ty).is_some() {
            let fl = is_fixed_length(ty, via, self.scope, self.analysis);
            if !fl.fixed {
                let seen: Vec<String> =
                    fl.lengths.iter().map(|(s, v)| format!("{s}={v}")).collect();
                let ctx = match via {
                    Some((t, f)) => format!(" in {t}.{f}"),
                    None => String::new(),
                };
                self.evidence.push(format!(
                    "{ty}{ctx} is not fixed-length in {}: {}",
                    self.scope.name,
                    seen.join(", ")
                ));
                ok = false;
            }
        }
        self.active.remove(ty);
        self.smemo.insert(key, ok);
        ok
    }

    /// True when every instance of `ty` keeps its size once constructed.
    pub fn rrefine(&mut self, ty: &str) -> bool {
        if !self.active.insert(format!("r:{ty}")) {
            return false;
        }
        let r = self.rrefine_inner(ty);
        self.active.remove(&format!("r:{ty}"));
        r
    }

    fn rrefine_inner(&mut self, ty: &str) -> bool {
        for (f, _, _) in self.program.fields_of(ty) {
            let mut analyze_field = false;
            for m in self.analysis.type_sets.of(ty, &f) {
                if Program::is_primitive(&m) || self.srefine(&m, Some((ty, &f))) {
                    continue;
                }
                if self.rrefine(&m) {
                    analyze_field = true;
                } else {
                    return false;
                }
            }
            if analyze_field {
                if let Err(why) = is_init_only(ty, &f, self.scope, self.program, self.analysis) {
                    self.evidence.push(why);
                    return false;
                }
            }
        }
        true
    }
}
