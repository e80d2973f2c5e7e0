use std::collections::{BTreeMap, BTreeSet};

use super::ast::*;
use super::pointsto::{MethodRef, PointsTo, TypeSets};
use super::IrError;

/// Field/element containment graph rooted at one type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeDependencyGraph {
    pub root: String,
    pub nodes: BTreeSet<String>,
    pub edges: BTreeSet<(String, String)>,
}

impl TypeDependencyGraph {
    pub fn successors<'a>(&'a self, n: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(a, _)| a == n)
            .map(|(_, b)| b.as_str())
    }
}

pub fn build_type_dependency_graph(
    root: &str,
    program: &Program,
    sets: &TypeSets,
) -> Result<TypeDependencyGraph, IrError> {
    if program.resolve(root).is_none() {
        return Err(IrError::UnknownType {
            name: root.to_string(),
            line: 0,
            col: 0,
        });
    }
    let mut g = TypeDependencyGraph {
        root: root.to_string(),
        nodes: BTreeSet::new(),
        edges: BTreeSet::new(),
    };
    let mut stack = vec![root.to_string()];
    while let Some(t) = stack.pop() {
        if !g.nodes.insert(t.clone()) {
            continue;
        }
        for (f, _, _) in program.fields_of(&t) {
            for member in sets.of(&t, &f) {
                g.edges.insert((t.clone(), member.clone()));
                stack.push(member);
            }
        }
    }
    Ok(g)
}

/// A directed cycle among non-primitive nodes, if any, as a node path whose
/// first and last entries coincide.
pub fn find_dependency_cycle(g: &TypeDependencyGraph) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    fn dfs(
        g: &TypeDependencyGraph,
        n: &str,
        marks: &mut BTreeMap<String, Mark>,
        path: &mut Vec<String>,
    ) -> Option<Vec<String>> {
        marks.insert(n.to_string(), Mark::Open);
        path.push(n.to_string());
        for s in g.successors(n) {
            if Program::is_primitive(s) {
                continue;
            }
            match marks.get(s) {
                Some(Mark::Open) => {
                    let start = path.iter().position(|p| p == s).unwrap_or(0);
                    let mut cyc = path[start..].to_vec();
                    cyc.push(s.to_string());
                    return Some(cyc);
                }
                Some(Mark::Done) => {}
                None => {
                    if let Some(c) = dfs(g, s, marks, path) {
                        return Some(c);
                    }
                }
            }
        }
        path.pop();
        marks.insert(n.to_string(), Mark::Done);
        None
    }
    let mut marks = BTreeMap::new();
    for n in &g.nodes {
        if Program::is_primitive(n) || marks.contains_key(n) {
            continue;
        }
        if let Some(c) = dfs(g, n, &mut marks, &mut Vec::new()) {
            return Some(c);
        }
    }
    None
}

pub fn has_dependency_cycle(g: &TypeDependencyGraph) -> bool {
    find_dependency_cycle(g).is_some()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CallEdge {
    pub caller: MethodRef,
    pub callee: MethodRef,
    pub line: u32,
    pub col: u32,
}

/// Methods reachable from a set of roots under type-set based dispatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallGraph {
    /// Synthetic entry label naming the analysed scope.
    pub entry: String,
    pub roots: Vec<MethodRef>,
    pub nodes: BTreeSet<MethodRef>,
    pub edges: BTreeSet<CallEdge>,
}

impl CallGraph {
    pub fn contains(&self, m: &MethodRef) -> bool {
        self.nodes.contains(m)
    }

    pub fn callees<'a>(&'a self, m: &'a MethodRef) -> impl Iterator<Item = &'a MethodRef> + 'a {
        self.edges
            .iter()
            .filter(move |e| &e.caller == m)
            .map(|e| &e.callee)
    }
}

pub fn build_call_graph(
    entry: &str,
    roots: &[MethodRef],
    program: &Program,
    pta: &PointsTo,
) -> Result<CallGraph, IrError> {
    let mut g = CallGraph {
        entry: entry.to_string(),
        roots: roots.to_vec(),
        nodes: BTreeSet::new(),
        edges: BTreeSet::new(),
    };
    let mut stack: Vec<MethodRef> = roots.to_vec();
    while let Some(m) = stack.pop() {
        if !g.nodes.insert(m.clone()) {
            continue;
        }
        let MethodRef::Ir(q) = &m else { continue };
        let def = program
            .method(q)
            .ok_or_else(|| IrError::UnknownMethod(q.clone()))?;
        let mut err = None;
        visit_stmts(&def.body, &mut |s| {
            let mut targets: Vec<String> = Vec::new();
            match &s.kind {
                StmtKind::Call { func, .. } => targets.push(func.clone()),
                StmtKind::New { ty, ctor, .. } => targets.push(format!("{ty}.{ctor}")),
                StmtKind::InitCall { ctor, .. } => {
                    targets.push(format!("{}.{ctor}", def.owner.clone().unwrap_or_default()))
                }
                StmtKind::Invoke { recv, method, .. } => {
                    for t in pta.var_types(&m, recv) {
                        targets.push(format!("{t}.{method}"));
                    }
                }
                _ => {}
            }
            for t in targets {
                if program.method(&t).is_none() {
                    err.get_or_insert(IrError::UnknownMethod(t));
                    continue;
                }
                let callee = MethodRef::Ir(t);
                g.edges.insert(CallEdge {
                    caller: m.clone(),
                    callee: callee.clone(),
                    line: s.span.line,
                    col: s.span.col,
                });
                stack.push(callee);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(g)
}

/// Roots of one phase: its UDF plus whatever the sink container runs on insert.
pub fn phase_roots(program: &Program, phase: &PhaseDecl) -> Vec<MethodRef> {
    let mut roots = vec![MethodRef::Ir(phase.udf.clone())];
    if let Some(sink) = program.job.container(&phase.sink) {
        if let Some(c) = &sink.combine {
            roots.push(MethodRef::Ir(c.clone()));
        }
        if sink.kind == ContainerKind::ShuffleHashGroup {
            roots.push(MethodRef::GroupInsert(sink.name.clone()));
        }
    }
    roots
}

pub fn stage_roots(program: &Program, stage: &StageDecl) -> Vec<MethodRef> {
    let mut roots = Vec::new();
    for ph in &stage.phases {
        for r in phase_roots(program, ph) {
            if !roots.contains(&r) {
                roots.push(r);
            }
        }
    }
    roots
}

/// Roots of `phases` plus those of every phase, in any stage, that produces
/// data they (transitively) read. Objects observed in a scope were allocated
/// somewhere in this lineage.
pub fn lineage_roots(program: &Program, phases: &[&PhaseDecl]) -> Vec<MethodRef> {
    let mut roots = Vec::new();
    let mut wanted: BTreeSet<String> = phases.iter().map(|p| p.source.clone()).collect();
    let mut included: BTreeSet<(String, String)> = BTreeSet::new();
    for ph in phases {
        included.insert((ph.udf.clone(), ph.sink.clone()));
        roots.extend(phase_roots(program, ph));
    }
    loop {
        let mut grew = false;
        for st in &program.job.stages {
            for ph in &st.phases {
                if wanted.contains(&ph.sink) && included.insert((ph.udf.clone(), ph.sink.clone())) {
                    roots.extend(phase_roots(program, ph));
                    wanted.insert(ph.source.clone());
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
    }
    let mut uniq = Vec::new();
    for r in roots {
        if !uniq.contains(&r) {
            uniq.push(r);
        }
    }
    uniq
}
