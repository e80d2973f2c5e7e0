//! Flow-insensitive, field-based, allocation-site points-to analysis.
//!
//! Every `new`/`newarray` statement is an allocation site. Objects that enter
//! from outside the program (workload input records, driver-supplied `read`
//! values) get external sites. Container traffic is modelled by treating each
//! container as a pseudo-field: `emit` stores into it, and the UDF reading the
//! container loads from it. Grouping shuffles get two synthetic sites (the
//! per-key record and its growing value array) owned by a synthetic insert
//! method, which is what lets the classifier see the growth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::ast::*;
use super::IrError;

/// A method node: either a declared IR method or the synthetic insert routine
/// of a grouping shuffle container.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodRef {
    Ir(String),
    GroupInsert(String),
}

impl fmt::Display for MethodRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodRef::Ir(q) => f.write_str(q),
            MethodRef::GroupInsert(c) => write!(f, "$group-insert:{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId(pub u32);

#[derive(Debug, Clone, PartialEq)]
pub enum SiteKind {
    New,
    NewArray {
        len: Operand,
    },
    /// Synthetic array grown by a grouping shuffle; its length is unknown.
    GroupArray,
    /// Synthetic per-key record of a grouping shuffle.
    GroupRecord,
    /// An object entering from outside the analysed code.
    External {
        origin: String,
    },
}

#[derive(Debug, Clone)]
pub struct AllocSite {
    pub id: SiteId,
    pub ty: String,
    pub method: MethodRef,
    pub kind: SiteKind,
    pub span: Span,
}

/// Key of a field-based points-to node: `(type, field)`; arrays use [`ELEMENT_FIELD`].
pub type FieldKey = (String, String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Key,
    Value,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Node {
    Var(MethodRef, String),
    Ret(MethodRef),
    Field(String, String),
    Emit(MethodRef, Part),
    Sink(String, Part),
}

/// One `store`/`astore` statement, resolved to the field types it may write.
#[derive(Debug, Clone)]
pub struct StoreFact {
    pub method: MethodRef,
    pub field: String,
    /// Types of the objects the store may write into.
    pub owners: BTreeSet<String>,
    /// The base of the store is the method's own `this`.
    pub on_this: bool,
    pub span: Span,
}

/// Result of the whole-program points-to analysis.
#[derive(Debug, Clone, Default)]
pub struct PointsTo {
    pub sites: Vec<AllocSite>,
    pts: BTreeMap<Node, BTreeSet<SiteId>>,
    pub stores: Vec<StoreFact>,
}

struct Solver<'p> {
    program: &'p Program,
    sites: Vec<AllocSite>,
    pts: BTreeMap<Node, BTreeSet<SiteId>>,
    changed: bool,
}

fn this_of(m: &MethodRef) -> Node {
    Node::Var(m.clone(), "this".into())
}

impl<'p> Solver<'p> {
    fn add_site(&mut self, ty: &str, method: &MethodRef, kind: SiteKind, span: Span) -> SiteId {
        let id = SiteId(self.sites.len() as u32);
        self.sites.push(AllocSite {
            id,
            ty: ty.to_string(),
            method: method.clone(),
            kind,
            span,
        });
        id
    }

    fn get(&self, n: &Node) -> BTreeSet<SiteId> {
        self.pts.get(n).cloned().unwrap_or_default()
    }

    fn add(&mut self, n: Node, s: impl IntoIterator<Item = SiteId>) {
        let e = self.pts.entry(n).or_default();
        for id in s {
            if e.insert(id) {
                self.changed = true;
            }
        }
    }

    fn flow(&mut self, from: &Node, to: Node) {
        let s = self.get(from);
        if !s.is_empty() {
            self.add(to, s);
        }
    }

    fn operand_pts(&self, m: &MethodRef, o: &Operand) -> BTreeSet<SiteId> {
        match o {
            Operand::Var(v) => self.get(&Node::Var(m.clone(), v.clone())),
            Operand::Lit(_) => BTreeSet::new(),
        }
    }

    fn bind_args(&mut self, caller: &MethodRef, callee: &MethodDef, args: &[Operand]) {
        let cref = MethodRef::Ir(callee.qualified());
        for (p, a) in callee.params.iter().zip(args) {
            let s = self.operand_pts(caller, a);
            self.add(Node::Var(cref.clone(), p.name.clone()), s);
        }
    }

    fn site_ty(&self, s: SiteId) -> &str {
        &self.sites[s.0 as usize].ty
    }
}

impl PointsTo {
    /// Runs the analysis over every method and container of `program`.
    pub fn analyze(program: &Program) -> Result<PointsTo, IrError> {
        let mut sv = Solver {
            program,
            sites: Vec::new(),
            pts: BTreeMap::new(),
            changed: true,
        };
        // Allocation sites are numbered in program order.
        let mut site_of: BTreeMap<(String, u32, u32, String), SiteId> = BTreeMap::new();
        for m in &program.methods {
            let mref = MethodRef::Ir(m.qualified());
            let mut local: Vec<(String, SiteKind, Span)> = Vec::new();
            visit_stmts(&m.body, &mut |s| match &s.kind {
                StmtKind::New { ty, .. } => local.push((ty.clone(), SiteKind::New, s.span)),
                StmtKind::NewArray { ty, len, .. } => {
                    local.push((ty.clone(), SiteKind::NewArray { len: len.clone() }, s.span))
                }
                StmtKind::Read { ty, name, .. } => {
                    for c in program.concrete_subtypes(ty) {
                        if !Program::is_primitive(&c) {
                            local.push((
                                c,
                                SiteKind::External {
                                    origin: format!("read:{name}"),
                                },
                                s.span,
                            ));
                        }
                    }
                }
                _ => {}
            });
            for (ty, kind, span) in local {
                let key = (m.qualified(), span.line, span.col, ty.clone());
                let id = sv.add_site(&ty, &mref, kind, span);
                site_of.insert(key, id);
            }
        }
        // Container-level sites.
        let mut group_sites: BTreeMap<String, (SiteId, SiteId)> = BTreeMap::new();
        let mut input_sites: BTreeMap<(String, usize), Vec<SiteId>> = BTreeMap::new();
        for c in &program.job.containers {
            if c.kind == ContainerKind::ShuffleHashGroup {
                let g = c.group.as_deref().unwrap_or_default();
                let v = c.value_ty.as_deref().unwrap_or_default();
                let mref = MethodRef::GroupInsert(c.name.clone());
                let rec = sv.add_site(g, &mref, SiteKind::GroupRecord, c.span);
                let arr = sv.add_site(&array_of(v), &mref, SiteKind::GroupArray, c.span);
                group_sites.insert(c.name.clone(), (rec, arr));
            }
        }
        for st in &program.job.stages {
            for ph in &st.phases {
                let src = program.job.container(&ph.source).expect("validated");
                if src.kind != ContainerKind::Input {
                    continue;
                }
                let udf = program.method(&ph.udf).expect("validated");
                for (i, p) in udf.params.iter().enumerate() {
                    let mut ids = Vec::new();
                    for c in program.concrete_subtypes(&p.ty) {
                        if !Program::is_primitive(&c) {
                            ids.push(sv.add_site(
                                &c,
                                &MethodRef::Ir(ph.udf.clone()),
                                SiteKind::External {
                                    origin: format!("input:{}", src.name),
                                },
                                src.span,
                            ));
                        }
                    }
                    input_sites.insert((ph.udf.clone(), i), ids);
                }
            }
        }

        while sv.changed {
            sv.changed = false;
            for m in &program.methods {
                let mref = MethodRef::Ir(m.qualified());
                let mut stmts = Vec::new();
                visit_stmts(&m.body, &mut |s| stmts.push(s));
                for s in stmts {
                    sv.step(&mref, m, s, &site_of)?;
                }
            }
            for c in &program.job.containers {
                let sink_v = Node::Sink(c.name.clone(), Part::Value);
                if let Some(comb) = &c.combine {
                    let cm = program.method(comb).expect("validated");
                    let cref = MethodRef::Ir(comb.clone());
                    for p in &cm.params {
                        sv.flow(&sink_v, Node::Var(cref.clone(), p.name.clone()));
                    }
                    sv.flow(&Node::Ret(cref), sink_v.clone());
                }
                if let Some(&(_, arr)) = group_sites.get(&c.name) {
                    let g = c.group.clone().unwrap_or_default();
                    let v = c.value_ty.clone().unwrap_or_default();
                    let fields = program
                        .class(&g)
                        .map(|k| k.fields.clone())
                        .unwrap_or_default();
                    if let [kf, vf, ..] = fields.as_slice() {
                        sv.flow(
                            &Node::Sink(c.name.clone(), Part::Key),
                            Node::Field(g.clone(), kf.name.clone()),
                        );
                        sv.add(Node::Field(g.clone(), vf.name.clone()), [arr]);
                    }
                    sv.flow(&sink_v, Node::Field(array_of(&v), ELEMENT_FIELD.into()));
                }
            }
            for st in &program.job.stages {
                for ph in &st.phases {
                    let src = program.job.container(&ph.source).expect("validated");
                    let udf = program.method(&ph.udf).expect("validated");
                    let uref = MethodRef::Ir(ph.udf.clone());
                    match src.kind {
                        ContainerKind::Input => {
                            for (i, p) in udf.params.iter().enumerate() {
                                let ids = input_sites
                                    .get(&(ph.udf.clone(), i))
                                    .cloned()
                                    .unwrap_or_default();
                                sv.add(Node::Var(uref.clone(), p.name.clone()), ids);
                            }
                        }
                        ContainerKind::ShuffleHashGroup => {
                            if let (Some(p), Some(&(rec, _))) =
                                (udf.params.first(), group_sites.get(&src.name))
                            {
                                sv.add(Node::Var(uref.clone(), p.name.clone()), [rec]);
                            }
                        }
                        k if k.is_keyed() => {
                            if let Some(p) = udf.params.first() {
                                sv.flow(
                                    &Node::Sink(src.name.clone(), Part::Key),
                                    Node::Var(uref.clone(), p.name.clone()),
                                );
                            }
                            if let Some(p) = udf.params.get(1) {
                                sv.flow(
                                    &Node::Sink(src.name.clone(), Part::Value),
                                    Node::Var(uref.clone(), p.name.clone()),
                                );
                            }
                        }
                        _ => {
                            if let Some(p) = udf.params.first() {
                                sv.flow(
                                    &Node::Sink(src.name.clone(), Part::Value),
                                    Node::Var(uref.clone(), p.name.clone()),
                                );
                            }
                        }
                    }
                    // Emits of every method reachable from the UDF land in the phase sink.
                    let reach = reachable_ir(program, &sv, &ph.udf);
                    for r in reach {
                        for part in [Part::Key, Part::Value] {
                            sv.flow(
                                &Node::Emit(r.clone(), part.clone()),
                                Node::Sink(ph.sink.clone(), part),
                            );
                        }
                    }
                }
            }
        }

        let mut stores = Vec::new();
        for m in &program.methods {
            let mref = MethodRef::Ir(m.qualified());
            visit_stmts(&m.body, &mut |s| {
                let (obj, field) = match &s.kind {
                    StmtKind::Store { obj, field, .. } => (obj, field.as_str()),
                    StmtKind::AStore { arr, .. } => (arr, ELEMENT_FIELD),
                    _ => return,
                };
                let owners = sv
                    .get(&Node::Var(mref.clone(), obj.clone()))
                    .into_iter()
                    .map(|id| sv.site_ty(id).to_string())
                    .collect();
                stores.push(StoreFact {
                    method: mref.clone(),
                    field: field.to_string(),
                    owners,
                    on_this: obj == "this" && m.owner.is_some(),
                    span: s.span,
                });
            });
        }
        for c in &program.job.containers {
            if c.kind != ContainerKind::ShuffleHashGroup {
                continue;
            }
            let g = c.group.clone().unwrap_or_default();
            let v = c.value_ty.clone().unwrap_or_default();
            let mref = MethodRef::GroupInsert(c.name.clone());
            if let Some(class) = program.class(&g) {
                for f in class.fields.iter().take(2) {
                    stores.push(StoreFact {
                        method: mref.clone(),
                        field: f.name.clone(),
                        owners: [g.clone()].into(),
                        on_this: false,
                        span: c.span,
                    });
                }
            }
            stores.push(StoreFact {
                method: mref,
                field: ELEMENT_FIELD.into(),
                owners: [array_of(&v)].into(),
                on_this: false,
                span: c.span,
            });
        }

        let pta = PointsTo {
            sites: sv.sites,
            pts: sv.pts,
            stores,
        };
        pta.check_compatibility(program)?;
        Ok(pta)
    }

    fn check_compatibility(&self, program: &Program) -> Result<(), IrError> {
        for (node, ids) in &self.pts {
            let Node::Field(ty, field) = node else {
                continue;
            };
            let declared = program
                .fields_of(ty)
                .into_iter()
                .find(|(n, _, _)| n == field)
                .map(|(_, d, _)| d);
            let Some(declared) = declared else { continue };
            for id in ids {
                let st = &self.sites[id.0 as usize].ty;
                if !program.is_subtype(st, &declared) {
                    return Err(IrError::IncompatibleAssignment {
                        field: format!("{ty}.{field}"),
                        declared,
                        assigned: st.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn site(&self, id: SiteId) -> &AllocSite {
        &self.sites[id.0 as usize]
    }

    /// Allocation sites that may flow into field `field` of objects of type `ty`.
    pub fn field_sites(&self, ty: &str, field: &str) -> BTreeSet<SiteId> {
        self.pts
            .get(&Node::Field(ty.to_string(), field.to_string()))
            .cloned()
            .unwrap_or_default()
    }

    pub fn var_sites(&self, method: &MethodRef, var: &str) -> BTreeSet<SiteId> {
        self.pts
            .get(&Node::Var(method.clone(), var.to_string()))
            .cloned()
            .unwrap_or_default()
    }

    /// Runtime types a variable may hold.
    pub fn var_types(&self, method: &MethodRef, var: &str) -> BTreeSet<String> {
        self.var_sites(method, var)
            .into_iter()
            .map(|s| self.site(s).ty.clone())
            .collect()
    }

    /// Per-field type-sets for every class and array field. Explicit
    /// annotations win; unassigned fields fall back to their declared type.
    pub fn type_sets(&self, program: &Program) -> Result<TypeSets, IrError> {
        let mut map = BTreeMap::new();
        for ty in program.composite_types() {
            let annotated: BTreeMap<String, Vec<String>> = program
                .class(&ty)
                .map(|c| {
                    c.fields
                        .iter()
                        .filter_map(|f| f.annotated.clone().map(|a| (f.name.clone(), a)))
                        .collect()
                })
                .unwrap_or_default();
            for (fname, declared, _) in program.fields_of(&ty) {
                let set: BTreeSet<String> = if let Some(a) = annotated.get(&fname) {
                    a.iter().cloned().collect()
                } else if Program::is_primitive(&declared) {
                    [declared.clone()].into()
                } else {
                    let inferred: BTreeSet<String> = self
                        .field_sites(&ty, &fname)
                        .into_iter()
                        .map(|s| self.site(s).ty.clone())
                        .collect();
                    if !inferred.is_empty() {
                        inferred
                    } else if matches!(program.resolve(&declared), Some(TyRef::Interface(_))) {
                        return Err(IrError::AbstractTypeSet {
                            field: format!("{ty}.{fname}"),
                            declared,
                        });
                    } else {
                        [declared.clone()].into()
                    }
                };
                map.insert((ty.clone(), fname), set);
            }
        }
        Ok(TypeSets { map })
    }
}

impl<'p> Solver<'p> {
    fn step(
        &mut self,
        m: &MethodRef,
        def: &MethodDef,
        s: &Stmt,
        site_of: &BTreeMap<(String, u32, u32, String), SiteId>,
    ) -> Result<(), IrError> {
        let program = self.program;
        let var = |v: &str| Node::Var(m.clone(), v.to_string());
        match &s.kind {
            StmtKind::New {
                dst,
                ty,
                ctor,
                args,
            } => {
                let id = site_of[&(def.qualified(), s.span.line, s.span.col, ty.clone())];
                self.add(var(dst), [id]);
                let q = format!("{ty}.{ctor}");
                let callee = program
                    .method(&q)
                    .ok_or(IrError::UnknownMethod(q.clone()))?;
                let cref = MethodRef::Ir(q);
                self.add(this_of(&cref), [id]);
                self.bind_args(m, callee, args);
            }
            StmtKind::NewArray { dst, ty, .. } => {
                let id = site_of[&(def.qualified(), s.span.line, s.span.col, ty.clone())];
                self.add(var(dst), [id]);
            }
            StmtKind::Read { dst, ty, .. } => {
                for c in program.concrete_subtypes(ty) {
                    if let Some(&id) = site_of.get(&(def.qualified(), s.span.line, s.span.col, c)) {
                        self.add(var(dst), [id]);
                    }
                }
            }
            StmtKind::Copy { dst, src } => self.flow(&var(src), var(dst)),
            StmtKind::Load { dst, obj, field } => {
                for id in self.get(&var(obj)) {
                    let t = self.site_ty(id).to_string();
                    self.flow(&Node::Field(t, field.clone()), var(dst));
                }
            }
            StmtKind::Store { obj, field, value } => {
                let v = self.operand_pts(m, value);
                for id in self.get(&var(obj)) {
                    let t = self.site_ty(id).to_string();
                    self.add(Node::Field(t, field.clone()), v.iter().copied());
                }
            }
            StmtKind::ALoad { dst, arr, .. } => {
                for id in self.get(&var(arr)) {
                    let t = self.site_ty(id).to_string();
                    self.flow(&Node::Field(t, ELEMENT_FIELD.into()), var(dst));
                }
            }
            StmtKind::AStore { arr, value, .. } => {
                let v = self.operand_pts(m, value);
                for id in self.get(&var(arr)) {
                    let t = self.site_ty(id).to_string();
                    self.add(Node::Field(t, ELEMENT_FIELD.into()), v.iter().copied());
                }
            }
            StmtKind::Call { dst, func, args } => {
                let callee = program
                    .method(func)
                    .ok_or(IrError::UnknownMethod(func.clone()))?;
                self.bind_args(m, callee, args);
                if let Some(d) = dst {
                    self.flow(&Node::Ret(MethodRef::Ir(func.clone())), var(d));
                }
            }
            StmtKind::Invoke {
                dst,
                recv,
                method,
                args,
            } => {
                for id in self.get(&var(recv)) {
                    let t = self.site_ty(id).to_string();
                    let Some(callee) = program.dispatch(&t, method) else {
                        return Err(IrError::UnknownMethod(format!("{t}.{method}")));
                    };
                    let cref = MethodRef::Ir(callee.qualified());
                    self.add(this_of(&cref), [id]);
                    self.bind_args(m, callee, args);
                    if let Some(d) = dst {
                        self.flow(&Node::Ret(cref), var(d));
                    }
                }
            }
            StmtKind::InitCall { ctor, args } => {
                let owner = def.owner.clone().unwrap_or_default();
                let q = format!("{owner}.{ctor}");
                let callee = program
                    .method(&q)
                    .ok_or(IrError::UnknownMethod(q.clone()))?;
                let cref = MethodRef::Ir(q);
                self.flow(&this_of(m), this_of(&cref));
                self.bind_args(m, callee, args);
            }
            StmtKind::Return(Some(v)) => {
                let p = self.operand_pts(m, v);
                self.add(Node::Ret(m.clone()), p);
            }
            StmtKind::Emit { key, value } => {
                if let Some(k) = key {
                    let p = self.operand_pts(m, k);
                    self.add(Node::Emit(m.clone(), Part::Key), p);
                }
                let p = self.operand_pts(m, value);
                self.add(Node::Emit(m.clone(), Part::Value), p);
            }
            _ => {}
        }
        Ok(())
    }
}

/// IR methods reachable from `root` under the current points-to state.
fn reachable_ir(program: &Program, sv: &Solver<'_>, root: &str) -> BTreeSet<MethodRef> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![root.to_string()];
    while let Some(q) = stack.pop() {
        if !seen.insert(MethodRef::Ir(q.clone())) {
            continue;
        }
        let Some(m) = program.method(&q) else {
            continue;
        };
        let mref = MethodRef::Ir(q.clone());
        visit_stmts(&m.body, &mut |s| match &s.kind {
            StmtKind::Call { func, .. } => stack.push(func.clone()),
            StmtKind::New { ty, ctor, .. } => stack.push(format!("{ty}.{ctor}")),
            StmtKind::InitCall { ctor, .. } => {
                stack.push(format!("{}.{ctor}", m.owner.clone().unwrap_or_default()))
            }
            StmtKind::Invoke { recv, method, .. } => {
                for id in sv.get(&Node::Var(mref.clone(), recv.clone())) {
                    stack.push(format!("{}.{method}", sv.site_ty(id)));
                }
            }
            _ => {}
        });
    }
    seen
}

/// Runtime type-sets of every field, keyed by `(type, field)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TypeSets {
    pub map: BTreeMap<FieldKey, BTreeSet<String>>,
}

impl TypeSets {
    pub fn get(&self, ty: &str, field: &str) -> Option<&BTreeSet<String>> {
        self.map.get(&(ty.to_string(), field.to_string()))
    }

    /// Type-set of a field, or of the element field for arrays.
    pub fn of(&self, ty: &str, field: &str) -> BTreeSet<String> {
        self.get(ty, field).cloned().unwrap_or_default()
    }
}
