use std::collections::BTreeMap;
use std::fmt;

use super::IrError;

/// Source position of a declaration or statement. Positions never take part
/// in structural equality so that `parse(print(p)) == p` holds.
#[derive(Debug, Clone, Copy, Default)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

impl PartialEq for Span {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Span {
    pub fn new(line: u32, col: u32) -> Self {
        Span { line, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub enum PrimKind {
    Bool,
    Byte,
    Char,
    Short,
    Int,
    Long,
    Float,
    Double,
}

impl PrimKind {
    pub const ALL: [PrimKind; 8] = [
        PrimKind::Bool,
        PrimKind::Byte,
        PrimKind::Char,
        PrimKind::Short,
        PrimKind::Int,
        PrimKind::Long,
        PrimKind::Float,
        PrimKind::Double,
    ];

    /// Width in bytes, as fixed by the JVM.
    pub fn size(self) -> usize {
        match self {
            PrimKind::Bool | PrimKind::Byte => 1,
            PrimKind::Char | PrimKind::Short => 2,
            PrimKind::Int | PrimKind::Float => 4,
            PrimKind::Long | PrimKind::Double => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimKind::Bool => "bool",
            PrimKind::Byte => "byte",
            PrimKind::Char => "char",
            PrimKind::Short => "short",
            PrimKind::Int => "int",
            PrimKind::Long => "long",
            PrimKind::Float => "float",
            PrimKind::Double => "double",
        }
    }

    pub fn from_name(s: &str) -> Option<PrimKind> {
        PrimKind::ALL.iter().copied().find(|k| k.name() == s)
    }

    pub fn is_float(self) -> bool {
        matches!(self, PrimKind::Float | PrimKind::Double)
    }
}

impl fmt::Display for PrimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Name of the implicit element field of every array type.
pub const ELEMENT_FIELD: &str = "[]";

/// Returns the element type name when `name` is of the form `Array[T]`.
pub fn array_element(name: &str) -> Option<&str> {
    name.strip_prefix("Array[")?.strip_suffix(']')
}

pub fn array_of(elem: &str) -> String {
    format!("Array[{elem}]")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldDef {
    pub name: String,
    pub declared: String,
    pub is_final: bool,
    /// Explicit runtime type-set annotation; overrides inference.
    pub annotated: Option<Vec<String>>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDecl {
    pub name: String,
    pub implements: Vec<String>,
    pub fields: Vec<FieldDef>,
    pub span: Span,
}

impl ClassDecl {
    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TypeDecl {
    Class(ClassDecl),
    Interface { name: String, span: Span },
}

impl TypeDecl {
    pub fn name(&self) -> &str {
        match self {
            TypeDecl::Class(c) => &c.name,
            TypeDecl::Interface { name, .. } => name,
        }
    }

    pub fn span(&self) -> Span {
        match self {
            TypeDecl::Class(c) => c.span,
            TypeDecl::Interface { span, .. } => *span,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Int(i64),
    Float(f64),
    Null,
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Int(v) => write!(f, "{v}"),
            Literal::Float(v) => {
                if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
                    write!(f, "{v:.1}")
                } else {
                    write!(f, "{v:?}")
                }
            }
            Literal::Null => f.write_str("null"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Var(String),
    Lit(Literal),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Var(v) => f.write_str(v),
            Operand::Lit(l) => l.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    Min,
    Max,
}

impl BinOp {
    pub const ALL: [BinOp; 13] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Rem,
        BinOp::Lt,
        BinOp::Le,
        BinOp::Gt,
        BinOp::Ge,
        BinOp::Eq,
        BinOp::Ne,
        BinOp::Min,
        BinOp::Max,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
            BinOp::Rem => "rem",
            BinOp::Lt => "lt",
            BinOp::Le => "le",
            BinOp::Gt => "gt",
            BinOp::Ge => "ge",
            BinOp::Eq => "eq",
            BinOp::Ne => "ne",
            BinOp::Min => "min",
            BinOp::Max => "max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Exp,
    Sqrt,
    ToDouble,
    ToLong,
    Not,
}

impl UnOp {
    pub const ALL: [UnOp; 6] = [
        UnOp::Neg,
        UnOp::Exp,
        UnOp::Sqrt,
        UnOp::ToDouble,
        UnOp::ToLong,
        UnOp::Not,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            UnOp::Neg => "neg",
            UnOp::Exp => "exp",
            UnOp::Sqrt => "sqrt",
            UnOp::ToDouble => "todouble",
            UnOp::ToLong => "tolong",
            UnOp::Not => "not",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stmt {
    pub kind: StmtKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StmtKind {
    /// `(const x lit)`
    Const {
        dst: String,
        value: Literal,
    },
    /// `(copy x y)`
    Copy {
        dst: String,
        src: String,
    },
    /// `(global x NAME)` loads a program-level constant.
    Global {
        dst: String,
        name: String,
    },
    /// `(read x NAME T)` reads an external (driver-supplied) value.
    Read {
        dst: String,
        name: String,
        ty: String,
    },
    Bin {
        op: BinOp,
        dst: String,
        a: Operand,
        b: Operand,
    },
    Un {
        op: UnOp,
        dst: String,
        a: Operand,
    },
    /// `(new x T ctor args...)`
    New {
        dst: String,
        ty: String,
        ctor: String,
        args: Vec<Operand>,
    },
    /// `(newarray x Array[T] len)`
    NewArray {
        dst: String,
        ty: String,
        len: Operand,
    },
    Load {
        dst: String,
        obj: String,
        field: String,
    },
    Store {
        obj: String,
        field: String,
        value: Operand,
    },
    ALoad {
        dst: String,
        arr: String,
        idx: Operand,
    },
    AStore {
        arr: String,
        idx: Operand,
        value: Operand,
    },
    ALen {
        dst: String,
        arr: String,
    },
    /// `(call x func args...)`; `func` is a free function name.
    Call {
        dst: Option<String>,
        func: String,
        args: Vec<Operand>,
    },
    /// `(invoke x recv name args...)`; virtual dispatch on the receiver's runtime type.
    Invoke {
        dst: Option<String>,
        recv: String,
        method: String,
        args: Vec<Operand>,
    },
    /// `(initcall ctor args...)` delegates to another constructor of the same class on `this`.
    InitCall {
        ctor: String,
        args: Vec<Operand>,
    },
    Return(Option<Operand>),
    If {
        cond: Operand,
        then: Vec<Stmt>,
        els: Vec<Stmt>,
    },
    /// `(while c body...)`: `c` is re-tested before every iteration.
    While {
        cond: String,
        body: Vec<Stmt>,
    },
    Emit {
        key: Option<Operand>,
        value: Operand,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub ty: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodDef {
    /// Declaring class, or `None` for free functions.
    pub owner: Option<String>,
    pub name: String,
    pub params: Vec<Param>,
    pub ret: Option<String>,
    pub body: Vec<Stmt>,
    pub span: Span,
}

impl MethodDef {
    /// Fully qualified name: `Owner.name` or `name`.
    pub fn qualified(&self) -> String {
        match &self.owner {
            Some(o) => format!("{o}.{}", self.name),
            None => self.name.clone(),
        }
    }

    pub fn is_constructor(&self) -> bool {
        self.owner.is_some() && is_ctor_name(&self.name)
    }
}

pub fn is_ctor_name(name: &str) -> bool {
    name.starts_with("<init")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstDecl {
    pub name: String,
    pub value: Literal,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub enum ContainerKind {
    Input,
    Cache,
    ShuffleSort,
    ShuffleHashReduce,
    ShuffleHashGroup,
    Reduce,
    Output,
}

impl ContainerKind {
    pub fn keyword(self) -> &'static str {
        match self {
            ContainerKind::Input => "input",
            ContainerKind::Cache => "cache",
            ContainerKind::ShuffleSort => "shuffle-sort",
            ContainerKind::ShuffleHashReduce => "shuffle-reduce",
            ContainerKind::ShuffleHashGroup => "shuffle-group",
            ContainerKind::Reduce => "reduce",
            ContainerKind::Output => "output",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        [
            ContainerKind::Input,
            ContainerKind::Cache,
            ContainerKind::ShuffleSort,
            ContainerKind::ShuffleHashReduce,
            ContainerKind::ShuffleHashGroup,
            ContainerKind::Reduce,
            ContainerKind::Output,
        ]
        .into_iter()
        .find(|k| k.keyword() == s)
    }

    pub fn is_keyed(self) -> bool {
        matches!(
            self,
            ContainerKind::ShuffleSort
                | ContainerKind::ShuffleHashReduce
                | ContainerKind::ShuffleHashGroup
        )
    }

    pub fn is_shuffle(self) -> bool {
        self.is_keyed()
    }
}

/// A data container declared by the job: `container NAME KIND TYPE [VALUE] [combine=M] [group=G]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerDecl {
    pub name: String,
    pub kind: ContainerKind,
    /// Element type, or key type for keyed containers. `None` for untyped outputs.
    pub ty: Option<String>,
    /// Value type of keyed containers.
    pub value_ty: Option<String>,
    pub combine: Option<String>,
    /// Record type materialized per key by a grouping shuffle; fields are `(key, values)`.
    pub group: Option<String>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDecl {
    pub name: String,
    pub source: String,
    pub udf: String,
    pub sink: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageDecl {
    pub name: String,
    pub phases: Vec<PhaseDecl>,
    pub span: Span,
}

/// The ordered stages of a job together with the containers they connect.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JobSpec {
    pub containers: Vec<ContainerDecl>,
    pub stages: Vec<StageDecl>,
}

impl JobSpec {
    pub fn container(&self, name: &str) -> Option<&ContainerDecl> {
        self.containers.iter().find(|c| c.name == name)
    }

    pub fn stage(&self, name: &str) -> Option<&StageDecl> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Resolved view of any type name.
#[derive(Debug, Clone, Copy)]
pub enum TyRef<'a> {
    Prim(PrimKind),
    Class(&'a ClassDecl),
    Interface(&'a str),
    Array(&'a str),
}

/// A parsed and validated IR program.
#[derive(Debug, Clone, Default)]
pub struct Program {
    pub consts: Vec<ConstDecl>,
    pub types: Vec<TypeDecl>,
    pub methods: Vec<MethodDef>,
    pub job: JobSpec,
    type_index: BTreeMap<String, usize>,
    method_index: BTreeMap<String, usize>,
    arrays: Vec<String>,
}

impl PartialEq for Program {
    fn eq(&self, other: &Self) -> bool {
        self.consts == other.consts
            && self.types == other.types
            && self.methods == other.methods
            && self.job == other.job
    }
}

impl Program {
    /// Builds the indexes and validates every type and container reference.
    pub fn new(
        consts: Vec<ConstDecl>,
        types: Vec<TypeDecl>,
        methods: Vec<MethodDef>,
        job: JobSpec,
    ) -> Result<Self, IrError> {
        let mut p = Program {
            consts,
            types,
            methods,
            job,
            ..Default::default()
        };
        for (i, t) in p.types.iter().enumerate() {
            let name = t.name().to_string();
            if PrimKind::from_name(&name).is_some() || array_element(&name).is_some() {
                return Err(IrError::ReservedTypeName(name));
            }
            if p.type_index.insert(name.clone(), i).is_some() {
                return Err(IrError::DuplicateType(name));
            }
        }
        for (i, m) in p.methods.iter().enumerate() {
            if p.method_index.insert(m.qualified(), i).is_some() {
                return Err(IrError::DuplicateMethod(m.qualified()));
            }
        }
        p.validate()?;
        Ok(p)
    }

    fn validate(&mut self) -> Result<(), IrError> {
        let mut refs: Vec<(String, Span)> = Vec::new();
        for t in &self.types {
            if let TypeDecl::Class(c) = t {
                for i in &c.implements {
                    refs.push((i.clone(), c.span));
                }
                let mut seen = std::collections::BTreeSet::new();
                for f in &c.fields {
                    if !seen.insert(&f.name) {
                        return Err(IrError::DuplicateField {
                            class: c.name.clone(),
                            field: f.name.clone(),
                        });
                    }
                    refs.push((f.declared.clone(), f.span));
                    for a in f.annotated.iter().flatten() {
                        refs.push((a.clone(), f.span));
                    }
                }
            }
        }
        for m in &self.methods {
            if let Some(o) = &m.owner {
                refs.push((o.clone(), m.span));
            }
            for p in &m.params {
                refs.push((p.ty.clone(), m.span));
            }
            if let Some(r) = &m.ret {
                refs.push((r.clone(), m.span));
            }
            visit_stmts(&m.body, &mut |s| match &s.kind {
                StmtKind::New { ty, .. }
                | StmtKind::NewArray { ty, .. }
                | StmtKind::Read { ty, .. } => refs.push((ty.clone(), s.span)),
                _ => {}
            });
        }
        for c in &self.job.containers {
            for t in [&c.ty, &c.value_ty, &c.group].into_iter().flatten() {
                refs.push((t.clone(), c.span));
            }
        }
        for (name, span) in &refs {
            self.check_type(name, *span)?;
        }
        for (name, _) in refs {
            self.note_array(&name);
        }
        for m in &self.methods {
            if let Some(o) = &m.owner {
                if !matches!(self.resolve(o), Some(TyRef::Class(_))) {
                    return Err(IrError::NotAClass(o.clone()));
                }
            }
        }
        for c in &self.job.containers {
            for m in [&c.combine].into_iter().flatten() {
                if self.method(m).is_none() {
                    return Err(IrError::UnknownMethod(m.clone()));
                }
            }
        }
        for s in &self.job.stages {
            for (k, ph) in s.phases.iter().enumerate() {
                for c in [&ph.source, &ph.sink] {
                    if self.job.container(c).is_none() {
                        return Err(IrError::UnknownContainer(c.clone()));
                    }
                }
                if self.method(&ph.udf).is_none() {
                    return Err(IrError::UnknownMethod(ph.udf.clone()));
                }
                if k > 0 && s.phases[k - 1].sink != ph.source {
                    return Err(IrError::BrokenPhaseChain {
                        stage: s.name.clone(),
                        phase: ph.name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    fn check_type(&self, name: &str, span: Span) -> Result<(), IrError> {
        if name.is_empty() {
            return Err(IrError::UnknownType {
                name: name.to_string(),
                line: span.line,
                col: span.col,
            });
        }
        if PrimKind::from_name(name).is_some() || self.type_index.contains_key(name) {
            return Ok(());
        }
        if let Some(e) = array_element(name) {
            return self.check_type(e, span);
        }
        Err(IrError::UnknownType {
            name: name.to_string(),
            line: span.line,
            col: span.col,
        })
    }

    fn note_array(&mut self, name: &str) {
        if let Some(e) = array_element(name) {
            let e = e.to_string();
            self.note_array(&e);
            if !self.arrays.iter().any(|a| a == name) {
                self.arrays.push(name.to_string());
            }
        }
    }

    pub fn resolve<'a>(&'a self, name: &'a str) -> Option<TyRef<'a>> {
        if let Some(k) = PrimKind::from_name(name) {
            return Some(TyRef::Prim(k));
        }
        if let Some(e) = array_element(name) {
            return Some(TyRef::Array(e));
        }
        match self.types.get(*self.type_index.get(name)?)? {
            TypeDecl::Class(c) => Some(TyRef::Class(c)),
            TypeDecl::Interface { name, .. } => Some(TyRef::Interface(name)),
        }
    }

    pub fn class(&self, name: &str) -> Option<&ClassDecl> {
        match self.types.get(*self.type_index.get(name)?)? {
            TypeDecl::Class(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_primitive(name: &str) -> bool {
        PrimKind::from_name(name).is_some()
    }

    pub fn classes(&self) -> impl Iterator<Item = &ClassDecl> {
        self.types.iter().filter_map(|t| match t {
            TypeDecl::Class(c) => Some(c),
            _ => None,
        })
    }

    /// Array types referenced anywhere in the program, in first-appearance order.
    pub fn array_types(&self) -> &[String] {
        &self.arrays
    }

    /// All non-primitive type names: classes in declaration order, then arrays.
    pub fn composite_types(&self) -> Vec<String> {
        self.classes()
            .map(|c| c.name.clone())
            .chain(self.arrays.iter().cloned())
            .collect()
    }

    pub fn method(&self, qualified: &str) -> Option<&MethodDef> {
        self.methods.get(*self.method_index.get(qualified)?)
    }

    pub fn method_id(&self, qualified: &str) -> Option<usize> {
        self.method_index.get(qualified).copied()
    }

    pub fn constant(&self, name: &str) -> Option<&Literal> {
        self.consts
            .iter()
            .find(|c| c.name == name)
            .map(|c| &c.value)
    }

    /// `sub` equals `sup`, or `sub` is a class implementing interface `sup`.
    pub fn is_subtype(&self, sub: &str, sup: &str) -> bool {
        if sub == sup {
            return true;
        }
        match self.class(sub) {
            Some(c) => c.implements.iter().any(|i| i == sup),
            None => false,
        }
    }

    /// Concrete classes assignable to `name` (itself if it is a class).
    pub fn concrete_subtypes(&self, name: &str) -> Vec<String> {
        match self.resolve(name) {
            Some(TyRef::Interface(_)) => self
                .classes()
                .filter(|c| c.implements.iter().any(|i| i == name))
                .map(|c| c.name.clone())
                .collect(),
            Some(_) => vec![name.to_string()],
            None => Vec::new(),
        }
    }

    /// Fields of a composite type as `(field name, declared type, is_final)`.
    /// Arrays expose their element field only; the implicit length is accounted for by layout.
    pub fn fields_of(&self, ty: &str) -> Vec<(String, String, bool)> {
        match self.resolve(ty) {
            Some(TyRef::Class(c)) => c
                .fields
                .iter()
                .map(|f| (f.name.clone(), f.declared.clone(), f.is_final))
                .collect(),
            Some(TyRef::Array(e)) => vec![(ELEMENT_FIELD.to_string(), e.to_string(), false)],
            _ => Vec::new(),
        }
    }

    /// Resolves a virtual call on a receiver of runtime class `class`.
    pub fn dispatch(&self, class: &str, method: &str) -> Option<&MethodDef> {
        self.method(&format!("{class}.{method}"))
    }
}

pub fn visit_stmts<'a>(stmts: &'a [Stmt], f: &mut impl FnMut(&'a Stmt)) {
    for s in stmts {
        f(s);
        match &s.kind {
            StmtKind::If { then, els, .. } => {
                visit_stmts(then, f);
                visit_stmts(els, f);
            }
            StmtKind::While { body, .. } => visit_stmts(body, f),
            _ => {}
        }
    }
}
