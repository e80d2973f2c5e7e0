use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::datum::Datum;
use crate::ir::{
    array_element, Analysis, BinOp, Literal, Operand, PrimKind, Program, Stmt, StmtKind, UnOp,
    ELEMENT_FIELD,
};

use super::oracle::{OracleTrace, Origin};
use super::EngineError;

/// A task-local value. References index the per-invocation heap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Null,
    Int(i64),
    Float(f64),
    Ref(u32),
}

#[derive(Debug, Clone, Copy)]
enum Opd {
    Slot(u32),
    Val(Value),
}

#[derive(Debug)]
enum Op {
    Set {
        dst: u32,
        v: Value,
    },
    Copy {
        dst: u32,
        src: u32,
    },
    Read {
        dst: u32,
        name: String,
        kind: Option<PrimKind>,
    },
    Bin {
        op: BinOp,
        dst: u32,
        a: Opd,
        b: Opd,
    },
    Un {
        op: UnOp,
        dst: u32,
        a: Opd,
    },
    New {
        dst: u32,
        ty: u32,
        ctor: Option<u32>,
        args: Vec<Opd>,
    },
    NewArray {
        dst: u32,
        ty: u32,
        len: Opd,
    },
    Load {
        dst: u32,
        obj: u32,
        field: u32,
    },
    Store {
        obj: u32,
        field: u32,
        value: Opd,
    },
    ALoad {
        dst: u32,
        arr: u32,
        idx: Opd,
    },
    AStore {
        arr: u32,
        idx: Opd,
        value: Opd,
    },
    ALen {
        dst: u32,
        arr: u32,
    },
    Call {
        dst: Option<u32>,
        func: u32,
        args: Vec<Opd>,
    },
    Invoke {
        dst: Option<u32>,
        recv: u32,
        name: u32,
        args: Vec<Opd>,
    },
    InitCall {
        ctor: u32,
        args: Vec<Opd>,
    },
    Return(Option<Opd>),
    If {
        cond: Opd,
        then: Vec<Op>,
        els: Vec<Op>,
    },
    While {
        cond: u32,
        body: Vec<Op>,
    },
    Emit {
        key: Option<Opd>,
        value: Opd,
    },
}

#[derive(Debug)]
struct CMethod {
    name: String,
    has_this: bool,
    params: Vec<Option<PrimKind>>,
    ret: Option<PrimKind>,
    nslots: u32,
    body: Vec<Op>,
}

#[derive(Debug)]
struct FieldInfo {
    name: u32,
    label: String,
    prim: Option<PrimKind>,
    /// Indexed by type id: whether that type may be stored here.
    allowed: Vec<bool>,
}

#[derive(Debug)]
enum TKind {
    Class(Vec<FieldInfo>),
    Array(FieldInfo),
}

#[derive(Debug)]
struct TypeInfo {
    name: Arc<str>,
    kind: TKind,
    methods: HashMap<u32, u32>,
}

#[derive(Debug, Clone)]
struct HObj {
    ty: u32,
    slots: Vec<Value>,
}

/// UDF bodies compiled to slot-addressed operations.
#[derive(Debug)]
pub struct Interp {
    methods: Vec<CMethod>,
    method_ids: HashMap<String, u32>,
    types: Vec<TypeInfo>,
    type_ids: HashMap<String, u32>,
    names: HashMap<String, u32>,
}

/// Receives `(key, value, combined)` for every `emit`.
pub type EmitFn<'a> = dyn FnMut(Option<Datum>, Datum, bool) -> Result<(), EngineError> + 'a;

/// What an invocation may touch outside its own heap.
pub struct Env<'a> {
    pub broadcasts: &'a BTreeMap<String, Datum>,
    pub emit: Option<&'a mut EmitFn<'a>>,
    pub oracle: Option<&'a mut OracleTrace>,
    /// Operation budget per invocation.
    pub fuel: u64,
}

impl<'a> Env<'a> {
    pub fn new(broadcasts: &'a BTreeMap<String, Datum>) -> Self {
        Env {
            broadcasts,
            emit: None,
            oracle: None,
            fuel: 50_000_000,
        }
    }
}

/// Result of one invocation.
#[derive(Debug, Default)]
pub struct Outcome {
    pub ret: Option<Datum>,
    /// The first argument after the call, if the call modified it.
    pub written_back: Option<Datum>,
}

struct Ctx<'e, 'a> {
    env: &'e mut Env<'a>,
    heap: Vec<HObj>,
    import_mark: u32,
    root: Option<u32>,
    dirty: bool,
    fuel: u64,
    depth: u32,
    tracked: Vec<(u32, usize)>,
}

enum Flow {
    Next,
    Ret(Value),
}

fn coerce(k: PrimKind, v: Value) -> Value {
    let int = |v: Value| match v {
        Value::Int(i) => i,
        Value::Float(f) => f as i64,
        _ => 0,
    };
    match k {
        PrimKind::Bool => Value::Int((int(v) != 0) as i64),
        PrimKind::Byte => Value::Int(int(v) as i8 as i64),
        PrimKind::Char => Value::Int(int(v) as u16 as i64),
        PrimKind::Short => Value::Int(int(v) as i16 as i64),
        PrimKind::Int => Value::Int(int(v) as i32 as i64),
        PrimKind::Long => Value::Int(int(v)),
        PrimKind::Float => match v {
            Value::Float(f) => Value::Float(f as f32 as f64),
            Value::Int(i) => Value::Float(i as f32 as f64),
            _ => Value::Float(0.0),
        },
        PrimKind::Double => match v {
            Value::Float(f) => Value::Float(f),
            Value::Int(i) => Value::Float(i as f64),
            _ => Value::Float(0.0),
        },
    }
}

/// Converts a primitive datum to the representation of kind `k`.
pub fn coerce_datum(k: PrimKind, d: &Datum) -> Datum {
    let v = match d {
        Datum::Int(i) => Value::Int(*i),
        Datum::Float(f) => Value::Float(*f),
        _ => return d.clone(),
    };
    match coerce(k, v) {
        Value::Int(i) => Datum::Int(i),
        Value::Float(f) => Datum::Float(f),
        _ => d.clone(),
    }
}

fn zero(k: Option<PrimKind>) -> Value {
    match k {
        Some(k) if k.is_float() => Value::Float(0.0),
        Some(_) => Value::Int(0),
        None => Value::Null,
    }
}

fn truthy(v: Value) -> bool {
    match v {
        Value::Null => false,
        Value::Int(i) => i != 0,
        Value::Float(f) => f != 0.0,
        Value::Ref(_) => true,
    }
}

fn bin(op: BinOp, a: Value, b: Value) -> Result<Value, String> {
    use Value::*;
    let cmp = |o: std::cmp::Ordering| -> Value {
        use std::cmp::Ordering::*;
        let r = match op {
            BinOp::Lt => o == Less,
            BinOp::Le => o != Greater,
            BinOp::Gt => o == Greater,
            BinOp::Ge => o != Less,
            BinOp::Eq => o == Equal,
            BinOp::Ne => o != Equal,
            _ => unreachable!(),
        };
        Int(r as i64)
    };
    match (a, b) {
        (Int(x), Int(y)) => Ok(match op {
            BinOp::Add => Int(x.wrapping_add(y)),
            BinOp::Sub => Int(x.wrapping_sub(y)),
            BinOp::Mul => Int(x.wrapping_mul(y)),
            BinOp::Div | BinOp::Rem if y == 0 => return Err("integer division by zero".into()),
            BinOp::Div => Int(x.wrapping_div(y)),
            BinOp::Rem => Int(x.wrapping_rem(y)),
            BinOp::Min => Int(x.min(y)),
            BinOp::Max => Int(x.max(y)),
            _ => cmp(x.cmp(&y)),
        }),
        (Int(_) | Float(_), Int(_) | Float(_)) => {
            let f = |v: Value| match v {
                Int(i) => i as f64,
                Float(f) => f,
                _ => unreachable!(),
            };
            let (x, y) = (f(a), f(b));
            Ok(match op {
                BinOp::Add => Float(x + y),
                BinOp::Sub => Float(x - y),
                BinOp::Mul => Float(x * y),
                BinOp::Div => Float(x / y),
                BinOp::Rem => Float(x % y),
                BinOp::Min => Float(x.min(y)),
                BinOp::Max => Float(x.max(y)),
                BinOp::Eq => Int((x == y) as i64),
                BinOp::Ne => Int((x != y) as i64),
                _ => match x.partial_cmp(&y) {
                    Some(o) => cmp(o),
                    None => Int(0),
                },
            })
        }
        (Null | Ref(_), Null | Ref(_)) if matches!(op, BinOp::Eq | BinOp::Ne) => {
            Ok(Int(((a == b) == (op == BinOp::Eq)) as i64))
        }
        _ => Err(format!(
            "operator `{}` applied to a reference",
            op.keyword()
        )),
    }
}

fn un(op: UnOp, a: Value) -> Result<Value, String> {
    use Value::*;
    let f = |v: Value| match v {
        Int(i) => Ok(i as f64),
        Float(f) => Ok(f),
        _ => Err(format!(
            "operator `{}` applied to a reference",
            op.keyword()
        )),
    };
    Ok(match op {
        UnOp::Neg => match a {
            Int(i) => Int(i.wrapping_neg()),
            _ => Float(-f(a)?),
        },
        UnOp::Exp => Float(f(a)?.exp()),
        UnOp::Sqrt => Float(f(a)?.sqrt()),
        UnOp::ToDouble => Float(f(a)?),
        UnOp::ToLong => match a {
            Int(i) => Int(i),
            _ => Int(f(a)? as i64),
        },
        UnOp::Not => Int(!truthy(a) as i64),
    })
}

struct Compiler<'p> {
    program: &'p Program,
    method_ids: &'p HashMap<String, u32>,
    type_ids: &'p HashMap<String, u32>,
    names: &'p mut HashMap<String, u32>,
    owner: Option<String>,
    qualified: String,
    slots: HashMap<String, u32>,
}

impl Compiler<'_> {
    fn err(&self, msg: impl Into<String>) -> EngineError {
        EngineError::Compile {
            method: self.qualified.clone(),
            msg: msg.into(),
        }
    }

    fn slot(&mut self, v: &str) -> u32 {
        let n = self.slots.len() as u32;
        *self.slots.entry(v.to_string()).or_insert(n)
    }

    fn name(&mut self, s: &str) -> u32 {
        let n = self.names.len() as u32;
        *self.names.entry(s.to_string()).or_insert(n)
    }

    fn opd(&mut self, o: &Operand) -> Opd {
        match o {
            Operand::Var(v) => Opd::Slot(self.slot(v)),
            Operand::Lit(l) => Opd::Val(lit(l)),
        }
    }

    fn opds(&mut self, os: &[Operand]) -> Vec<Opd> {
        os.iter().map(|o| self.opd(o)).collect()
    }

    fn ty(&self, t: &str) -> Result<u32, EngineError> {
        self.type_ids
            .get(t)
            .copied()
            .ok_or_else(|| self.err(format!("`{t}` is not a composite type")))
    }

    fn method(&self, q: &str) -> Result<u32, EngineError> {
        self.method_ids
            .get(q)
            .copied()
            .ok_or_else(|| self.err(format!("no method `{q}`")))
    }

    fn block(&mut self, stmts: &[Stmt]) -> Result<Vec<Op>, EngineError> {
        stmts.iter().map(|s| self.stmt(s)).collect()
    }

    fn stmt(&mut self, s: &Stmt) -> Result<Op, EngineError> {
        Ok(match &s.kind {
            StmtKind::Const { dst, value } => Op::Set {
                dst: self.slot(dst),
                v: lit(value),
            },
            StmtKind::Copy { dst, src } => Op::Copy {
                src: self.slot(src),
                dst: self.slot(dst),
            },
            StmtKind::Global { dst, name } => {
                let v = self
                    .program
                    .constant(name)
                    .ok_or_else(|| self.err(format!("no constant `{name}`")))?;
                Op::Set {
                    dst: self.slot(dst),
                    v: lit(v),
                }
            }
            StmtKind::Read { dst, name, ty } => Op::Read {
                dst: self.slot(dst),
                name: name.clone(),
                kind: PrimKind::from_name(ty),
            },
            StmtKind::Bin { op, dst, a, b } => Op::Bin {
                op: *op,
                a: self.opd(a),
                b: self.opd(b),
                dst: self.slot(dst),
            },
            StmtKind::Un { op, dst, a } => Op::Un {
                op: *op,
                a: self.opd(a),
                dst: self.slot(dst),
            },
            StmtKind::New {
                dst,
                ty,
                ctor,
                args,
            } => {
                let t = self.ty(ty)?;
                let q = format!("{ty}.{ctor}");
                let ctor = match self.method_ids.get(&q) {
                    Some(m) => Some(*m),
                    None if args.is_empty() => None,
                    None => return Err(self.err(format!("no constructor `{q}`"))),
                };
                Op::New {
                    args: self.opds(args),
                    dst: self.slot(dst),
                    ty: t,
                    ctor,
                }
            }
            StmtKind::NewArray { dst, ty, len } => Op::NewArray {
                ty: self.ty(ty)?,
                len: self.opd(len),
                dst: self.slot(dst),
            },
            StmtKind::Load { dst, obj, field } => Op::Load {
                obj: self.slot(obj),
                field: self.name(field),
                dst: self.slot(dst),
            },
            StmtKind::Store { obj, field, value } => Op::Store {
                obj: self.slot(obj),
                field: self.name(field),
                value: self.opd(value),
            },
            StmtKind::ALoad { dst, arr, idx } => Op::ALoad {
                arr: self.slot(arr),
                idx: self.opd(idx),
                dst: self.slot(dst),
            },
            StmtKind::AStore { arr, idx, value } => Op::AStore {
                arr: self.slot(arr),
                idx: self.opd(idx),
                value: self.opd(value),
            },
            StmtKind::ALen { dst, arr } => Op::ALen {
                arr: self.slot(arr),
                dst: self.slot(dst),
            },
            StmtKind::Call { dst, func, args } => Op::Call {
                func: self.method(func)?,
                args: self.opds(args),
                dst: dst.as_ref().map(|d| self.slot(d)),
            },
            StmtKind::Invoke {
                dst,
                recv,
                method,
                args,
            } => Op::Invoke {
                recv: self.slot(recv),
                name: self.name(method),
                args: self.opds(args),
                dst: dst.as_ref().map(|d| self.slot(d)),
            },
            StmtKind::InitCall { ctor, args } => {
                let owner = self
                    .owner
                    .clone()
                    .ok_or_else(|| self.err("initcall outside a class"))?;
                Op::InitCall {
                    ctor: self.method(&format!("{owner}.{ctor}"))?,
                    args: self.opds(args),
                }
            }
            StmtKind::Return(v) => Op::Return(v.as_ref().map(|v| self.opd(v))),
            StmtKind::If { cond, then, els } => Op::If {
                cond: self.opd(cond),
                then: self.block(then)?,
                els: self.block(els)?,
            },
            StmtKind::While { cond, body } => Op::While {
                cond: self.slot(cond),
                body: self.block(body)?,
            },
            StmtKind::Emit { key, value } => Op::Emit {
                key: key.as_ref().map(|k| self.opd(k)),
                value: self.opd(value),
            },
        })
    }
}

fn lit(l: &Literal) -> Value {
    match l {
        Literal::Int(i) => Value::Int(*i),
        Literal::Float(f) => Value::Float(*f),
        Literal::Null => Value::Null,
    }
}

impl Interp {
    pub fn new(program: &Program, analysis: &Analysis) -> Result<Interp, EngineError> {
        let mut names: HashMap<String, u32> = HashMap::new();
        let intern = |s: &str, names: &mut HashMap<String, u32>| {
            let n = names.len() as u32;
            *names.entry(s.to_string()).or_insert(n)
        };
        let all = program.composite_types();
        let type_ids: HashMap<String, u32> = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let allowed = |owner: &str, field: &str| -> Vec<bool> {
            let set = analysis.type_sets.of(owner, field);
            all.iter().map(|t| set.contains(t)).collect()
        };
        let mut types = Vec::new();
        for t in &all {
            let kind = match array_element(t) {
                Some(e) => TKind::Array(FieldInfo {
                    name: intern(ELEMENT_FIELD, &mut names),
                    label: format!("{t}.{ELEMENT_FIELD}"),
                    prim: PrimKind::from_name(e),
                    allowed: allowed(t, ELEMENT_FIELD),
                }),
                None => {
                    let c = program.class(t).expect("composite class");
                    TKind::Class(
                        c.fields
                            .iter()
                            .map(|f| FieldInfo {
                                name: intern(&f.name, &mut names),
                                label: format!("{t}.{}", f.name),
                                prim: PrimKind::from_name(&f.declared),
                                allowed: allowed(t, &f.name),
                            })
                            .collect(),
                    )
                }
            };
            types.push(TypeInfo {
                name: Arc::from(t.as_str()),
                kind,
                methods: HashMap::new(),
            });
        }
        let method_ids: HashMap<String, u32> = program
            .methods
            .iter()
            .enumerate()
            .map(|(i, m)| (m.qualified(), i as u32))
            .collect();
        for (i, m) in program.methods.iter().enumerate() {
            if let Some(o) = &m.owner {
                let n = intern(&m.name, &mut names);
                if let Some(&t) = type_ids.get(o) {
                    types[t as usize].methods.insert(n, i as u32);
                }
            }
        }
        let mut methods = Vec::new();
        for m in &program.methods {
            let mut c = Compiler {
                program,
                method_ids: &method_ids,
                type_ids: &type_ids,
                names: &mut names,
                owner: m.owner.clone(),
                qualified: m.qualified(),
                slots: HashMap::new(),
            };
            if m.owner.is_some() {
                c.slot("this");
            }
            for p in &m.params {
                c.slot(&p.name);
            }
            let body = c.block(&m.body)?;
            methods.push(CMethod {
                name: m.qualified(),
                has_this: m.owner.is_some(),
                params: m
                    .params
                    .iter()
                    .map(|p| PrimKind::from_name(&p.ty))
                    .collect(),
                ret: m.ret.as_deref().and_then(PrimKind::from_name),
                nslots: c.slots.len() as u32,
                body,
            });
        }
        Ok(Interp {
            methods,
            method_ids,
            types,
            type_ids,
            names,
        })
    }

    pub fn method_id(&self, qualified: &str) -> Option<usize> {
        self.method_ids.get(qualified).map(|&i| i as usize)
    }

    /// Runs free function `method` on `args`. Objects in the first argument
    /// count as the source record: if the call stores into any of them the
    /// modified record is returned in [`Outcome::written_back`].
    pub fn run(
        &self,
        method: usize,
        args: &[Datum],
        env: &mut Env<'_>,
    ) -> Result<Outcome, EngineError> {
        let m = &self.methods[method];
        let fuel = env.fuel;
        let mut ctx = Ctx {
            env,
            heap: Vec::new(),
            import_mark: 0,
            root: None,
            dirty: false,
            fuel,
            depth: 0,
            tracked: Vec::new(),
        };
        let mut vals = Vec::with_capacity(args.len());
        for (i, a) in args.iter().enumerate() {
            let v = self
                .import(&mut ctx, a)
                .map_err(|msg| self.rt(method as u32, msg))?;
            if i == 0 {
                ctx.import_mark = ctx.heap.len() as u32;
                if let Value::Ref(r) = v {
                    ctx.root = Some(r);
                }
            }
            vals.push(v);
        }
        if vals.len() != m.params.len() {
            return Err(self.rt(
                method as u32,
                format!("expects {} arguments, got {}", m.params.len(), vals.len()),
            ));
        }
        let r = self.call(&mut ctx, method as u32, None, vals)?;
        let ret = match (m.ret.is_some() || !matches!(r, Value::Null), r) {
            (true, v) => Some(
                self.export(&ctx.heap, v)
                    .map_err(|e| self.rt(method as u32, e))?,
            ),
            _ => None,
        };
        let written_back = match (ctx.dirty, ctx.root) {
            (true, Some(r)) => Some(
                self.export(&ctx.heap, Value::Ref(r))
                    .map_err(|e| self.rt(method as u32, e))?,
            ),
            _ => None,
        };
        Ok(Outcome { ret, written_back })
    }

    fn rt(&self, m: u32, msg: impl Into<String>) -> EngineError {
        EngineError::Runtime {
            method: self.methods[m as usize].name.clone(),
            msg: msg.into(),
        }
    }

    fn alloc(&self, ctx: &mut Ctx<'_, '_>, ty: u32, len: usize) -> u32 {
        let slots = match &self.types[ty as usize].kind {
            TKind::Class(fs) => fs.iter().map(|f| zero(f.prim)).collect(),
            TKind::Array(e) => vec![zero(e.prim); len],
        };
        ctx.heap.push(HObj { ty, slots });
        ctx.heap.len() as u32 - 1
    }

    fn import(&self, ctx: &mut Ctx<'_, '_>, d: &Datum) -> Result<Value, String> {
        let v = self.import_rec(ctx, d, 0)?;
        Ok(v)
    }

    fn import_rec(&self, ctx: &mut Ctx<'_, '_>, d: &Datum, depth: usize) -> Result<Value, String> {
        if depth > 10_000 {
            return Err("value nests too deeply".into());
        }
        Ok(match d {
            Datum::Null => Value::Null,
            Datum::Int(i) => Value::Int(*i),
            Datum::Float(f) => Value::Float(*f),
            Datum::Obj { ty, fields: items } | Datum::Array { ty, elems: items } => {
                let t = *self
                    .type_ids
                    .get(&**ty)
                    .ok_or_else(|| format!("unknown type `{ty}`"))?;
                let id = self.alloc(ctx, t, items.len());
                if ctx.heap[id as usize].slots.len() != items.len() {
                    return Err(format!("`{ty}` value has {} fields", items.len()));
                }
                for (i, it) in items.iter().enumerate() {
                    let mut v = self.import_rec(ctx, it, depth + 1)?;
                    if let Some(k) = self.slot_prim(t, i) {
                        v = coerce(k, v);
                    }
                    ctx.heap[id as usize].slots[i] = v;
                }
                self.track(ctx, id, Origin::Import);
                Value::Ref(id)
            }
        })
    }

    fn slot_prim(&self, ty: u32, i: usize) -> Option<PrimKind> {
        match &self.types[ty as usize].kind {
            TKind::Class(fs) => fs[i].prim,
            TKind::Array(e) => e.prim,
        }
    }

    fn export(&self, heap: &[HObj], v: Value) -> Result<Datum, String> {
        self.export_rec(heap, v, 0)
    }

    fn export_rec(&self, heap: &[HObj], v: Value, depth: usize) -> Result<Datum, String> {
        if depth > 10_000 {
            return Err("cyclic or too deeply nested value cannot leave a task".into());
        }
        Ok(match v {
            Value::Null => Datum::Null,
            Value::Int(i) => Datum::Int(i),
            Value::Float(f) => Datum::Float(f),
            Value::Ref(r) => {
                let o = &heap[r as usize];
                let t = &self.types[o.ty as usize];
                let items = o
                    .slots
                    .iter()
                    .map(|s| self.export_rec(heap, *s, depth + 1))
                    .collect::<Result<Vec<_>, _>>()?;
                match t.kind {
                    TKind::Class(_) => Datum::Obj {
                        ty: t.name.clone(),
                        fields: items,
                    },
                    TKind::Array(_) => Datum::Array {
                        ty: t.name.clone(),
                        elems: items,
                    },
                }
            }
        })
    }

    /// Data size of the object graph at `v`, counting every path once and
    /// cutting cycles; null contributes nothing.
    fn size_of(&self, heap: &[HObj], v: Value, stack: &mut Vec<u32>) -> u64 {
        let Value::Ref(r) = v else { return 0 };
        if stack.contains(&r) {
            return 0;
        }
        stack.push(r);
        let o = &heap[r as usize];
        let n = match &self.types[o.ty as usize].kind {
            TKind::Class(fs) => fs
                .iter()
                .zip(&o.slots)
                .map(|(f, s)| match f.prim {
                    Some(k) => k.size() as u64,
                    None => self.size_of(heap, *s, stack),
                })
                .sum(),
            TKind::Array(e) => match e.prim {
                Some(k) => (k.size() * o.slots.len()) as u64,
                None => o.slots.iter().map(|s| self.size_of(heap, *s, stack)).sum(),
            },
        };
        stack.pop();
        n
    }

    fn track(&self, ctx: &mut Ctx<'_, '_>, id: u32, origin: Origin) {
        if let Some(o) = ctx.env.oracle.as_deref_mut() {
            let size = self.size_of(&ctx.heap, Value::Ref(id), &mut Vec::new());
            let ty = &self.types[ctx.heap[id as usize].ty as usize].name;
            let idx = o.record(ty, origin, size);
            ctx.tracked.push((id, idx));
        }
    }

    fn retrace(&self, ctx: &mut Ctx<'_, '_>) {
        if let Some(o) = ctx.env.oracle.as_deref_mut() {
            for &(id, idx) in &ctx.tracked {
                let size = self.size_of(&ctx.heap, Value::Ref(id), &mut Vec::new());
                o.update(idx, size);
            }
        }
    }

    fn call(
        &self,
        ctx: &mut Ctx<'_, '_>,
        mi: u32,
        this: Option<Value>,
        args: Vec<Value>,
    ) -> Result<Value, EngineError> {
        let m = &self.methods[mi as usize];
        if ctx.depth > 256 {
            return Err(self.rt(mi, "call depth exceeds 256"));
        }
        if m.params.len() != args.len() || m.has_this != this.is_some() {
            return Err(self.rt(
                mi,
                format!("expects {} arguments, got {}", m.params.len(), args.len()),
            ));
        }
        if let Some(o) = ctx.env.oracle.as_deref_mut() {
            o.invoked(&m.name);
        }
        let mut frame = vec![Value::Null; m.nslots as usize];
        let mut k = 0;
        if let Some(t) = this {
            frame[0] = t;
            k = 1;
        }
        for (i, a) in args.into_iter().enumerate() {
            frame[k + i] = match m.params[i] {
                Some(p) => coerce(p, a),
                None => a,
            };
        }
        ctx.depth += 1;
        let r = self.exec(ctx, mi, &mut frame, &m.body);
        ctx.depth -= 1;
        Ok(match r? {
            Flow::Ret(v) => match m.ret {
                Some(k) => coerce(k, v),
                None => v,
            },
            Flow::Next => Value::Null,
        })
    }

    fn obj(&self, ctx: &Ctx<'_, '_>, mi: u32, v: Value) -> Result<u32, EngineError> {
        match v {
            Value::Ref(r) => Ok(r),
            Value::Null => Err(self.rt(mi, "null dereference")),
            _ => Err(self.rt(mi, "dereference of a primitive")),
        }
        .inspect(|r| debug_assert!((*r as usize) < ctx.heap.len()))
    }

    fn field_index(&self, ty: u32, name: u32) -> Option<usize> {
        match &self.types[ty as usize].kind {
            TKind::Class(fs) => fs.iter().position(|f| f.name == name),
            TKind::Array(_) => None,
        }
    }

    fn field_name(&self, name: u32) -> String {
        self.names
            .iter()
            .find(|(_, v)| **v == name)
            .map(|(k, _)| k.clone())
            .unwrap_or_default()
    }

    fn check_ref(&self, f: &FieldInfo, ctx: &Ctx<'_, '_>, v: Value) -> Result<(), EngineError> {
        if let Value::Ref(r) = v {
            let t = ctx.heap[r as usize].ty;
            if !f.allowed[t as usize] {
                let (owner, field) = f.label.rsplit_once('.').unwrap_or(("", &f.label));
                return Err(EngineError::TypeSet {
                    owner: owner.to_string(),
                    field: field.to_string(),
                    ty: self.types[t as usize].name.to_string(),
                });
            }
        }
        Ok(())
    }

    fn args(&self, frame: &[Value], a: &[Opd]) -> Vec<Value> {
        a.iter().map(|o| get(frame, *o)).collect()
    }

    fn exec(
        &self,
        ctx: &mut Ctx<'_, '_>,
        mi: u32,
        frame: &mut [Value],
        ops: &[Op],
    ) -> Result<Flow, EngineError> {
        for op in ops {
            if ctx.fuel == 0 {
                return Err(self.rt(mi, "operation budget exhausted"));
            }
            ctx.fuel -= 1;
            match op {
                Op::Set { dst, v } => frame[*dst as usize] = *v,
                Op::Copy { dst, src } => frame[*dst as usize] = frame[*src as usize],
                Op::Read { dst, name, kind } => {
                    let d = ctx
                        .env
                        .broadcasts
                        .get(name)
                        .ok_or_else(|| self.rt(mi, format!("no value supplied for `{name}`")))?
                        .clone();
                    let v = self.import(ctx, &d).map_err(|e| self.rt(mi, e))?;
                    frame[*dst as usize] = match kind {
                        Some(k) => coerce(*k, v),
                        None => v,
                    };
                }
                Op::Bin { op, dst, a, b } => {
                    frame[*dst as usize] =
                        bin(*op, get(frame, *a), get(frame, *b)).map_err(|e| self.rt(mi, e))?
                }
                Op::Un { op, dst, a } => {
                    frame[*dst as usize] = un(*op, get(frame, *a)).map_err(|e| self.rt(mi, e))?
                }
                Op::New {
                    dst,
                    ty,
                    ctor,
                    args,
                } => {
                    let id = self.alloc(ctx, *ty, 0);
                    if let Some(c) = ctor {
                        let a = self.args(frame, args);
                        self.call(ctx, *c, Some(Value::Ref(id)), a)?;
                    }
                    self.track(ctx, id, Origin::New);
                    frame[*dst as usize] = Value::Ref(id);
                }
                Op::NewArray { dst, ty, len } => {
                    let n = match get(frame, *len) {
                        Value::Int(n) if (0..=1 << 24).contains(&n) => n as usize,
                        v => return Err(self.rt(mi, format!("bad array length {v:?}"))),
                    };
                    let id = self.alloc(ctx, *ty, n);
                    self.track(ctx, id, Origin::New);
                    frame[*dst as usize] = Value::Ref(id);
                }
                Op::Load { dst, obj, field } => {
                    let r = self.obj(ctx, mi, frame[*obj as usize])?;
                    let o = &ctx.heap[r as usize];
                    let i = self.field_index(o.ty, *field).ok_or_else(|| {
                        self.rt(mi, format!("no field `{}`", self.field_name(*field)))
                    })?;
                    frame[*dst as usize] = o.slots[i];
                }
                Op::Store { obj, field, value } => {
                    let r = self.obj(ctx, mi, frame[*obj as usize])?;
                    let ty = ctx.heap[r as usize].ty;
                    let i = self.field_index(ty, *field).ok_or_else(|| {
                        self.rt(mi, format!("no field `{}`", self.field_name(*field)))
                    })?;
                    let TKind::Class(fs) = &self.types[ty as usize].kind else {
                        unreachable!()
                    };
                    let mut v = get(frame, *value);
                    match fs[i].prim {
                        Some(k) => v = coerce(k, v),
                        None => self.check_ref(&fs[i], ctx, v)?,
                    }
                    ctx.heap[r as usize].slots[i] = v;
                    if r < ctx.import_mark {
                        ctx.dirty = true;
                    }
                    if fs[i].prim.is_none() {
                        self.retrace(ctx);
                    }
                }
                Op::ALoad { dst, arr, idx } => {
                    let r = self.obj(ctx, mi, frame[*arr as usize])?;
                    let i = self.index(ctx, mi, r, get(frame, *idx))?;
                    frame[*dst as usize] = ctx.heap[r as usize].slots[i];
                }
                Op::AStore { arr, idx, value } => {
                    let r = self.obj(ctx, mi, frame[*arr as usize])?;
                    let i = self.index(ctx, mi, r, get(frame, *idx))?;
                    let TKind::Array(e) = &self.types[ctx.heap[r as usize].ty as usize].kind else {
                        unreachable!()
                    };
                    let mut v = get(frame, *value);
                    match e.prim {
                        Some(k) => v = coerce(k, v),
                        None => self.check_ref(e, ctx, v)?,
                    }
                    ctx.heap[r as usize].slots[i] = v;
                    if r < ctx.import_mark {
                        ctx.dirty = true;
                    }
                    if e.prim.is_none() {
                        self.retrace(ctx);
                    }
                }
                Op::ALen { dst, arr } => {
                    let r = self.obj(ctx, mi, frame[*arr as usize])?;
                    let o = &ctx.heap[r as usize];
                    if !matches!(self.types[o.ty as usize].kind, TKind::Array(_)) {
                        return Err(self.rt(mi, "alen of a non-array"));
                    }
                    frame[*dst as usize] = Value::Int(o.slots.len() as i64);
                }
                Op::Call { dst, func, args } => {
                    let a = self.args(frame, args);
                    let v = self.call(ctx, *func, None, a)?;
                    if let Some(d) = dst {
                        frame[*d as usize] = v;
                    }
                }
                Op::Invoke {
                    dst,
                    recv,
                    name,
                    args,
                } => {
                    let r = self.obj(ctx, mi, frame[*recv as usize])?;
                    let t = &self.types[ctx.heap[r as usize].ty as usize];
                    let m = *t.methods.get(name).ok_or_else(|| {
                        self.rt(
                            mi,
                            format!("`{}` has no method `{}`", t.name, self.field_name(*name)),
                        )
                    })?;
                    let a = self.args(frame, args);
                    let v = self.call(ctx, m, Some(Value::Ref(r)), a)?;
                    if let Some(d) = dst {
                        frame[*d as usize] = v;
                    }
                }
                Op::InitCall { ctor, args } => {
                    let a = self.args(frame, args);
                    self.call(ctx, *ctor, Some(frame[0]), a)?;
                }
                Op::Return(v) => return Ok(Flow::Ret(v.map_or(Value::Null, |v| get(frame, v)))),
                Op::If { cond, then, els } => {
                    let b = if truthy(get(frame, *cond)) { then } else { els };
                    if let Flow::Ret(v) = self.exec(ctx, mi, frame, b)? {
                        return Ok(Flow::Ret(v));
                    }
                }
                Op::While { cond, body } => {
                    while truthy(frame[*cond as usize]) {
                        if let Flow::Ret(v) = self.exec(ctx, mi, frame, body)? {
                            return Ok(Flow::Ret(v));
                        }
                        if ctx.fuel == 0 {
                            return Err(self.rt(mi, "operation budget exhausted"));
                        }
                        ctx.fuel -= 1;
                    }
                }
                Op::Emit { key, value } => {
                    let v = get(frame, *value);
                    let passthrough =
                        !ctx.dirty && matches!(v, Value::Ref(r) if Some(r) == ctx.root);
                    let vd = self.export(&ctx.heap, v).map_err(|e| self.rt(mi, e))?;
                    let kd = match key {
                        Some(k) => Some(
                            self.export(&ctx.heap, get(frame, *k))
                                .map_err(|e| self.rt(mi, e))?,
                        ),
                        None => None,
                    };
                    match ctx.env.emit.as_deref_mut() {
                        Some(f) => f(kd, vd, passthrough)?,
                        None => return Err(self.rt(mi, "emit outside a phase")),
                    }
                }
            }
        }
        Ok(Flow::Next)
    }

    fn index(&self, ctx: &Ctx<'_, '_>, mi: u32, r: u32, i: Value) -> Result<usize, EngineError> {
        let o = &ctx.heap[r as usize];
        if !matches!(self.types[o.ty as usize].kind, TKind::Array(_)) {
            return Err(self.rt(mi, "indexing a non-array"));
        }
        match i {
            Value::Int(i) if i >= 0 && (i as usize) < o.slots.len() => Ok(i as usize),
            Value::Int(i) => Err(self.rt(
                mi,
                format!("index {i} out of bounds for length {}", o.slots.len()),
            )),
            v => Err(self.rt(mi, format!("bad index {v:?}"))),
        }
    }
}

fn get(frame: &[Value], o: Opd) -> Value {
    match o {
        Opd::Slot(s) => frame[s as usize],
        Opd::Val(v) => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn run(src: &str, f: &str, args: &[Datum]) -> Result<Option<Datum>, EngineError> {
        let p = parse_program(src).unwrap();
        let a = Analysis::new(&p).unwrap();
        let i = Interp::new(&p, &a).unwrap();
        let b = BTreeMap::new();
        let mut env = Env::new(&b);
        i.run(i.method_id(f).unwrap(), args, &mut env)
            .map(|o| o.ret)
    }

    #[test]
    fn arithmetic_and_loops() {
        let src = "method tri(n long) -> long\n  (const acc 0)\n  (const i 0)\n  (le c i n)\n  (while c\n    (add acc acc i)\n    (add i i 1)\n    (le c i n))\n  (return acc)\nend\n";
        assert_eq!(
            run(src, "tri", &[Datum::Int(10)]).unwrap(),
            Some(Datum::Int(55))
        );
    }

    #[test]
    fn int_division_by_zero_is_an_error() {
        let src = "method d(a long) -> long\n  (div x a 0)\n  (return x)\nend\n";
        assert!(matches!(
            run(src, "d", &[Datum::Int(1)]),
            Err(EngineError::Runtime { .. })
        ));
    }

    #[test]
    fn stores_coerce_to_field_kind() {
        let src = "class P\n  field x float\n  field n int\nmethod P.<init>(v double)\n  (store this x v)\n  (store this n 4294967297)\nend\nmethod mk(v double) -> P\n  (new p P <init> v)\n  (return p)\nend\n";
        let d = run(src, "mk", &[Datum::Float(0.1)]).unwrap().unwrap();
        assert_eq!(
            d,
            Datum::obj("P", vec![Datum::Float(0.1f32 as f64), Datum::Int(1)])
        );
    }
}
