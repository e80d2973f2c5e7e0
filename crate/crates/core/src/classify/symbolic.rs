//! Symbolized copy/constant propagation over a call graph.
//!
//! Values read from outside the analysed code become symbols that are
//! treated as constants for the scope; `Sym + c` and `Const ± Const` are
//! tracked exactly and everything else collapses to `Top`. Propagation is
//! flow-insensitive: a variable's value is the join of all its definitions,
//! which also widens loop-carried values to `Top`.

use std::collections::BTreeMap;
use std::fmt;

use crate::ir::{
    visit_stmts, BinOp, CallGraph, Literal, MethodRef, Operand, PointsTo, Program, StmtKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolicValue {
    Const(i64),
    Sym { id: u32, offset: i64 },
    Top,
}

impl SymbolicValue {
    pub fn join(self, other: SymbolicValue) -> SymbolicValue {
        if self == other {
            self
        } else {
            SymbolicValue::Top
        }
    }

    pub fn plus(self, other: SymbolicValue) -> SymbolicValue {
        use SymbolicValue::*;
        match (self, other) {
            (Const(a), Const(b)) => a.checked_add(b).map(Const).unwrap_or(Top),
            (Sym { id, offset }, Const(c)) | (Const(c), Sym { id, offset }) => offset
                .checked_add(c)
                .map(|o| Sym { id, offset: o })
                .unwrap_or(Top),
            _ => Top,
        }
    }

    pub fn minus(self, other: SymbolicValue) -> SymbolicValue {
        use SymbolicValue::*;
        match (self, other) {
            (Const(a), Const(b)) => a.checked_sub(b).map(Const).unwrap_or(Top),
            (Sym { id, offset }, Const(c)) => offset
                .checked_sub(c)
                .map(|o| Sym { id, offset: o })
                .unwrap_or(Top),
            _ => Top,
        }
    }

    pub fn is_top(self) -> bool {
        self == SymbolicValue::Top
    }
}

impl fmt::Display for SymbolicValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymbolicValue::Const(c) => write!(f, "{c}"),
            SymbolicValue::Sym { id, offset: 0 } => write!(f, "Symbol({id})"),
            SymbolicValue::Sym { id, offset } if *offset > 0 => {
                write!(f, "Symbol({id}) + {offset}")
            }
            SymbolicValue::Sym { id, offset } => write!(f, "Symbol({id}) - {}", -offset),
            SymbolicValue::Top => f.write_str("Top"),
        }
    }
}

/// Per-variable symbolic values for every method of a call graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SymbolicEnv {
    values: BTreeMap<(MethodRef, String), SymbolicValue>,
    /// External value names in symbol-id order (id 1 is `symbols[0]`).
    pub symbols: Vec<String>,
}

impl SymbolicEnv {
    /// Value of a variable; unassigned variables are reported as `Top`.
    pub fn get(&self, m: &MethodRef, var: &str) -> SymbolicValue {
        self.lookup(m, var).unwrap_or(SymbolicValue::Top)
    }

    fn lookup(&self, m: &MethodRef, var: &str) -> Option<SymbolicValue> {
        self.values.get(&(m.clone(), var.to_string())).copied()
    }

    pub fn operand(&self, m: &MethodRef, o: &Operand) -> SymbolicValue {
        self.eval(m, o).unwrap_or(SymbolicValue::Top)
    }

    fn eval(&self, m: &MethodRef, o: &Operand) -> Option<SymbolicValue> {
        match o {
            Operand::Lit(Literal::Int(v)) => Some(SymbolicValue::Const(*v)),
            Operand::Lit(_) => Some(SymbolicValue::Top),
            Operand::Var(v) => self.lookup(m, v),
        }
    }

    fn symbol(&mut self, name: &str) -> u32 {
        match self.symbols.iter().position(|s| s == name) {
            Some(p) => p as u32 + 1,
            None => {
                self.symbols.push(name.to_string());
                self.symbols.len() as u32
            }
        }
    }

    fn define(&mut self, m: &MethodRef, var: &str, v: Option<SymbolicValue>) -> bool {
        let Some(v) = v else { return false };
        let key = (m.clone(), var.to_string());
        let next = match self.values.get(&key) {
            Some(old) => old.join(v),
            None => v,
        };
        self.values.insert(key, next) != Some(next)
    }
}

/// Runs propagation to a fixed point over all IR methods in `cg`. Parameters
/// of root methods receive per-record values and start at `Top`.
pub fn symbolic_propagate(cg: &CallGraph, program: &Program, pta: &PointsTo) -> SymbolicEnv {
    let mut env = SymbolicEnv::default();
    let methods: Vec<(MethodRef, &crate::ir::MethodDef)> = cg
        .nodes
        .iter()
        .filter_map(|m| match m {
            MethodRef::Ir(q) => program.method(q).map(|d| (m.clone(), d)),
            MethodRef::GroupInsert(_) => None,
        })
        .collect();
    for r in &cg.roots {
        if let MethodRef::Ir(q) = r {
            if let Some(d) = program.method(q) {
                for p in &d.params {
                    env.define(r, &p.name, Some(SymbolicValue::Top));
                }
            }
        }
    }
    // Symbol ids follow a deterministic first-encounter order.
    for (_, def) in &methods {
        visit_stmts(&def.body, &mut |s| {
            if let StmtKind::Read { name, .. } = &s.kind {
                env.symbol(name);
            }
        });
    }
    let mut changed = true;
    while changed {
        changed = false;
        for (mref, def) in &methods {
            let mut stmts = Vec::new();
            visit_stmts(&def.body, &mut |s| stmts.push(s));
            for s in stmts {
                changed |= step(&mut env, cg, program, pta, mref, def, &s.kind);
            }
        }
    }
    env
}

fn step(
    env: &mut SymbolicEnv,
    cg: &CallGraph,
    program: &Program,
    pta: &PointsTo,
    m: &MethodRef,
    def: &crate::ir::MethodDef,
    kind: &StmtKind,
) -> bool {
    use SymbolicValue::*;
    let top = Some(Top);
    match kind {
        StmtKind::Const { dst, value } => {
            let v = match value {
                Literal::Int(i) => Const(*i),
                _ => Top,
            };
            env.define(m, dst, Some(v))
        }
        StmtKind::Copy { dst, src } => {
            let v = env.lookup(m, src);
            env.define(m, dst, v)
        }
        StmtKind::Global { dst, name } => {
            let v = match program.constant(name) {
                Some(Literal::Int(i)) => Const(*i),
                _ => Top,
            };
            env.define(m, dst, Some(v))
        }
        StmtKind::Read { dst, name, ty } => {
            let integral = crate::ir::PrimKind::from_name(ty).is_some_and(|k| !k.is_float());
            let v = if integral {
                Sym {
                    id: env.symbol(name),
                    offset: 0,
                }
            } else {
                Top
            };
            env.define(m, dst, Some(v))
        }
        StmtKind::Bin { op, dst, a, b } => {
            let (va, vb) = (env.eval(m, a), env.eval(m, b));
            let v = match (va, vb) {
                (Some(x), Some(y)) => Some(match op {
                    BinOp::Add => x.plus(y),
                    BinOp::Sub => x.minus(y),
                    _ => Top,
                }),
                _ => None,
            };
            env.define(m, dst, v)
        }
        StmtKind::Un { dst, .. }
        | StmtKind::New { dst, .. }
        | StmtKind::NewArray { dst, .. }
        | StmtKind::Load { dst, .. }
        | StmtKind::ALoad { dst, .. }
        | StmtKind::ALen { dst, .. } => {
            let mut c = env.define(m, dst, top);
            if let StmtKind::New { ty, ctor, args, .. } = kind {
                c |= bind(
                    env,
                    m,
                    &MethodRef::Ir(format!("{ty}.{ctor}")),
                    program,
                    args,
                );
            }
            c
        }
        StmtKind::Call { dst, func, args } => {
            let callee = MethodRef::Ir(func.clone());
            let mut c = bind(env, m, &callee, program, args);
            if let Some(d) = dst {
                let r = env.lookup(&callee, "$ret");
                c |= env.define(m, d, r);
            }
            c
        }
        StmtKind::Invoke {
            dst,
            recv,
            method,
            args,
        } => {
            let mut c = false;
            for t in pta.var_types(m, recv) {
                let callee = MethodRef::Ir(format!("{t}.{method}"));
                if !cg.contains(&callee) {
                    continue;
                }
                c |= bind(env, m, &callee, program, args);
                if let Some(d) = dst {
                    let r = env.lookup(&callee, "$ret");
                    c |= env.define(m, d, r);
                }
            }
            c
        }
        StmtKind::InitCall { ctor, args } => {
            let owner = def.owner.clone().unwrap_or_default();
            bind(
                env,
                m,
                &MethodRef::Ir(format!("{owner}.{ctor}")),
                program,
                args,
            )
        }
        StmtKind::Return(Some(v)) => {
            let val = env.eval(m, v);
            env.define(m, "$ret", val)
        }
        _ => false,
    }
}

fn bind(
    env: &mut SymbolicEnv,
    caller: &MethodRef,
    callee: &MethodRef,
    program: &Program,
    args: &[Operand],
) -> bool {
    let MethodRef::Ir(q) = callee else {
        return false;
    };
    let Some(def) = program.method(q) else {
        return false;
    };
    let mut c = false;
    for (p, a) in def.params.iter().zip(args) {
        let v = env.eval(caller, a);
        c |= env.define(callee, &p.name, v);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::SymbolicValue::*;

    #[test]
    fn lattice_arithmetic() {
        let s = Sym { id: 1, offset: 0 };
        assert_eq!(Const(2).plus(s).minus(Const(1)), Sym { id: 1, offset: 1 });
        assert_eq!(s.plus(Const(1)), Sym { id: 1, offset: 1 });
        assert_eq!(Const(3).plus(Const(4)), Const(7));
        assert_eq!(s.plus(s), Top);
        assert_eq!(Const(1).minus(s), Top);
    }

    #[test]
    fn join_laws() {
        for v in [Const(1), Sym { id: 2, offset: -1 }, Top] {
            assert_eq!(v.join(v), v);
            assert_eq!(v.join(Top), Top);
        }
        assert_eq!(Const(1).join(Const(2)), Top);
        assert_eq!(Sym { id: 1, offset: 0 }.join(Sym { id: 2, offset: 0 }), Top);
    }

    #[test]
    fn display_matches_symbol_notation() {
        assert_eq!(Sym { id: 1, offset: 1 }.to_string(), "Symbol(1) + 1");
        assert_eq!(Const(4).to_string(), "4");
    }
}
