use std::fmt::Write;

use super::ast::*;

/// Renders a program in the canonical text form accepted by [`super::parse_program`].
pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    for c in &p.consts {
        let _ = writeln!(out, "const {} {}", c.name, c.value);
    }
    for t in &p.types {
        match t {
            TypeDecl::Interface { name, .. } => {
                let _ = writeln!(out, "interface {name}");
            }
            TypeDecl::Class(c) => {
                let _ = write!(out, "class {}", c.name);
                if !c.implements.is_empty() {
                    let _ = write!(out, " implements {}", c.implements.join(", "));
                }
                out.push('\n');
                for f in &c.fields {
                    let _ = write!(out, "  field {} {}", f.name, f.declared);
                    if f.is_final {
                        out.push_str(" final");
                    }
                    if let Some(a) = &f.annotated {
                        let _ = write!(out, " types {}", a.join("|"));
                    }
                    out.push('\n');
                }
            }
        }
    }
    for m in &p.methods {
        let params: Vec<String> = m
            .params
            .iter()
            .map(|p| format!("{} {}", p.name, p.ty))
            .collect();
        let _ = write!(out, "method {}({})", m.qualified(), params.join(", "));
        if let Some(r) = &m.ret {
            let _ = write!(out, " -> {r}");
        }
        out.push('\n');
        for s in &m.body {
            print_stmt(&mut out, s, 1);
        }
        out.push_str("end\n");
    }
    for c in &p.job.containers {
        let _ = write!(out, "container {} {}", c.name, c.kind.keyword());
        for t in [&c.ty, &c.value_ty].into_iter().flatten() {
            let _ = write!(out, " {t}");
        }
        if let Some(m) = &c.combine {
            let _ = write!(out, " combine={m}");
        }
        if let Some(g) = &c.group {
            let _ = write!(out, " group={g}");
        }
        out.push('\n');
    }
    for s in &p.job.stages {
        let _ = writeln!(out, "stage {}", s.name);
        for ph in &s.phases {
            let _ = writeln!(
                out,
                "  phase {} source={} udf={} sink={}",
                ph.name, ph.source, ph.udf, ph.sink
            );
        }
    }
    out
}

fn ops(args: &[Operand]) -> String {
    args.iter().map(|a| format!(" {a}")).collect()
}

fn print_stmt(out: &mut String, s: &Stmt, depth: usize) {
    let pad = "  ".repeat(depth);
    let line = match &s.kind {
        StmtKind::Const { dst, value } => format!("(const {dst} {value})"),
        StmtKind::Copy { dst, src } => format!("(copy {dst} {src})"),
        StmtKind::Global { dst, name } => format!("(global {dst} {name})"),
        StmtKind::Read { dst, name, ty } => format!("(read {dst} {name} {ty})"),
        StmtKind::Bin { op, dst, a, b } => format!("({} {dst} {a} {b})", op.keyword()),
        StmtKind::Un { op, dst, a } => format!("({} {dst} {a})", op.keyword()),
        StmtKind::New {
            dst,
            ty,
            ctor,
            args,
        } => format!("(new {dst} {ty} {ctor}{})", ops(args)),
        StmtKind::NewArray { dst, ty, len } => format!("(newarray {dst} {ty} {len})"),
        StmtKind::Load { dst, obj, field } => format!("(load {dst} {obj} {field})"),
        StmtKind::Store { obj, field, value } => format!("(store {obj} {field} {value})"),
        StmtKind::ALoad { dst, arr, idx } => format!("(aload {dst} {arr} {idx})"),
        StmtKind::AStore { arr, idx, value } => format!("(astore {arr} {idx} {value})"),
        StmtKind::ALen { dst, arr } => format!("(alen {dst} {arr})"),
        StmtKind::Call { dst, func, args } => {
            format!(
                "(call {} {func}{})",
                dst.as_deref().unwrap_or("_"),
                ops(args)
            )
        }
        StmtKind::Invoke {
            dst,
            recv,
            method,
            args,
        } => format!(
            "(invoke {} {recv} {method}{})",
            dst.as_deref().unwrap_or("_"),
            ops(args)
        ),
        StmtKind::InitCall { ctor, args } => format!("(initcall {ctor}{})", ops(args)),
        StmtKind::Return(None) => "(return)".to_string(),
        StmtKind::Return(Some(v)) => format!("(return {v})"),
        StmtKind::Emit { key: None, value } => format!("(emit {value})"),
        StmtKind::Emit {
            key: Some(k),
            value,
        } => format!("(emit {k} {value})"),
        StmtKind::If { cond, then, els } => {
            let _ = writeln!(out, "{pad}(if {cond}");
            let _ = writeln!(out, "{pad}  (then");
            for t in then {
                print_stmt(out, t, depth + 2);
            }
            let _ = writeln!(out, "{pad}  )");
            if !els.is_empty() {
                let _ = writeln!(out, "{pad}  (else");
                for e in els {
                    print_stmt(out, e, depth + 2);
                }
                let _ = writeln!(out, "{pad}  )");
            }
            let _ = writeln!(out, "{pad})");
            return;
        }
        StmtKind::While { cond, body } => {
            let _ = writeln!(out, "{pad}(while {cond}");
            for b in body {
                print_stmt(out, b, depth + 1);
            }
            let _ = writeln!(out, "{pad})");
            return;
        }
    };
    let _ = writeln!(out, "{pad}{line}");
}
