//! Text front end for the IR.
//!
//! Declarations are line oriented; method bodies are s-expressions terminated
//! by a line holding only `end`. See `docs/ir-grammar.md` for the grammar.

use super::ast::*;
use super::IrError;

#[derive(Debug, Clone)]
enum Sexp {
    Atom(String, Span),
    List(Vec<Sexp>, Span),
}

impl Sexp {
    fn span(&self) -> Span {
        match self {
            Sexp::Atom(_, s) | Sexp::List(_, s) => *s,
        }
    }
}

fn syntax(span: Span, msg: impl Into<String>) -> IrError {
    IrError::Syntax {
        line: span.line,
        col: span.col,
        msg: msg.into(),
    }
}

/// Parses IR source text into a validated [`Program`].
pub fn parse_program(text: &str) -> Result<Program, IrError> {
    let mut consts = Vec::new();
    let mut types: Vec<TypeDecl> = Vec::new();
    let mut methods = Vec::new();
    let mut job = JobSpec::default();

    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let raw = lines[i];
        let lineno = (i + 1) as u32;
        i += 1;
        let line = strip_comment(raw);
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let col = (line.len() - line.trim_start().len() + 1) as u32;
        let span = Span::new(lineno, col);
        let words: Vec<&str> = trimmed.split_whitespace().collect();
        match words[0] {
            "const" => {
                if words.len() != 3 {
                    return Err(syntax(span, "expected `const NAME VALUE`"));
                }
                let value = parse_literal(words[2]).ok_or_else(|| syntax(span, "bad literal"))?;
                consts.push(ConstDecl {
                    name: ident(words[1], span)?,
                    value,
                    span,
                });
            }
            "interface" => {
                if words.len() != 2 {
                    return Err(syntax(span, "expected `interface NAME`"));
                }
                types.push(TypeDecl::Interface {
                    name: ident(words[1], span)?,
                    span,
                });
            }
            "class" => {
                if words.len() < 2 {
                    return Err(syntax(span, "expected `class NAME`"));
                }
                let mut implements = Vec::new();
                if words.len() > 2 {
                    if words[2] != "implements" || words.len() == 3 {
                        return Err(syntax(span, "expected `implements A[, B]`"));
                    }
                    for w in words[3..].join(" ").split(',') {
                        implements.push(ident(w.trim(), span)?);
                    }
                }
                types.push(TypeDecl::Class(ClassDecl {
                    name: ident(words[1], span)?,
                    implements,
                    fields: Vec::new(),
                    span,
                }));
            }
            "field" => {
                let Some(TypeDecl::Class(class)) = types.last_mut() else {
                    return Err(syntax(span, "`field` outside of a class"));
                };
                if words.len() < 3 {
                    return Err(syntax(
                        span,
                        "expected `field NAME TYPE [final] [types A|B]`",
                    ));
                }
                let mut f = FieldDef {
                    name: ident(words[1], span)?,
                    declared: words[2].to_string(),
                    is_final: false,
                    annotated: None,
                    span,
                };
                let mut k = 3;
                while k < words.len() {
                    match words[k] {
                        "final" => f.is_final = true,
                        "types" if k + 1 < words.len() => {
                            k += 1;
                            f.annotated = Some(words[k].split('|').map(str::to_string).collect());
                        }
                        other => {
                            return Err(syntax(span, format!("unexpected `{other}` in field")))
                        }
                    }
                    k += 1;
                }
                class.fields.push(f);
            }
            "method" => {
                let header = trimmed["method".len()..].trim();
                let (owner, name, params, ret) = parse_method_header(header, span)?;
                let mut body_text = String::new();
                let body_start = i;
                let mut closed = false;
                while i < lines.len() {
                    let l = strip_comment(lines[i]);
                    i += 1;
                    if l.trim() == "end" {
                        closed = true;
                        break;
                    }
                    body_text.push_str(l);
                    body_text.push('\n');
                }
                if !closed {
                    return Err(syntax(span, "method without `end`"));
                }
                let sexps = read_sexps(&body_text, body_start as u32)?;
                let body = sexps.iter().map(to_stmt).collect::<Result<Vec<_>, _>>()?;
                methods.push(MethodDef {
                    owner,
                    name,
                    params,
                    ret,
                    body,
                    span,
                });
            }
            "container" => job.containers.push(parse_container(&words, span)?),
            "stage" => {
                if words.len() != 2 {
                    return Err(syntax(span, "expected `stage NAME`"));
                }
                job.stages.push(StageDecl {
                    name: ident(words[1], span)?,
                    phases: Vec::new(),
                    span,
                });
            }
            "phase" => {
                let Some(stage) = job.stages.last_mut() else {
                    return Err(syntax(span, "`phase` outside of a stage"));
                };
                if words.len() != 5 {
                    return Err(syntax(span, "expected `phase NAME source=C udf=M sink=C`"));
                }
                let kv = |key: &str, w: &str| -> Result<String, IrError> {
                    w.strip_prefix(key)
                        .and_then(|r| r.strip_prefix('='))
                        .map(str::to_string)
                        .ok_or_else(|| syntax(span, format!("expected `{key}=...`")))
                };
                stage.phases.push(PhaseDecl {
                    name: ident(words[1], span)?,
                    source: kv("source", words[2])?,
                    udf: kv("udf", words[3])?,
                    sink: kv("sink", words[4])?,
                    span,
                });
            }
            other => return Err(syntax(span, format!("unknown declaration `{other}`"))),
        }
    }
    Program::new(consts, types, methods, job)
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(p) => &line[..p],
        None => line,
    }
}

fn ident(s: &str, span: Span) -> Result<String, IrError> {
    let ok = !s.is_empty()
        && s.chars()
            .all(|c| c.is_alphanumeric() || "_<>.[]$".contains(c))
        && !s.starts_with(|c: char| c.is_ascii_digit());
    if ok {
        Ok(s.to_string())
    } else {
        Err(syntax(span, format!("bad identifier `{s}`")))
    }
}

fn parse_literal(s: &str) -> Option<Literal> {
    match s {
        "null" => return Some(Literal::Null),
        "true" => return Some(Literal::Int(1)),
        "false" => return Some(Literal::Int(0)),
        _ => {}
    }
    let first = s.chars().next()?;
    if !(first.is_ascii_digit() || first == '-' || first == '+' || first == '.') {
        return None;
    }
    if let Ok(v) = s.parse::<i64>() {
        return Some(Literal::Int(v));
    }
    s.parse::<f64>().ok().map(Literal::Float)
}

type Header = (Option<String>, String, Vec<Param>, Option<String>);

fn parse_method_header(h: &str, span: Span) -> Result<Header, IrError> {
    let open = h
        .find('(')
        .ok_or_else(|| syntax(span, "expected `(` in method header"))?;
    let close = h
        .rfind(')')
        .ok_or_else(|| syntax(span, "expected `)` in method header"))?;
    let qname = h[..open].trim();
    let (owner, name) = match qname.find('.') {
        Some(p) => (
            Some(ident(&qname[..p], span)?),
            ident(&qname[p + 1..], span)?,
        ),
        None => (None, ident(qname, span)?),
    };
    let mut params = Vec::new();
    let inner = h[open + 1..close].trim();
    if !inner.is_empty() {
        for p in inner.split(',') {
            let parts: Vec<&str> = p.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(syntax(span, format!("bad parameter `{}`", p.trim())));
            }
            params.push(Param {
                name: ident(parts[0], span)?,
                ty: parts[1].to_string(),
            });
        }
    }
    let rest = h[close + 1..].trim();
    let ret = if rest.is_empty() {
        None
    } else {
        let r = rest
            .strip_prefix("->")
            .ok_or_else(|| syntax(span, "expected `-> TYPE` after parameters"))?;
        Some(r.trim().to_string())
    };
    Ok((owner, name, params, ret))
}

fn parse_container(words: &[&str], span: Span) -> Result<ContainerDecl, IrError> {
    if words.len() < 3 {
        return Err(syntax(span, "expected `container NAME KIND ...`"));
    }
    let kind = ContainerKind::from_keyword(words[2])
        .ok_or_else(|| syntax(span, format!("unknown container kind `{}`", words[2])))?;
    let mut c = ContainerDecl {
        name: ident(words[1], span)?,
        kind,
        ty: None,
        value_ty: None,
        combine: None,
        group: None,
        span,
    };
    let mut positional = Vec::new();
    for w in &words[3..] {
        if let Some(m) = w.strip_prefix("combine=") {
            c.combine = Some(m.to_string());
        } else if let Some(g) = w.strip_prefix("group=") {
            c.group = Some(g.to_string());
        } else {
            positional.push(w.to_string());
        }
    }
    let want = if kind.is_keyed() {
        2
    } else if kind == ContainerKind::Output {
        0
    } else {
        1
    };
    if positional.len() != want && !(kind == ContainerKind::Output && positional.len() == 1) {
        return Err(syntax(
            span,
            format!("container kind `{}` takes {want} type(s)", kind.keyword()),
        ));
    }
    let mut it = positional.into_iter();
    c.ty = it.next();
    c.value_ty = it.next();
    match kind {
        ContainerKind::ShuffleHashReduce | ContainerKind::Reduce if c.combine.is_none() => {
            return Err(syntax(span, "reducing containers need `combine=METHOD`"));
        }
        ContainerKind::ShuffleHashGroup if c.group.is_none() => {
            return Err(syntax(span, "grouping shuffles need `group=TYPE`"));
        }
        _ => {}
    }
    Ok(c)
}

fn read_sexps(text: &str, first_line: u32) -> Result<Vec<Sexp>, IrError> {
    let mut toks: Vec<(String, Span)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = first_line + ln as u32 + 1;
        let mut cur = String::new();
        let mut start = 0usize;
        for (ci, ch) in line.char_indices() {
            if ch == '(' || ch == ')' || ch.is_whitespace() {
                if !cur.is_empty() {
                    toks.push((
                        std::mem::take(&mut cur),
                        Span::new(line_no, start as u32 + 1),
                    ));
                }
                if ch == '(' || ch == ')' {
                    toks.push((ch.to_string(), Span::new(line_no, ci as u32 + 1)));
                }
            } else {
                if cur.is_empty() {
                    start = ci;
                }
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            toks.push((cur, Span::new(line_no, start as u32 + 1)));
        }
    }
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < toks.len() {
        out.push(read_one(&toks, &mut pos)?);
    }
    Ok(out)
}

fn read_one(toks: &[(String, Span)], pos: &mut usize) -> Result<Sexp, IrError> {
    let (t, span) = &toks[*pos];
    *pos += 1;
    match t.as_str() {
        "(" => {
            let mut items = Vec::new();
            loop {
                if *pos >= toks.len() {
                    return Err(syntax(*span, "unbalanced `(`"));
                }
                if toks[*pos].0 == ")" {
                    *pos += 1;
                    return Ok(Sexp::List(items, *span));
                }
                items.push(read_one(toks, pos)?);
            }
        }
        ")" => Err(syntax(*span, "unexpected `)`")),
        _ => Ok(Sexp::Atom(t.clone(), *span)),
    }
}

fn atom(s: &Sexp) -> Result<&str, IrError> {
    match s {
        Sexp::Atom(a, _) => Ok(a),
        Sexp::List(_, sp) => Err(syntax(*sp, "expected an atom")),
    }
}

fn var(s: &Sexp) -> Result<String, IrError> {
    let a = atom(s)?;
    if parse_literal(a).is_some() {
        return Err(syntax(
            s.span(),
            format!("expected a variable, found `{a}`"),
        ));
    }
    ident(a, s.span())
}

fn operand(s: &Sexp) -> Result<Operand, IrError> {
    let a = atom(s)?;
    match parse_literal(a) {
        Some(l) => Ok(Operand::Lit(l)),
        None => Ok(Operand::Var(ident(a, s.span())?)),
    }
}

fn dst_opt(s: &Sexp) -> Result<Option<String>, IrError> {
    if atom(s)? == "_" {
        Ok(None)
    } else {
        var(s).map(Some)
    }
}

fn block(items: &[Sexp]) -> Result<Vec<Stmt>, IrError> {
    items.iter().map(to_stmt).collect()
}

fn to_stmt(s: &Sexp) -> Result<Stmt, IrError> {
    let Sexp::List(items, span) = s else {
        return Err(syntax(s.span(), "expected a statement list"));
    };
    let span = *span;
    let Some(head) = items.first() else {
        return Err(syntax(span, "empty statement"));
    };
    let head = atom(head)?;
    let args = &items[1..];
    let arity = |n: usize| -> Result<(), IrError> {
        if args.len() == n {
            Ok(())
        } else {
            Err(syntax(span, format!("`{head}` takes {n} argument(s)")))
        }
    };
    let kind = if let Some(op) = BinOp::ALL.iter().find(|o| o.keyword() == head) {
        arity(3)?;
        StmtKind::Bin {
            op: *op,
            dst: var(&args[0])?,
            a: operand(&args[1])?,
            b: operand(&args[2])?,
        }
    } else if let Some(op) = UnOp::ALL.iter().find(|o| o.keyword() == head) {
        arity(2)?;
        StmtKind::Un {
            op: *op,
            dst: var(&args[0])?,
            a: operand(&args[1])?,
        }
    } else {
        match head {
            "const" => {
                arity(2)?;
                let lit = parse_literal(atom(&args[1])?)
                    .ok_or_else(|| syntax(args[1].span(), "expected a literal"))?;
                StmtKind::Const {
                    dst: var(&args[0])?,
                    value: lit,
                }
            }
            "copy" => {
                arity(2)?;
                StmtKind::Copy {
                    dst: var(&args[0])?,
                    src: var(&args[1])?,
                }
            }
            "global" => {
                arity(2)?;
                StmtKind::Global {
                    dst: var(&args[0])?,
                    name: var(&args[1])?,
                }
            }
            "read" => {
                arity(3)?;
                StmtKind::Read {
                    dst: var(&args[0])?,
                    name: var(&args[1])?,
                    ty: atom(&args[2])?.to_string(),
                }
            }
            "new" => {
                if args.len() < 3 {
                    return Err(syntax(
                        span,
                        "`new` takes a destination, a type and a constructor",
                    ));
                }
                let ctor = atom(&args[2])?.to_string();
                if !is_ctor_name(&ctor) {
                    return Err(syntax(
                        args[2].span(),
                        "constructor names start with `<init`",
                    ));
                }
                StmtKind::New {
                    dst: var(&args[0])?,
                    ty: atom(&args[1])?.to_string(),
                    ctor,
                    args: args[3..].iter().map(operand).collect::<Result<_, _>>()?,
                }
            }
            "newarray" => {
                arity(3)?;
                let ty = atom(&args[1])?.to_string();
                if array_element(&ty).is_none() {
                    return Err(syntax(
                        args[1].span(),
                        "`newarray` needs an `Array[T]` type",
                    ));
                }
                StmtKind::NewArray {
                    dst: var(&args[0])?,
                    ty,
                    len: operand(&args[2])?,
                }
            }
            "load" => {
                arity(3)?;
                StmtKind::Load {
                    dst: var(&args[0])?,
                    obj: var(&args[1])?,
                    field: atom(&args[2])?.to_string(),
                }
            }
            "store" => {
                arity(3)?;
                StmtKind::Store {
                    obj: var(&args[0])?,
                    field: atom(&args[1])?.to_string(),
                    value: operand(&args[2])?,
                }
            }
            "aload" => {
                arity(3)?;
                StmtKind::ALoad {
                    dst: var(&args[0])?,
                    arr: var(&args[1])?,
                    idx: operand(&args[2])?,
                }
            }
            "astore" => {
                arity(3)?;
                StmtKind::AStore {
                    arr: var(&args[0])?,
                    idx: operand(&args[1])?,
                    value: operand(&args[2])?,
                }
            }
            "alen" => {
                arity(2)?;
                StmtKind::ALen {
                    dst: var(&args[0])?,
                    arr: var(&args[1])?,
                }
            }
            "call" => {
                if args.len() < 2 {
                    return Err(syntax(span, "`call` takes a destination and a function"));
                }
                StmtKind::Call {
                    dst: dst_opt(&args[0])?,
                    func: atom(&args[1])?.to_string(),
                    args: args[2..].iter().map(operand).collect::<Result<_, _>>()?,
                }
            }
            "invoke" => {
                if args.len() < 3 {
                    return Err(syntax(
                        span,
                        "`invoke` takes a destination, a receiver and a method",
                    ));
                }
                StmtKind::Invoke {
                    dst: dst_opt(&args[0])?,
                    recv: var(&args[1])?,
                    method: atom(&args[2])?.to_string(),
                    args: args[3..].iter().map(operand).collect::<Result<_, _>>()?,
                }
            }
            "initcall" => {
                if args.is_empty() {
                    return Err(syntax(span, "`initcall` takes a constructor"));
                }
                let ctor = atom(&args[0])?.to_string();
                if !is_ctor_name(&ctor) {
                    return Err(syntax(
                        args[0].span(),
                        "constructor names start with `<init`",
                    ));
                }
                StmtKind::InitCall {
                    ctor,
                    args: args[1..].iter().map(operand).collect::<Result<_, _>>()?,
                }
            }
            "return" => match args.len() {
                0 => StmtKind::Return(None),
                1 => StmtKind::Return(Some(operand(&args[0])?)),
                _ => return Err(syntax(span, "`return` takes at most one value")),
            },
            "if" => {
                if args.is_empty() || args.len() > 3 {
                    return Err(syntax(span, "expected `(if c (then ...) (else ...))`"));
                }
                let cond = operand(&args[0])?;
                let mut then = Vec::new();
                let mut els = Vec::new();
                for b in &args[1..] {
                    let Sexp::List(bi, bspan) = b else {
                        return Err(syntax(b.span(), "expected `(then ...)` or `(else ...)`"));
                    };
                    match bi.first().map(atom).transpose()? {
                        Some("then") => then = block(&bi[1..])?,
                        Some("else") => els = block(&bi[1..])?,
                        _ => return Err(syntax(*bspan, "expected `then` or `else` block")),
                    }
                }
                StmtKind::If { cond, then, els }
            }
            "while" => {
                if args.is_empty() {
                    return Err(syntax(span, "expected `(while c body...)`"));
                }
                StmtKind::While {
                    cond: var(&args[0])?,
                    body: block(&args[1..])?,
                }
            }
            "emit" => match args.len() {
                1 => StmtKind::Emit {
                    key: None,
                    value: operand(&args[0])?,
                },
                2 => StmtKind::Emit {
                    key: Some(operand(&args[0])?),
                    value: operand(&args[1])?,
                },
                _ => return Err(syntax(span, "`emit` takes one or two values")),
            },
            other => return Err(syntax(span, format!("unknown statement `{other}`"))),
        }
    };
    Ok(Stmt { kind, span })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_empty_program() {
        let p = parse_program("").unwrap();
        assert!(p.types.is_empty() && p.methods.is_empty() && p.job.stages.is_empty());
    }

    #[test]
    fn unknown_field_type_is_named() {
        let err = parse_program("class A\n  field x Foo\n").unwrap_err();
        match err {
            IrError::UnknownType { name, line, .. } => {
                assert_eq!(name, "Foo");
                assert_eq!(line, 2);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn duplicate_type_rejected() {
        let err = parse_program("class A\nclass A\n").unwrap_err();
        assert!(matches!(err, IrError::DuplicateType(n) if n == "A"));
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_program("method f()\n  (add x 1\nend\n").unwrap_err();
        assert!(matches!(err, IrError::Syntax { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn statements_parse() {
        let src = "\
class P
  field v Array[int] final
method P.<init>(n int)
  (newarray a Array[int] n)
  (store this v a)
end
method f(x int) -> int
  (add y x 1)
  (lt c y 10)
  (while c (add y y 1) (lt c y 10))
  (if c (then (return y)) (else (return 0)))
end
";
        let p = parse_program(src).unwrap();
        assert_eq!(p.methods.len(), 2);
        assert_eq!(p.array_types(), &["Array[int]".to_string()]);
        assert!(p.method("P.<init>").unwrap().is_constructor());
    }

    #[test]
    fn broken_phase_chain_rejected() {
        let src = "\
method u(x long)
  (emit x)
end
container a input long
container b cache long
container c cache long
stage s
  phase p1 source=a udf=u sink=b
  phase p2 source=a udf=u sink=c
";
        assert!(matches!(
            parse_program(src),
            Err(IrError::BrokenPhaseChain { .. })
        ));
    }
}
