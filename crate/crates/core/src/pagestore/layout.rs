use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::classify::SizeType;
use crate::datum::Datum;
use crate::ir::{PrimKind, Program, TyRef, TypeSets, ELEMENT_FIELD};

use super::LayoutError;

/// How an array stores its length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ArrayLen {
    /// Length known to the plan; no prefix is stored.
    Const(usize),
    /// A 4-byte little-endian length precedes the elements.
    Prefixed,
}

/// Byte layout of a decomposed value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Layout {
    Prim(#[serde(serialize_with = "ser_prim")] PrimKind),
    Struct {
        ty: String,
        /// Number of declared fields (the length of the object's field vector).
        declared: usize,
        /// Fields in storage order.
        fields: Vec<FieldLayout>,
    },
    Array {
        ty: String,
        elem: Box<Layout>,
        len: ArrayLen,
    },
}

fn ser_prim<S: serde::Serializer>(k: &PrimKind, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(k.name())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldLayout {
    pub name: String,
    /// Position of the field in declaration order.
    pub index: usize,
    /// Offset from the segment start, when it does not depend on the instance.
    pub offset: Option<usize>,
    pub layout: Layout,
}

/// Size of one encoded instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSize {
    Const(usize),
    /// Depends on array length prefixes; the string describes the formula.
    PerInstance(String),
}

impl fmt::Display for DataSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSize::Const(n) => write!(f, "{n}"),
            DataSize::PerInstance(s) => f.write_str(s),
        }
    }
}

impl Layout {
    pub fn type_name(&self) -> &str {
        match self {
            Layout::Prim(k) => k.name(),
            Layout::Struct { ty, .. } | Layout::Array { ty, .. } => ty,
        }
    }

    /// Encoded size shared by every instance, if any.
    pub fn static_size(&self) -> Option<usize> {
        match self {
            Layout::Prim(k) => Some(k.size()),
            Layout::Struct { fields, .. } => fields.iter().map(|f| f.layout.static_size()).sum(),
            Layout::Array {
                elem,
                len: ArrayLen::Const(n),
                ..
            } => elem.static_size().map(|s| s * n),
            Layout::Array { .. } => None,
        }
    }

    /// Length in bytes of the encoded instance starting at `bytes[0]`.
    pub fn segment_len(&self, bytes: &[u8]) -> Result<usize, LayoutError> {
        if let Some(n) = self.static_size() {
            return Ok(n);
        }
        match self {
            Layout::Prim(k) => Ok(k.size()),
            Layout::Struct { fields, .. } => {
                let mut off = 0;
                for f in fields {
                    let rest = bytes.get(off..).ok_or(LayoutError::OutOfBounds)?;
                    off += f.layout.segment_len(rest)?;
                }
                Ok(off)
            }
            Layout::Array { elem, len, .. } => {
                let (n, mut off) = array_header(*len, bytes)?;
                if let Some(es) = elem.static_size() {
                    return Ok(off + es * n);
                }
                for _ in 0..n {
                    let rest = bytes.get(off..).ok_or(LayoutError::OutOfBounds)?;
                    off += elem.segment_len(rest)?;
                }
                Ok(off)
            }
        }
    }

    /// Encoded size of `d` under this layout.
    pub fn encoded_len(&self, d: &Datum) -> Result<usize, LayoutError> {
        if let Some(n) = self.static_size() {
            return Ok(n);
        }
        match (self, d) {
            (Layout::Struct { fields, .. }, Datum::Obj { fields: vals, .. }) => {
                let mut n = 0;
                for f in fields {
                    n += f.layout.encoded_len(
                        vals.get(f.index)
                            .ok_or(LayoutError::Shape("missing field".into()))?,
                    )?;
                }
                Ok(n)
            }
            (Layout::Array { elem, len, .. }, Datum::Array { elems, .. }) => {
                let mut n = if *len == ArrayLen::Prefixed { 4 } else { 0 };
                for e in elems {
                    n += elem.encoded_len(e)?;
                }
                Ok(n)
            }
            (_, Datum::Null) => Err(LayoutError::NullReference),
            _ => Err(LayoutError::Shape(format!(
                "value does not match layout of {}",
                self.type_name()
            ))),
        }
    }

    /// Offset and primitive kind of the value at `path`, relative to the
    /// segment start. Paths look like `features.data[3]` or `[2].x`.
    pub fn locate(&self, bytes: &[u8], path: &str) -> Result<(usize, PrimKind), LayoutError> {
        let steps = parse_path(path)?;
        let mut layout = self;
        let mut off = 0usize;
        for step in &steps {
            match (layout, step) {
                (Layout::Struct { fields, .. }, PathStep::Field(name)) => {
                    let mut found = None;
                    for f in fields {
                        if &f.name == name {
                            found = Some(f);
                            break;
                        }
                        let rest = bytes.get(off..).ok_or(LayoutError::OutOfBounds)?;
                        off += f.layout.segment_len(rest)?;
                    }
                    layout = &found
                        .ok_or_else(|| LayoutError::NoSuchPath(path.to_string()))?
                        .layout;
                }
                (Layout::Array { elem, len, .. }, PathStep::Index(i)) => {
                    let rest = bytes.get(off..).ok_or(LayoutError::OutOfBounds)?;
                    let (n, hdr) = array_header(*len, rest)?;
                    if *i >= n {
                        return Err(LayoutError::IndexOutOfRange { index: *i, len: n });
                    }
                    off += hdr;
                    match elem.static_size() {
                        Some(es) => off += es * i,
                        None => {
                            for _ in 0..*i {
                                let rest = bytes.get(off..).ok_or(LayoutError::OutOfBounds)?;
                                off += elem.segment_len(rest)?;
                            }
                        }
                    }
                    layout = elem;
                }
                _ => return Err(LayoutError::NoSuchPath(path.to_string())),
            }
        }
        match layout {
            Layout::Prim(k) => {
                if off + k.size() > bytes.len() {
                    return Err(LayoutError::OutOfBounds);
                }
                Ok((off, *k))
            }
            _ => Err(LayoutError::NoSuchPath(path.to_string())),
        }
    }

    /// Static offsets of every primitive reachable without crossing a
    /// prefixed array, as `(path, offset)` rows; later fields are `None`.
    pub fn offset_table(&self) -> Vec<(String, Option<usize>)> {
        let mut rows = Vec::new();
        fn walk(
            l: &Layout,
            prefix: &str,
            base: Option<usize>,
            rows: &mut Vec<(String, Option<usize>)>,
        ) {
            match l {
                Layout::Prim(_) => rows.push((prefix.to_string(), base)),
                Layout::Struct { fields, .. } => {
                    for f in fields {
                        let p = if prefix.is_empty() {
                            f.name.clone()
                        } else {
                            format!("{prefix}.{}", f.name)
                        };
                        let o = match (base, f.offset) {
                            (Some(b), Some(o)) => Some(b + o),
                            _ => None,
                        };
                        match &f.layout {
                            Layout::Prim(_) => rows.push((p, o)),
                            Layout::Array { .. } => rows.push((p, o)),
                            inner => walk(inner, &p, o, rows),
                        }
                    }
                }
                Layout::Array { .. } => rows.push((prefix.to_string(), base)),
            }
        }
        walk(self, "", Some(0), &mut rows);
        rows
    }
}

fn array_header(len: ArrayLen, bytes: &[u8]) -> Result<(usize, usize), LayoutError> {
    match len {
        ArrayLen::Const(n) => Ok((n, 0)),
        ArrayLen::Prefixed => {
            let b = bytes.get(..4).ok_or(LayoutError::OutOfBounds)?;
            Ok((
                u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize,
                4,
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum PathStep {
    Field(String),
    Index(usize),
}

fn parse_path(path: &str) -> Result<Vec<PathStep>, LayoutError> {
    let bad = || LayoutError::NoSuchPath(path.to_string());
    let mut steps = Vec::new();
    let mut rest = path;
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix('[') {
            let end = r.find(']').ok_or_else(bad)?;
            steps.push(PathStep::Index(r[..end].parse().map_err(|_| bad())?));
            rest = &r[end + 1..];
        } else {
            let r = rest.strip_prefix('.').unwrap_or(rest);
            let end = r.find(['.', '[']).unwrap_or(r.len());
            if end == 0 {
                return Err(bad());
            }
            steps.push(PathStep::Field(r[..end].to_string()));
            rest = &r[end..];
        }
    }
    Ok(steps)
}

/// Builds the layout of `ty` given its verdict. `const_len(array, via)`
/// reports a plan-known constant length for arrays reached through field
/// `via`, or for top-level arrays when `via` is `None`.
pub fn compute_layout(
    ty: &str,
    verdict: SizeType,
    program: &Program,
    sets: &TypeSets,
    const_len: &ConstLen,
) -> Result<Layout, LayoutError> {
    if !verdict.decomposable() {
        return Err(LayoutError::NotDecomposable {
            ty: ty.to_string(),
            verdict,
        });
    }
    build(ty, None, program, sets, const_len, 0)
}

/// Plan-supplied constant array length for `ty`, reached through `via` (owner, field).
pub type ConstLen<'a> = dyn Fn(&str, Option<(&str, &str)>) -> Option<usize> + 'a;

fn build(
    ty: &str,
    via: Option<(&str, &str)>,
    program: &Program,
    sets: &TypeSets,
    const_len: &ConstLen,
    depth: usize,
) -> Result<Layout, LayoutError> {
    if depth > 64 {
        return Err(LayoutError::Shape(format!("{ty} nests too deeply")));
    }
    let member = |owner: &str, field: &str| -> Result<String, LayoutError> {
        let set = sets.of(owner, field);
        let mut it = set.iter();
        match (it.next(), it.next()) {
            (Some(m), None) => Ok(m.clone()),
            _ => Err(LayoutError::Polymorphic {
                field: format!("{owner}.{field}"),
                types: set.iter().cloned().collect(),
            }),
        }
    };
    match program.resolve(ty) {
        Some(TyRef::Prim(k)) => Ok(Layout::Prim(k)),
        Some(TyRef::Array(_)) => {
            let m = member(ty, ELEMENT_FIELD)?;
            let elem = build(
                &m,
                Some((ty, ELEMENT_FIELD)),
                program,
                sets,
                const_len,
                depth + 1,
            )?;
            let len = match const_len(ty, via) {
                Some(n) => ArrayLen::Const(n),
                None => ArrayLen::Prefixed,
            };
            Ok(Layout::Array {
                ty: ty.to_string(),
                elem: Box::new(elem),
                len,
            })
        }
        Some(TyRef::Class(c)) => {
            let mut fields = Vec::new();
            for (i, f) in c.fields.iter().enumerate() {
                let m = member(ty, &f.name)?;
                let layout = build(&m, Some((ty, &f.name)), program, sets, const_len, depth + 1)?;
                fields.push(FieldLayout {
                    name: f.name.clone(),
                    index: i,
                    offset: None,
                    layout,
                });
            }
            // Fields with instance-independent sizes come first: primitives,
            // then fixed-size objects, then constant-length arrays, then the rest.
            fields.sort_by_key(|f| (category(&f.layout), f.index));
            let mut off = Some(0usize);
            for f in &mut fields {
                f.offset = off;
                off = match (off, f.layout.static_size()) {
                    (Some(o), Some(s)) => Some(o + s),
                    _ => None,
                };
            }
            Ok(Layout::Struct {
                ty: ty.to_string(),
                declared: c.fields.len(),
                fields,
            })
        }
        Some(TyRef::Interface(_)) => Err(LayoutError::Shape(format!("{ty} is abstract"))),
        None => Err(LayoutError::Shape(format!("unknown type {ty}"))),
    }
}

fn category(l: &Layout) -> u8 {
    match (l, l.static_size()) {
        (Layout::Prim(_), _) => 0,
        (Layout::Struct { .. }, Some(_)) => 1,
        (Layout::Array { .. }, Some(_)) => 2,
        _ => 3,
    }
}

/// Data size of a layout: a constant, or a formula over array lengths.
pub fn compute_data_size(layout: &Layout) -> DataSize {
    if let Some(n) = layout.static_size() {
        return DataSize::Const(n);
    }
    fn formula(l: &Layout, path: &str) -> String {
        if let Some(n) = l.static_size() {
            return n.to_string();
        }
        match l {
            Layout::Struct { fields, .. } => {
                let mut konst = 0usize;
                let mut parts = Vec::new();
                for f in fields {
                    let p = if path.is_empty() {
                        f.name.clone()
                    } else {
                        format!("{path}.{}", f.name)
                    };
                    match f.layout.static_size() {
                        Some(n) => konst += n,
                        None => parts.push(formula(&f.layout, &p)),
                    }
                }
                if konst > 0 {
                    parts.insert(0, konst.to_string());
                }
                parts.join(" + ")
            }
            Layout::Array { elem, len, .. } => {
                let name = if path.is_empty() { "self" } else { path };
                let per = match elem.static_size() {
                    Some(n) => n.to_string(),
                    None => format!("({})", formula(elem, &format!("{name}[i]"))),
                };
                match len {
                    ArrayLen::Prefixed => format!("(4 + {per}*len({name}))"),
                    ArrayLen::Const(n) => format!("{n}*{per}"),
                }
            }
            Layout::Prim(k) => k.size().to_string(),
        }
    }
    DataSize::PerInstance(formula(layout, ""))
}

/// Encodes `d` as a byte segment under `layout`.
pub fn encode_object(d: &Datum, layout: &Layout) -> Result<Vec<u8>, LayoutError> {
    let mut out = Vec::with_capacity(layout.static_size().unwrap_or(64));
    encode_into(d, layout, &mut out)?;
    Ok(out)
}

pub fn encode_into(d: &Datum, layout: &Layout, out: &mut Vec<u8>) -> Result<(), LayoutError> {
    match (layout, d) {
        (Layout::Prim(k), _) => write_prim(*k, d, out),
        (
            Layout::Struct {
                ty,
                declared,
                fields,
            },
            Datum::Obj {
                ty: dt,
                fields: vals,
            },
        ) => {
            if &**dt != ty || vals.len() != *declared {
                return Err(LayoutError::Shape(format!("expected {ty}, found {dt}")));
            }
            for f in fields {
                encode_into(&vals[f.index], &f.layout, out)?;
            }
            Ok(())
        }
        (Layout::Array { ty, elem, len }, Datum::Array { ty: dt, elems }) => {
            if &**dt != ty {
                return Err(LayoutError::Shape(format!("expected {ty}, found {dt}")));
            }
            match len {
                ArrayLen::Const(n) if *n != elems.len() => {
                    return Err(LayoutError::Shape(format!(
                        "{ty} has length {} but the layout fixes {n}",
                        elems.len()
                    )))
                }
                ArrayLen::Const(_) => {}
                ArrayLen::Prefixed => {
                    let n = u32::try_from(elems.len())
                        .map_err(|_| LayoutError::Shape("array too long".into()))?;
                    out.extend_from_slice(&n.to_le_bytes());
                }
            }
            if let Layout::Prim(k) = **elem {
                for e in elems {
                    write_prim(k, e, out)?;
                }
            } else {
                for e in elems {
                    encode_into(e, elem, out)?;
                }
            }
            Ok(())
        }
        (_, Datum::Null) => Err(LayoutError::NullReference),
        _ => Err(LayoutError::Shape(format!(
            "value does not match layout of {}",
            layout.type_name()
        ))),
    }
}

fn write_prim(k: PrimKind, d: &Datum, out: &mut Vec<u8>) -> Result<(), LayoutError> {
    match (k, d) {
        (PrimKind::Bool | PrimKind::Byte, Datum::Int(v)) => out.push(*v as u8),
        (PrimKind::Char | PrimKind::Short, Datum::Int(v)) => {
            out.extend_from_slice(&(*v as u16).to_le_bytes())
        }
        (PrimKind::Int, Datum::Int(v)) => out.extend_from_slice(&(*v as i32).to_le_bytes()),
        (PrimKind::Long, Datum::Int(v)) => out.extend_from_slice(&v.to_le_bytes()),
        (PrimKind::Float, Datum::Float(v)) => out.extend_from_slice(&(*v as f32).to_le_bytes()),
        (PrimKind::Double, Datum::Float(v)) => out.extend_from_slice(&v.to_le_bytes()),
        _ => return Err(LayoutError::Shape(format!("{d:?} is not a {}", k.name()))),
    }
    Ok(())
}

/// Decodes a primitive stored at the start of `b`.
pub fn read_prim(k: PrimKind, b: &[u8]) -> Result<Datum, LayoutError> {
    let b = b.get(..k.size()).ok_or(LayoutError::OutOfBounds)?;
    Ok(match k {
        PrimKind::Bool => Datum::Int((b[0] != 0) as i64),
        PrimKind::Byte => Datum::Int(b[0] as i8 as i64),
        PrimKind::Char => Datum::Int(u16::from_le_bytes([b[0], b[1]]) as i64),
        PrimKind::Short => Datum::Int(i16::from_le_bytes([b[0], b[1]]) as i64),
        PrimKind::Int => Datum::Int(i32::from_le_bytes(b.try_into().expect("4")) as i64),
        PrimKind::Long => Datum::Int(i64::from_le_bytes(b.try_into().expect("8"))),
        PrimKind::Float => Datum::Float(f32::from_le_bytes(b.try_into().expect("4")) as f64),
        PrimKind::Double => Datum::Float(f64::from_le_bytes(b.try_into().expect("8"))),
    })
}

/// Decodes one instance; returns the value and the bytes consumed.
pub fn decode_object(bytes: &[u8], layout: &Layout) -> Result<(Datum, usize), LayoutError> {
    match layout {
        Layout::Prim(k) => Ok((read_prim(*k, bytes)?, k.size())),
        Layout::Struct {
            ty,
            declared,
            fields,
        } => {
            let mut vals = vec![Datum::Null; *declared];
            let mut off = 0;
            for f in fields {
                let (v, n) =
                    decode_object(bytes.get(off..).ok_or(LayoutError::OutOfBounds)?, &f.layout)?;
                vals[f.index] = v;
                off += n;
            }
            Ok((
                Datum::Obj {
                    ty: Arc::from(ty.as_str()),
                    fields: vals,
                },
                off,
            ))
        }
        Layout::Array { ty, elem, len } => {
            let (n, mut off) = array_header(*len, bytes)?;
            let mut elems = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let (v, k) =
                    decode_object(bytes.get(off..).ok_or(LayoutError::OutOfBounds)?, elem)?;
                elems.push(v);
                off += k;
            }
            Ok((
                Datum::Array {
                    ty: Arc::from(ty.as_str()),
                    elems,
                },
                off,
            ))
        }
    }
}

/// Reads the primitive at `path` within a segment.
pub fn read_field(segment: &[u8], layout: &Layout, path: &str) -> Result<Datum, LayoutError> {
    let (off, k) = layout.locate(segment, path)?;
    read_prim(k, &segment[off..])
}

/// Overwrites the primitive at `path` within a segment; the segment's
/// length never changes.
pub fn write_field(
    segment: &mut [u8],
    layout: &Layout,
    path: &str,
    value: &Datum,
) -> Result<(), LayoutError> {
    let (off, k) = layout.locate(segment, path)?;
    let mut buf = Vec::with_capacity(8);
    write_prim(k, value, &mut buf)?;
    segment[off..off + buf.len()].copy_from_slice(&buf);
    Ok(())
}
