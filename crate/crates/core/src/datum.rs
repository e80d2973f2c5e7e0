//! Owned record values exchanged between containers, the interpreter and
//! workload drivers.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::ir::{array_element, PrimKind, Program};

/// A record value with value semantics: nested objects are owned, so two
/// references to one object become two copies.
#[derive(Debug, Clone)]
pub enum Datum {
    Null,
    Int(i64),
    Float(f64),
    Obj { ty: Arc<str>, fields: Vec<Datum> },
    Array { ty: Arc<str>, elems: Vec<Datum> },
}

impl PartialEq for Datum {
    /// Structural equality; floats compare by bit pattern.
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Datum::Null, Datum::Null) => true,
            (Datum::Int(a), Datum::Int(b)) => a == b,
            (Datum::Float(a), Datum::Float(b)) => a.to_bits() == b.to_bits(),
            (Datum::Obj { ty: t1, fields: f1 }, Datum::Obj { ty: t2, fields: f2 }) => {
                t1 == t2 && f1 == f2
            }
            (Datum::Array { ty: t1, elems: e1 }, Datum::Array { ty: t2, elems: e2 }) => {
                t1 == t2 && e1 == e2
            }
            _ => false,
        }
    }
}

impl Eq for Datum {}

impl PartialOrd for Datum {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Datum {
    /// Total order used for key sorting: by variant, then numerically or
    /// lexicographically.
    fn cmp(&self, other: &Self) -> Ordering {
        fn rank(d: &Datum) -> u8 {
            match d {
                Datum::Null => 0,
                Datum::Int(_) => 1,
                Datum::Float(_) => 2,
                Datum::Obj { .. } => 3,
                Datum::Array { .. } => 4,
            }
        }
        match (self, other) {
            (Datum::Int(a), Datum::Int(b)) => a.cmp(b),
            (Datum::Float(a), Datum::Float(b)) => a.total_cmp(b),
            (Datum::Obj { ty: t1, fields: f1 }, Datum::Obj { ty: t2, fields: f2 }) => {
                t1.cmp(t2).then_with(|| f1.cmp(f2))
            }
            (Datum::Array { ty: t1, elems: e1 }, Datum::Array { ty: t2, elems: e2 }) => {
                t1.cmp(t2).then_with(|| e1.cmp(e2))
            }
            _ => rank(self).cmp(&rank(other)),
        }
    }
}

impl Datum {
    pub fn obj(ty: &str, fields: Vec<Datum>) -> Datum {
        Datum::Obj {
            ty: Arc::from(ty),
            fields,
        }
    }

    pub fn array(ty: &str, elems: Vec<Datum>) -> Datum {
        Datum::Array {
            ty: Arc::from(ty),
            elems,
        }
    }

    pub fn doubles(v: &[f64]) -> Datum {
        Datum::array(
            "Array[double]",
            v.iter().map(|x| Datum::Float(*x)).collect(),
        )
    }

    pub fn longs(v: &[i64]) -> Datum {
        Datum::array("Array[long]", v.iter().map(|x| Datum::Int(*x)).collect())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Datum::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Datum::Float(v) => Some(*v),
            Datum::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn type_name(&self) -> Option<&str> {
        match self {
            Datum::Obj { ty, .. } | Datum::Array { ty, .. } => Some(ty),
            _ => None,
        }
    }

    pub fn elems(&self) -> Option<&[Datum]> {
        match self {
            Datum::Array { elems, .. } => Some(elems),
            _ => None,
        }
    }

    pub fn fields(&self) -> Option<&[Datum]> {
        match self {
            Datum::Obj { fields, .. } => Some(fields),
            _ => None,
        }
    }

    /// Self-describing byte form used for digests and key hashing in
    /// object mode; independent of any layout.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_canonical(&mut out);
        out
    }

    pub fn write_canonical(&self, out: &mut Vec<u8>) {
        match self {
            Datum::Null => out.push(0),
            Datum::Int(v) => {
                out.push(1);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Datum::Float(v) => {
                out.push(2);
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            Datum::Obj { ty, fields } => {
                out.push(3);
                out.extend_from_slice(&(ty.len() as u32).to_le_bytes());
                out.extend_from_slice(ty.as_bytes());
                out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
                for f in fields {
                    f.write_canonical(out);
                }
            }
            Datum::Array { ty, elems } => {
                out.push(4);
                out.extend_from_slice(&(ty.len() as u32).to_le_bytes());
                out.extend_from_slice(ty.as_bytes());
                out.extend_from_slice(&(elems.len() as u32).to_le_bytes());
                for e in elems {
                    e.write_canonical(out);
                }
            }
        }
    }

    /// Number of heap nodes (objects and arrays) in the value.
    pub fn node_count(&self) -> u64 {
        match self {
            Datum::Obj { fields, .. } => 1 + fields.iter().map(Datum::node_count).sum::<u64>(),
            Datum::Array { elems, .. } => 1 + elems.iter().map(Datum::node_count).sum::<u64>(),
            _ => 0,
        }
    }

    /// Modelled object-mode heap bytes: a 16-byte header per object or array,
    /// 8 bytes per reference slot, and the declared width of each primitive.
    pub fn modeled_bytes(&self, program: &Program) -> u64 {
        const HEADER: u64 = 16;
        const REF: u64 = 8;
        match self {
            Datum::Obj { ty, fields } => {
                let decls = program.fields_of(ty);
                let mut n = HEADER;
                for (i, f) in fields.iter().enumerate() {
                    match decls.get(i).and_then(|(_, d, _)| PrimKind::from_name(d)) {
                        Some(k) => n += k.size() as u64,
                        None => n += REF + f.modeled_bytes(program),
                    }
                }
                n
            }
            Datum::Array { ty, elems } => {
                let mut n = HEADER;
                match array_element(ty).and_then(PrimKind::from_name) {
                    Some(k) => n += (k.size() * elems.len()) as u64,
                    None => {
                        for e in elems {
                            n += REF + e.modeled_bytes(program);
                        }
                    }
                }
                n
            }
            _ => 0,
        }
    }

    /// Sum of primitive field widths over the value's object graph; null
    /// references contribute nothing.
    pub fn data_size(&self, program: &Program) -> u64 {
        match self {
            Datum::Obj { ty, fields } => {
                let decls = program.fields_of(ty);
                fields
                    .iter()
                    .enumerate()
                    .map(
                        |(i, f)| match decls.get(i).and_then(|(_, d, _)| PrimKind::from_name(d)) {
                            Some(k) => k.size() as u64,
                            None => f.data_size(program),
                        },
                    )
                    .sum()
            }
            Datum::Array { ty, elems } => match array_element(ty).and_then(PrimKind::from_name) {
                Some(k) => (k.size() * elems.len()) as u64,
                None => elems.iter().map(|e| e.data_size(program)).sum(),
            },
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_equality_is_bitwise() {
        assert_eq!(Datum::Float(f64::NAN), Datum::Float(f64::NAN));
        assert_ne!(Datum::Float(0.0), Datum::Float(-0.0));
    }

    #[test]
    fn ordering_is_numeric_for_ints() {
        let mut v = vec![Datum::Int(3), Datum::Int(-1), Datum::Int(2)];
        v.sort();
        assert_eq!(v, vec![Datum::Int(-1), Datum::Int(2), Datum::Int(3)]);
    }

    #[test]
    fn canonical_bytes_distinguish_variants() {
        assert_ne!(
            Datum::Int(1).canonical_bytes(),
            Datum::Float(1.0).canonical_bytes()
        );
        assert_eq!(Datum::Null.canonical_bytes(), vec![0]);
    }
}
