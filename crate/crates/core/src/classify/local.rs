use std::collections::BTreeMap;

use crate::ir::{
    array_element, build_type_dependency_graph, find_dependency_cycle, IrError, Program, TypeSets,
};

use super::SizeType;

/// Outcome of the type-only classification of one type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalVerdict {
    pub size: SizeType,
    pub evidence: Vec<String>,
}

/// Classifies `ty` from its declaration and field type-sets alone.
pub fn classify_local(
    ty: &str,
    program: &Program,
    sets: &TypeSets,
) -> Result<LocalVerdict, IrError> {
    if Program::is_primitive(ty) {
        return Ok(LocalVerdict {
            size: SizeType::StaticFixed,
            evidence: Vec::new(),
        });
    }
    let g = build_type_dependency_graph(ty, program, sets)?;
    if let Some(cycle) = find_dependency_cycle(&g) {
        return Ok(LocalVerdict {
            size: SizeType::RecurDef,
            evidence: vec![format!("type dependency cycle {}", cycle.join(" -> "))],
        });
    }
    let mut lc = Local {
        program,
        sets,
        memo: BTreeMap::new(),
        evidence: Vec::new(),
    };
    let size = lc.analyze_type(ty);
    Ok(LocalVerdict {
        size,
        evidence: lc.evidence,
    })
}

struct Local<'a> {
    program: &'a Program,
    sets: &'a TypeSets,
    memo: BTreeMap<String, SizeType>,
    evidence: Vec<String>,
}

impl Local<'_> {
    fn analyze_type(&mut self, ty: &str) -> SizeType {
        if Program::is_primitive(ty) {
            return SizeType::StaticFixed;
        }
        if let Some(&s) = self.memo.get(ty) {
            return s;
        }
        let r = if array_element(ty).is_some() {
            let mut elem = SizeType::StaticFixed;
            for m in self.sets.of(ty, crate::ir::ELEMENT_FIELD) {
                elem = elem.max(self.analyze_type(&m));
            }
            if elem == SizeType::StaticFixed {
                SizeType::RuntimeFixed
            } else {
                self.evidence
                    .push(format!("{ty} has elements of {elem} size, not StaticFixed"));
                SizeType::Variable
            }
        } else {
            let mut acc = SizeType::StaticFixed;
            for (f, _, is_final) in self.program.fields_of(ty) {
                let r = self.analyze_field(ty, &f, is_final);
                acc = acc.max(r);
                if acc == SizeType::Variable {
                    break;
                }
            }
            acc
        };
        self.memo.insert(ty.to_string(), r);
        r
    }

    fn analyze_field(&mut self, owner: &str, field: &str, is_final: bool) -> SizeType {
        let mut acc = SizeType::StaticFixed;
        for m in self.sets.of(owner, field) {
            acc = acc.max(self.analyze_type(&m));
            if acc == SizeType::Variable {
                self.evidence
                    .push(format!("{owner}.{field} may hold Variable-size {m}"));
                return acc;
            }
        }
        if !is_final && acc == SizeType::RuntimeFixed {
            self.evidence.push(format!(
                "{owner}.{field} is not final and holds RuntimeFixed data"
            ));
            return SizeType::Variable;
        }
        if is_final && acc == SizeType::RuntimeFixed {
            self.evidence.push(format!(
                "{owner}.{field} is final, so its RuntimeFixed data cannot change size"
            ));
        }
        acc
    }
}
