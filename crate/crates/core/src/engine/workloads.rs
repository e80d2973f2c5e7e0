//! The shipped workloads (WC, LR, KMeans, PR): seeded input generators,
//! text loaders, and drivers that run their jobs through a [`Session`].
//! A generic driver runs any other program on random inputs.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datum::Datum;
use crate::ir::{
    array_element, parse_program, visit_stmts, Analysis, PrimKind, Program, StmtKind, TyRef,
    TypeSets,
};

use super::exec::{EngineConfig, RunOutcome, Session};
use super::plan::{plan_job, ExecutionPlan};
use super::EngineError;

pub const WORKLOADS: [&str; 4] = ["wc", "lr", "kmeans", "pr"];

/// IR source of a shipped workload.
pub fn source(name: &str) -> Option<&'static str> {
    match name {
        "wc" => Some(include_str!("../../corpus/wc.ir")),
        "lr" => Some(include_str!("../../corpus/lr.ir")),
        "kmeans" => Some(include_str!("../../corpus/kmeans.ir")),
        "pr" => Some(include_str!("../../corpus/pr.ir")),
        _ => None,
    }
}

fn unknown(name: &str) -> EngineError {
    EngineError::UnknownWorkload {
        name: name.to_string(),
        available: WORKLOADS.iter().map(|s| s.to_string()).collect(),
    }
}

/// A parsed, analysed and planned program.
pub struct Prepared {
    pub program: Program,
    pub analysis: Analysis,
    pub plan: ExecutionPlan,
}

impl Prepared {
    pub fn from_source(src: &str) -> Result<Prepared, EngineError> {
        let program = parse_program(src)?;
        let analysis = Analysis::new(&program)?;
        let plan = plan_job(&program, &analysis)?;
        Ok(Prepared {
            program,
            analysis,
            plan,
        })
    }

    pub fn workload(name: &str) -> Result<Prepared, EngineError> {
        Prepared::from_source(source(name).ok_or_else(|| unknown(name))?)
    }
}

/// Sizes of generated inputs.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Params {
    pub seed: u64,
    pub wc_tokens: usize,
    pub wc_keys: usize,
    pub lr_points: usize,
    pub lr_iterations: usize,
    pub km_points: usize,
    pub km_k: usize,
    pub km_iterations: usize,
    pub pr_edges: usize,
    pub pr_iterations: usize,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            seed: 1,
            wc_tokens: 100_000,
            wc_keys: 1_000,
            lr_points: 10_000,
            lr_iterations: 30,
            km_points: 10_000,
            km_k: 8,
            km_iterations: 5,
            pr_edges: 10_000,
            pr_iterations: 10,
        }
    }
}

impl Params {
    /// Small inputs for quick randomized runs.
    pub fn small(seed: u64) -> Params {
        Params {
            seed,
            wc_tokens: 300,
            wc_keys: 40,
            lr_points: 60,
            lr_iterations: 2,
            km_points: 80,
            km_k: 4,
            km_iterations: 2,
            pr_edges: 120,
            pr_iterations: 2,
        }
    }
}

/// Dimensions fixed by the shipped LR and KMeans programs.
pub const LR_DIMS: usize = 10;
pub const KM_DIMS: usize = 4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Word ids drawn log-uniformly from `1..=keys` (a Zipf-like skew: id
/// `floor(keys^u)` for uniform `u`).
pub fn gen_wc(p: &Params) -> Vec<Datum> {
    let mut r = rng(p.seed);
    let keys = p.wc_keys.max(1) as f64;
    (0..p.wc_tokens)
        .map(|_| {
            let u: f64 = r.gen();
            Datum::Int(keys.powf(u).floor().clamp(1.0, keys) as i64)
        })
        .collect()
}

/// Labels in {-1, 1} with equal probability; features drawn from
/// N(0.5 * label, 1) per dimension. Each record is `[label, x1..xD]`.
pub fn gen_lr(p: &Params) -> Vec<Datum> {
    let mut r = rng(p.seed);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..p.lr_points)
        .map(|_| {
            let y: f64 = if r.gen::<bool>() { 1.0 } else { -1.0 };
            let mut v = vec![y];
            v.extend((0..LR_DIMS).map(|_| 0.5 * y + n.sample(&mut r)));
            Datum::doubles(&v)
        })
        .collect()
}

/// `k` true centers uniform in [-10, 10]^D; each point picks a center
/// uniformly and adds N(0, 1) noise per dimension.
pub fn gen_kmeans(p: &Params) -> Vec<Datum> {
    let mut r = rng(p.seed);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..p.km_k.max(1))
        .map(|_| (0..KM_DIMS).map(|_| r.gen_range(-10.0..10.0)).collect())
        .collect();
    (0..p.km_points)
        .map(|_| {
            let c = &centers[r.gen_range(0..centers.len())];
            Datum::doubles(&c.iter().map(|x| x + n.sample(&mut r)).collect::<Vec<_>>())
        })
        .collect()
}

/// `edges` directed edges over `max(2, edges / 10)` pages; both endpoints
/// uniform, self-loops redrawn.
pub fn gen_pr(p: &Params) -> Vec<Datum> {
    let mut r = rng(p.seed);
    let pages = (p.pr_edges / 10).max(2) as i64;
    (0..p.pr_edges)
        .map(|_| {
            let s = r.gen_range(0..pages);
            let mut t = r.gen_range(0..pages);
            while t == s {
                t = r.gen_range(0..pages);
            }
            Datum::longs(&[s, t])
        })
        .collect()
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> EngineError {
    EngineError::Input(format!("{}:{line}: {msg}", path.display()))
}

fn read(path: &Path) -> Result<String, EngineError> {
    std::fs::read_to_string(path)
        .map_err(|e| EngineError::Input(format!("{}: {e}", path.display())))
}

/// Loads a workload's input from a whitespace-delimited text file: WC
/// words (each mapped to a stable id), LR `label x1..xD` lines, KMeans
/// `x1..xD` lines, PR `src dst` lines.
pub fn load_input(name: &str, path: &Path) -> Result<Vec<Datum>, EngineError> {
    let text = read(path)?;
    let nums = |line: &str, ln: usize| -> Result<Vec<f64>, EngineError> {
        line.split_whitespace()
            .map(|w| {
                w.parse::<f64>()
                    .map_err(|e| parse_err(path, ln, format!("`{w}`: {e}")))
            })
            .collect()
    };
    let mut out = Vec::new();
    match name {
        "wc" => {
            for w in text.split_whitespace() {
                out.push(Datum::Int(
                    (crate::containers::fnv1a(w.as_bytes()) >> 1) as i64,
                ));
            }
        }
        "lr" | "kmeans" => {
            let want = if name == "lr" { LR_DIMS + 1 } else { KM_DIMS };
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let v = nums(line, i + 1)?;
                if v.len() != want {
                    return Err(parse_err(
                        path,
                        i + 1,
                        format!("expected {want} numbers, found {}", v.len()),
                    ));
                }
                out.push(Datum::doubles(&v));
            }
        }
        "pr" => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let v: Vec<i64> = line
                    .split_whitespace()
                    .map(|w| {
                        w.parse::<i64>()
                            .map_err(|e| parse_err(path, i + 1, format!("`{w}`: {e}")))
                    })
                    .collect::<Result<_, _>>()?;
                if v.len() != 2 || v[0] < 0 || v[1] < 0 {
                    return Err(parse_err(path, i + 1, "expected two non-negative page ids"));
                }
                out.push(Datum::longs(&v));
            }
        }
        _ => return Err(unknown(name)),
    }
    Ok(out)
}

pub fn generate(name: &str, p: &Params) -> Result<Vec<Datum>, EngineError> {
    Ok(match name {
        "wc" => gen_wc(p),
        "lr" => gen_lr(p),
        "kmeans" => gen_kmeans(p),
        "pr" => gen_pr(p),
        _ => return Err(unknown(name)),
    })
}

/// Runs a shipped workload on `input` (generated when `None`).
pub fn run_workload(
    name: &str,
    prep: &Prepared,
    p: &Params,
    input: Option<Vec<Datum>>,
    cfg: EngineConfig,
) -> Result<RunOutcome, EngineError> {
    let input = match input {
        Some(i) => i,
        None => generate(name, p)?,
    };
    let mut s = Session::new(&prep.program, &prep.analysis, &prep.plan, cfg)?;
    match name {
        "wc" => drive_wc(s, input),
        "lr" => {
            s.set_input("lines", input)?;
            drive_lr(s, p.lr_iterations)
        }
        "kmeans" => {
            let k = p.km_k.max(1);
            let centers: Vec<f64> = input
                .iter()
                .take(k)
                .flat_map(|d| {
                    d.elems()
                        .unwrap_or(&[])
                        .iter()
                        .filter_map(Datum::as_float)
                        .collect::<Vec<_>>()
                })
                .collect();
            s.set_input("lines", input)?;
            drive_kmeans(s, centers, p.km_iterations)
        }
        "pr" => {
            let pages = input
                .iter()
                .filter_map(Datum::elems)
                .flat_map(|e| e.iter().filter_map(Datum::as_int))
                .max()
                .map_or(0, |m| m as usize + 1);
            s.set_input("edges", input)?;
            drive_pr(s, pages, p.pr_iterations)
        }
        _ => {
            s.set_label("");
            Err(unknown(name))
        }
    }
}

fn drive_wc(mut s: Session<'_>, tokens: Vec<Datum>) -> Result<RunOutcome, EngineError> {
    s.set_input("tokens", tokens)?;
    s.run_stage("stage1")?;
    s.run_stage("stage2")?;
    let mut out = Vec::new();
    for (k, v) in s.take_output("out") {
        out.push(k.unwrap_or(Datum::Null));
        out.push(v);
    }
    s.finish(out)
}

/// Gradient descent with unit step: `w -= sum of per-point gradients / n`.
fn drive_lr(mut s: Session<'_>, iterations: usize) -> Result<RunOutcome, EngineError> {
    s.run_stage("stage1")?;
    let n = s
        .cache_blocks("points")
        .map_or(0, |b| b.iter().map(|b| b.len()).sum::<usize>())
        .max(1) as f64;
    let mut w = vec![0.0f64; LR_DIMS];
    for it in 0..iterations {
        s.set_label(format!("iteration {it}"));
        s.set_broadcast("weights", Datum::doubles(&w));
        s.run_stage("stage2")?;
        if let Some(g) = s.reduce_result("grad").and_then(Datum::elems) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= gi.as_float().unwrap_or(0.0) / n;
            }
        }
    }
    s.unpersist("points")?;
    s.finish(vec![Datum::doubles(&w)])
}

fn drive_kmeans(
    mut s: Session<'_>,
    mut centers: Vec<f64>,
    iterations: usize,
) -> Result<RunOutcome, EngineError> {
    s.run_stage("stage1")?;
    for it in 0..iterations {
        s.set_label(format!("iteration {it}"));
        s.set_broadcast("centers", Datum::doubles(&centers));
        s.run_stage("stage2")?;
        for (k, v) in s.take_output("newCenters") {
            let (Some(k), Some(f)) = (k.and_then(|k| k.as_int()), v.fields()) else {
                continue;
            };
            let count = f[0].as_int().unwrap_or(0);
            let sums = f[1].elems().unwrap_or(&[]);
            let base = k as usize * KM_DIMS;
            if count > 0 && base + KM_DIMS <= centers.len() {
                for (i, x) in sums.iter().enumerate().take(KM_DIMS) {
                    centers[base + i] = x.as_float().unwrap_or(0.0) / count as f64;
                }
            }
        }
    }
    s.unpersist("points")?;
    s.finish(vec![Datum::doubles(&centers)])
}

fn drive_pr(
    mut s: Session<'_>,
    pages: usize,
    iterations: usize,
) -> Result<RunOutcome, EngineError> {
    s.run_stage("stage1")?;
    let n = pages.max(1) as f64;
    let mut ranks = vec![1.0 / n; pages];
    for it in 0..iterations {
        s.set_label(format!("iteration {it}"));
        s.set_broadcast("ranks", Datum::doubles(&ranks));
        s.run_stage("stage2")?;
        let mut next = vec![0.15 / n; pages];
        for (k, v) in s.take_output("sums") {
            if let (Some(k), Some(v)) = (k.and_then(|k| k.as_int()), v.as_float()) {
                if let Some(r) = next.get_mut(k as usize) {
                    *r += 0.85 * v;
                }
            }
        }
        ranks = next;
    }
    s.unpersist("adjacency")?;
    s.finish(vec![Datum::doubles(&ranks)])
}

/// Random values of declared types: small integers, short arrays, and
/// objects whose reference fields draw from the field's type-set.
pub struct RandomValues<'a> {
    program: &'a Program,
    sets: &'a TypeSets,
    rng: ChaCha8Rng,
}

impl<'a> RandomValues<'a> {
    pub fn new(program: &'a Program, sets: &'a TypeSets, seed: u64) -> Self {
        RandomValues {
            program,
            sets,
            rng: rng(seed),
        }
    }

    fn prim(&mut self, k: PrimKind) -> Datum {
        if k.is_float() {
            Datum::Float(self.rng.gen_range(-4.0f64..4.0))
        } else if k == PrimKind::Bool {
            Datum::Int(self.rng.gen_range(0..2))
        } else {
            Datum::Int(self.rng.gen_range(0..8))
        }
    }

    /// A value of type `ty`; `None` when no concrete type can be built.
    pub fn value(&mut self, ty: &str, depth: usize) -> Option<Datum> {
        match self.program.resolve(ty)? {
            TyRef::Prim(k) => Some(self.prim(k)),
            TyRef::Array(_) => {
                let elem = array_element(ty)?.to_string();
                let len = self.rng.gen_range(1..=6);
                let mut elems = Vec::with_capacity(len);
                for _ in 0..len {
                    elems.push(self.member(ty, crate::ir::ELEMENT_FIELD, &elem, depth)?);
                }
                Some(Datum::array(ty, elems))
            }
            TyRef::Class(c) => {
                let mut fields = Vec::with_capacity(c.fields.len());
                for f in &c.fields {
                    fields.push(self.member(ty, &f.name, &f.declared, depth)?);
                }
                Some(Datum::obj(ty, fields))
            }
            TyRef::Interface(_) => {
                let subs = self.program.concrete_subtypes(ty);
                if subs.is_empty() {
                    return None;
                }
                let pick = subs[self.rng.gen_range(0..subs.len())].clone();
                self.value(&pick, depth)
            }
        }
    }

    fn member(&mut self, owner: &str, field: &str, declared: &str, depth: usize) -> Option<Datum> {
        if let Some(k) = PrimKind::from_name(declared) {
            return Some(self.prim(k));
        }
        if depth >= 4 {
            return Some(Datum::Null);
        }
        let set: Vec<String> = self.sets.of(owner, field).into_iter().collect();
        let ty = if set.is_empty() {
            declared.to_string()
        } else {
            set[self.rng.gen_range(0..set.len())].clone()
        };
        self.value(&ty, depth + 1).or(Some(Datum::Null))
    }
}

/// Runs every stage of an arbitrary program once on random inputs:
/// `records` random values per input container and a random value for
/// every name the program reads.
pub fn run_random(
    prep: &Prepared,
    seed: u64,
    records: usize,
    cfg: EngineConfig,
) -> Result<RunOutcome, EngineError> {
    let mut gen = RandomValues::new(&prep.program, &prep.analysis.type_sets, seed);
    let mut s = Session::new(&prep.program, &prep.analysis, &prep.plan, cfg)?;
    for c in &prep.program.job.containers {
        if c.kind != crate::ir::ContainerKind::Input {
            continue;
        }
        let ty = c.ty.clone().unwrap_or_else(|| "long".into());
        let recs: Vec<Datum> = (0..records).filter_map(|_| gen.value(&ty, 0)).collect();
        s.set_input(&c.name, recs)?;
    }
    let mut reads = BTreeSet::new();
    for m in &prep.program.methods {
        visit_stmts(&m.body, &mut |st| {
            if let StmtKind::Read { name, ty, .. } = &st.kind {
                reads.insert((name.clone(), ty.clone()));
            }
        });
    }
    for (name, ty) in reads {
        if let Some(v) = gen.value(&ty, 0) {
            s.set_broadcast(&name, v);
        }
    }
    for st in &prep.program.job.stages {
        s.run_stage(&st.name)?;
    }
    let mut out = Vec::new();
    for c in &prep.program.job.containers {
        match c.kind {
            crate::ir::ContainerKind::Output => {
                for (k, v) in s.take_output(&c.name) {
                    out.extend(k);
                    out.push(v);
                }
            }
            crate::ir::ContainerKind::Reduce => out.extend(s.reduce_result(&c.name).cloned()),
            crate::ir::ContainerKind::Cache if s.cache_blocks(&c.name).is_some() => {
                out.extend(s.cache_records(&c.name)?);
            }
            _ => {}
        }
    }
    s.finish(out)
}
