use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;

use crate::containers::{
    fnv1a, CacheBlock, ContainerError, Event, GroupBuffer, MemoryManager, ReduceBuffer, SortBuffer,
    StorageLevel,
};
use crate::datum::Datum;
use crate::ir::{array_of, Analysis, ContainerDecl, ContainerKind, PrimKind, Program};
use crate::pagestore::{Layout, DEFAULT_PAGE_SIZE};

use super::interp::{coerce_datum, Env, Interp, Outcome};
use super::metrics::{digest, Metrics, Sample};
use super::oracle::OracleTrace;
use super::plan::{ContainerPlan, Decision, ExecutionPlan, Sharing};
use super::{EngineError, Mode};

/// Runtime settings of one job execution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub mode: Mode,
    pub page_size: usize,
    pub budget: usize,
    /// Share of the budget available to cache blocks; shuffles get the rest.
    pub cache_frac: f64,
    pub spill_dir: PathBuf,
    pub partitions: usize,
    pub level: StorageLevel,
    /// Operation budget per UDF invocation.
    pub fuel: u64,
    /// Record a data-size trace (object mode only).
    pub oracle: bool,
}

/// Wall clock for metrics; browsers without a monotonic std clock report 0.
struct Clock(#[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))] std::time::Instant);

impl Clock {
    #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
    fn start() -> Clock {
        Clock(std::time::Instant::now())
    }

    #[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
    fn start() -> Clock {
        Clock()
    }

    fn elapsed_ms(&self) -> u64 {
        #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
        return self.0.elapsed().as_millis() as u64;
        #[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
        return 0;
    }
}

#[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
fn default_spill_dir(n: usize) -> PathBuf {
    std::env::temp_dir().join(format!("segmem-{}-{n}", std::process::id()))
}

/// No file system or process id in the browser; runs there must stay within budget.
#[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
fn default_spill_dir(n: usize) -> PathBuf {
    PathBuf::from(format!("segmem-{n}"))
}

static SPILL_SEQ: AtomicUsize = AtomicUsize::new(0);

impl Default for EngineConfig {
    fn default() -> Self {
        let n = SPILL_SEQ.fetch_add(1, Ordering::Relaxed);
        EngineConfig {
            mode: Mode::Decomposed,
            page_size: DEFAULT_PAGE_SIZE,
            budget: 256 << 20,
            cache_frac: 0.6,
            spill_dir: default_spill_dir(n),
            partitions: 4,
            level: StorageLevel::MemoryAndDisk,
            fuel: 50_000_000,
            oracle: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(0.0..=1.0).contains(&self.cache_frac) {
            return Err(EngineError::Config(format!(
                "cache fraction {} is outside [0, 1]",
                self.cache_frac
            )));
        }
        if self.page_size == 0 || self.budget < 2 * self.page_size {
            return Err(EngineError::Config(format!(
                "budget of {} bytes must be at least two {}-byte pages",
                self.budget, self.page_size
            )));
        }
        if self.partitions == 0 {
            return Err(EngineError::Config(
                "at least one partition is required".into(),
            ));
        }
        if self.oracle && self.mode != Mode::Object {
            return Err(EngineError::Config(
                "the data-size oracle runs in object mode only".into(),
            ));
        }
        Ok(())
    }
}

/// Segment counts of a hash-reduce shuffle, taken before its buffers are read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ShuffleStat {
    /// Keys held per map-side buffer, summed.
    pub keys: u64,
    pub appended_segments: u64,
    pub runs: u64,
}

/// Everything a finished job reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub digest: String,
    #[serde(skip)]
    pub outputs: Vec<Datum>,
    pub metrics: Metrics,
    pub events: Vec<Event>,
    #[serde(skip)]
    pub oracle: Option<OracleTrace>,
    pub final_live_pages: usize,
}

type Emitted = (Option<Datum>, Datum, bool);

enum Sink {
    Cache(Vec<CacheBlock>),
    Reduce(Vec<Vec<ReduceBuffer>>),
    Sort(Vec<Vec<SortBuffer>>),
    Group(Vec<Vec<GroupBuffer>>),
    Accum(Vec<Option<Datum>>),
    Output(Vec<Vec<(Option<Datum>, Datum)>>),
}

/// Executes a planned job phase by phase over partitions.
pub struct Session<'p> {
    program: &'p Program,
    plan: &'p ExecutionPlan,
    interp: Interp,
    cfg: EngineConfig,
    mgr: MemoryManager,
    inputs: BTreeMap<String, Vec<Datum>>,
    broadcasts: BTreeMap<String, Datum>,
    caches: BTreeMap<String, Vec<CacheBlock>>,
    /// Shuffle output per reduce partition, waiting for its reader.
    keyed: BTreeMap<String, Vec<Vec<(Datum, Datum)>>>,
    grouped: BTreeMap<String, Vec<Vec<Datum>>>,
    reduced: BTreeMap<String, Datum>,
    outputs: BTreeMap<String, Vec<(Option<Datum>, Datum)>>,
    released: BTreeSet<String>,
    never_decompose: BTreeSet<String>,
    shuffle_stats: BTreeMap<String, ShuffleStat>,
    oracle: Option<OracleTrace>,
    metrics: Metrics,
    label: String,
    started: Clock,
    /// Whether the session created the spill directory (and may remove it).
    owns_spill_dir: bool,
}

fn prim_of(ty: &Option<String>) -> Option<PrimKind> {
    ty.as_deref().and_then(PrimKind::from_name)
}

fn coerce_opt(k: Option<PrimKind>, d: Datum) -> Datum {
    match k {
        Some(k) => coerce_datum(k, &d),
        None => d,
    }
}

fn route(key: &Datum, parts: usize) -> usize {
    (fnv1a(&key.canonical_bytes()) % parts as u64) as usize
}

/// Runs one UDF invocation and returns what it emitted, in order.
fn invoke(
    interp: &Interp,
    method: usize,
    args: &[Datum],
    broadcasts: &BTreeMap<String, Datum>,
    oracle: &mut Option<OracleTrace>,
    fuel: u64,
) -> Result<(Outcome, Vec<Emitted>), EngineError> {
    let mut emitted = Vec::new();
    let out = {
        let mut collect = |k: Option<Datum>, v: Datum, pass: bool| {
            emitted.push((k, v, pass));
            Ok(())
        };
        let mut env = Env {
            broadcasts,
            emit: Some(&mut collect),
            oracle: oracle.as_mut(),
            fuel,
        };
        interp.run(method, args, &mut env)?
    };
    Ok((out, emitted))
}

fn combiner<'a>(
    interp: &'a Interp,
    method: Option<usize>,
    kind: Option<PrimKind>,
    broadcasts: &'a BTreeMap<String, Datum>,
    oracle: &'a mut Option<OracleTrace>,
    fuel: u64,
) -> impl FnMut(&Datum, &Datum) -> Result<Datum, ContainerError> + 'a {
    move |a, b| {
        let m = method.ok_or_else(|| {
            ContainerError::Combine("the container declares no combine method".into())
        })?;
        let mut env = Env {
            broadcasts,
            emit: None,
            oracle: oracle.as_mut(),
            fuel,
        };
        let out = interp
            .run(m, &[a.clone(), b.clone()], &mut env)
            .map_err(|e| ContainerError::Combine(e.to_string()))?;
        let r = out
            .ret
            .ok_or_else(|| ContainerError::Combine("combine returned no value".into()))?;
        Ok(coerce_opt(kind, r))
    }
}

impl<'p> Session<'p> {
    pub fn new(
        program: &'p Program,
        analysis: &Analysis,
        plan: &'p ExecutionPlan,
        cfg: EngineConfig,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        // Created on the first spill or eviction; removed at the end if it was ours.
        let owns_spill_dir = !cfg.spill_dir.exists();
        let mgr = MemoryManager::new(
            cfg.page_size,
            cfg.budget,
            cfg.cache_frac,
            cfg.level,
            cfg.spill_dir.clone(),
        )
        .map_err(|e| EngineError::Config(e.to_string()))?;
        let oracle = cfg.oracle.then(OracleTrace::new);
        Ok(Session {
            program,
            plan,
            interp: Interp::new(program, analysis)?,
            cfg,
            mgr,
            inputs: BTreeMap::new(),
            broadcasts: BTreeMap::new(),
            caches: BTreeMap::new(),
            keyed: BTreeMap::new(),
            grouped: BTreeMap::new(),
            reduced: BTreeMap::new(),
            outputs: BTreeMap::new(),
            released: BTreeSet::new(),
            never_decompose: BTreeSet::new(),
            shuffle_stats: BTreeMap::new(),
            oracle,
            metrics: Metrics::default(),
            label: String::new(),
            started: Clock::start(),
            owns_spill_dir,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &ExecutionPlan {
        self.plan
    }

    pub fn memory(&self) -> &MemoryManager {
        &self.mgr
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn oracle(&self) -> Option<&OracleTrace> {
        self.oracle.as_ref()
    }

    pub fn shuffle_stats(&self, container: &str) -> Option<ShuffleStat> {
        self.shuffle_stats.get(container).copied()
    }

    /// Label attached to later samples, e.g. an iteration number.
    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    fn decl(&self, name: &str) -> Result<&'p ContainerDecl, EngineError> {
        self.program
            .job
            .container(name)
            .ok_or_else(|| EngineError::Job(format!("unknown container `{name}`")))
    }

    fn cplan(&self, name: &str) -> Result<&'p ContainerPlan, EngineError> {
        self.plan
            .container(name)
            .ok_or_else(|| EngineError::Job(format!("container `{name}` is not in the plan")))
    }

    pub fn set_input(&mut self, name: &str, records: Vec<Datum>) -> Result<(), EngineError> {
        let d = self.decl(name)?;
        if d.kind != ContainerKind::Input {
            return Err(EngineError::Job(format!(
                "`{name}` is not an input container"
            )));
        }
        let k = prim_of(&d.ty);
        self.inputs.insert(
            name.to_string(),
            records.into_iter().map(|r| coerce_opt(k, r)).collect(),
        );
        Ok(())
    }

    /// Supplies the value UDFs obtain with `read NAME`.
    pub fn set_broadcast(&mut self, name: &str, value: Datum) {
        self.broadcasts.insert(name.to_string(), value);
    }

    pub fn reduce_result(&self, name: &str) -> Option<&Datum> {
        self.reduced.get(name)
    }

    /// Records collected by an output container, partition by partition.
    pub fn take_output(&mut self, name: &str) -> Vec<(Option<Datum>, Datum)> {
        self.outputs.remove(name).unwrap_or_default()
    }

    pub fn live_pages(&self) -> usize {
        self.mgr.store.live_pages()
    }

    /// Pages of page groups owned by blocks of cache `name`.
    pub fn container_pages(&self, name: &str) -> usize {
        let prefix = format!("{name}-p");
        self.mgr
            .store
            .groups()
            .filter(|(_, i)| i.owner.starts_with(&prefix))
            .map(|(_, i)| i.page_count())
            .sum()
    }

    pub fn cache_blocks(&self, name: &str) -> Option<&[CacheBlock]> {
        self.caches.get(name).map(Vec::as_slice)
    }

    /// All records of a cache, partition by partition.
    pub fn cache_records(&mut self, name: &str) -> Result<Vec<Datum>, EngineError> {
        let blocks = self
            .caches
            .get(name)
            .ok_or_else(|| ContainerError::Released(name.to_string()))?;
        let mut out = Vec::new();
        for b in blocks {
            let cur = b.cursor(&mut self.mgr)?;
            for i in 0..b.len() {
                out.push(b.get(i, &cur, &self.mgr)?);
            }
        }
        Ok(out)
    }

    /// Ends a cache's lifetime and returns its pages.
    pub fn unpersist(&mut self, name: &str) -> Result<(), EngineError> {
        let blocks = self
            .caches
            .remove(name)
            .ok_or_else(|| ContainerError::Released(name.to_string()))?;
        for mut b in blocks {
            b.release(&mut self.mgr)?;
        }
        let live_pages = self.mgr.store.live_pages();
        self.mgr.events.push(Event::Unpersist {
            container: name.to_string(),
            live_pages,
        });
        self.released.insert(name.to_string());
        Ok(())
    }

    pub fn run_stage(&mut self, stage: &str) -> Result<(), EngineError> {
        let st = self
            .program
            .job
            .stage(stage)
            .ok_or_else(|| EngineError::Job(format!("unknown stage `{stage}`")))?;
        for ph in &st.phases {
            self.run_phase(stage, &ph.name)?;
        }
        Ok(())
    }

    fn sink_layouts(&self, cp: &ContainerPlan) -> (Option<Layout>, Option<Layout>) {
        let paged = matches!(cp.decision, Decision::Decompose | Decision::Pointers { .. });
        if self.cfg.mode == Mode::Object || !paged || self.never_decompose.contains(&cp.name) {
            return (None, None);
        }
        let l = |t: &Option<super::plan::TypePlan>| t.as_ref().and_then(|t| t.layout.clone());
        (l(&cp.elem), l(&cp.value))
    }

    fn new_sink(&mut self, name: &str) -> Result<Sink, EngineError> {
        let d = self.decl(name)?;
        let cp = self.cplan(name)?;
        let p = self.cfg.partitions;
        let (kl, vl) = self.sink_layouts(cp);
        Ok(match d.kind {
            ContainerKind::Cache => {
                if let Some(mut old) = self.caches.remove(name) {
                    for b in &mut old {
                        b.release(&mut self.mgr)?;
                    }
                }
                let mut blocks = Vec::with_capacity(p);
                for i in 0..p {
                    blocks.push(CacheBlock::new(
                        &format!("{name}-p{i}"),
                        kl.clone(),
                        &mut self.mgr,
                    )?);
                }
                Sink::Cache(blocks)
            }
            ContainerKind::ShuffleHashReduce => Sink::Reduce(
                (0..p)
                    .map(|m| {
                        (0..p)
                            .map(|r| {
                                ReduceBuffer::new(
                                    &format!("{name}-m{m}-r{r}"),
                                    kl.clone(),
                                    vl.clone(),
                                )
                            })
                            .collect()
                    })
                    .collect(),
            ),
            ContainerKind::ShuffleSort => Sink::Sort(
                (0..p)
                    .map(|m| {
                        (0..p)
                            .map(|r| {
                                SortBuffer::new(
                                    &format!("{name}-m{m}-r{r}"),
                                    kl.clone(),
                                    vl.clone(),
                                )
                            })
                            .collect()
                    })
                    .collect(),
            ),
            ContainerKind::ShuffleHashGroup => Sink::Group(
                (0..p)
                    .map(|_| (0..p).map(|_| GroupBuffer::new()).collect())
                    .collect(),
            ),
            ContainerKind::Reduce => Sink::Accum(vec![None; p]),
            ContainerKind::Output => Sink::Output(vec![Vec::new(); p]),
            ContainerKind::Input => {
                return Err(EngineError::Job(format!(
                    "input container `{name}` cannot be written"
                )))
            }
        })
    }

    fn run_phase(&mut self, stage: &str, phase: &str) -> Result<(), EngineError> {
        let pp = self
            .plan
            .phase(stage, phase)
            .ok_or_else(|| EngineError::Job(format!("phase {stage}/{phase} is not in the plan")))?;
        if let Some(o) = self.oracle.as_mut() {
            o.set_scope(stage, phase);
        }
        let src = self.decl(&pp.source)?;
        let sink_decl = self.decl(&pp.sink)?;
        let sink_plan = self.cplan(&pp.sink)?;
        let udf = self
            .interp
            .method_id(&pp.udf)
            .ok_or_else(|| EngineError::Job(format!("unknown UDF `{}`", pp.udf)))?;
        let combine = match &sink_decl.combine {
            Some(c) => Some(
                self.interp
                    .method_id(c)
                    .ok_or_else(|| EngineError::Job(format!("unknown combine method `{c}`")))?,
            ),
            None => None,
        };
        if src.kind == ContainerKind::Cache && !self.caches.contains_key(&src.name) {
            return Err(ContainerError::Released(src.name.clone()).into());
        }
        let sharing = if self.cfg.mode == Mode::Decomposed && sink_plan.decision.uses_pages() {
            pp.sharing
        } else {
            Sharing::None
        };

        if sharing == Sharing::Share {
            let blocks = &self.caches[&src.name];
            let mut shared = Vec::with_capacity(blocks.len());
            for (i, b) in blocks.iter().enumerate() {
                shared.push(b.share(&format!("{}-p{i}", pp.sink), &mut self.mgr)?);
            }
            if let Some(mut old) = self.caches.insert(pp.sink.clone(), shared) {
                for b in &mut old {
                    b.release(&mut self.mgr)?;
                }
            }
            self.sample(stage, phase);
            return Ok(());
        }

        let mut sink = if sharing == Sharing::Subset {
            Sink::Cache(Vec::new())
        } else {
            self.new_sink(&pp.sink)?
        };
        let key_kind = if sink_decl.kind.is_keyed() {
            prim_of(&sink_decl.ty)
        } else {
            None
        };
        let val_kind = if sink_decl.kind.is_keyed() {
            prim_of(&sink_decl.value_ty)
        } else {
            prim_of(&sink_decl.ty)
        };
        let parts = self.cfg.partitions;

        for part in 0..parts {
            match src.kind {
                ContainerKind::Input => {
                    let all = self.inputs.get(&src.name).map(Vec::as_slice).unwrap_or(&[]);
                    let (lo, hi) = (part * all.len() / parts, (part + 1) * all.len() / parts);
                    let recs: Vec<Datum> = all[lo..hi].to_vec();
                    for r in recs {
                        let (_, em) = invoke(
                            &self.interp,
                            udf,
                            &[r],
                            &self.broadcasts,
                            &mut self.oracle,
                            self.cfg.fuel,
                        )?;
                        self.metrics.records_in += 1;
                        self.absorb(&mut sink, part, em, key_kind, val_kind, combine, &pp.sink)?;
                    }
                }
                ContainerKind::Cache => {
                    let mut block = {
                        let blocks = self.caches.get_mut(&src.name).expect("checked above");
                        std::mem::replace(
                            &mut blocks[part],
                            CacheBlock::new("", None, &mut self.mgr)?,
                        )
                    };
                    let res = self.read_block(
                        &mut block, part, udf, &mut sink, key_kind, val_kind, combine, sharing,
                        &pp.sink,
                    );
                    if block.reconstructed {
                        self.never_decompose.insert(src.name.clone());
                    }
                    self.caches.get_mut(&src.name).expect("checked above")[part] = block;
                    res?;
                }
                ContainerKind::ShuffleHashReduce | ContainerKind::ShuffleSort => {
                    let recs = self
                        .keyed
                        .get_mut(&src.name)
                        .map(|v| std::mem::take(&mut v[part]))
                        .ok_or_else(|| {
                            EngineError::Job(format!("shuffle `{}` has not been written", src.name))
                        })?;
                    for (k, v) in recs {
                        let (_, em) = invoke(
                            &self.interp,
                            udf,
                            &[k, v],
                            &self.broadcasts,
                            &mut self.oracle,
                            self.cfg.fuel,
                        )?;
                        self.metrics.records_in += 1;
                        self.absorb(&mut sink, part, em, key_kind, val_kind, combine, &pp.sink)?;
                    }
                }
                ContainerKind::ShuffleHashGroup => {
                    let recs = self
                        .grouped
                        .get_mut(&src.name)
                        .map(|v| std::mem::take(&mut v[part]))
                        .ok_or_else(|| {
                            EngineError::Job(format!("shuffle `{}` has not been written", src.name))
                        })?;
                    for g in recs {
                        let (_, em) = invoke(
                            &self.interp,
                            udf,
                            &[g],
                            &self.broadcasts,
                            &mut self.oracle,
                            self.cfg.fuel,
                        )?;
                        self.metrics.records_in += 1;
                        self.absorb(&mut sink, part, em, key_kind, val_kind, combine, &pp.sink)?;
                    }
                }
                ContainerKind::Reduce | ContainerKind::Output => {
                    return Err(EngineError::Job(format!(
                        "`{}` is a driver-side container and cannot be a phase source",
                        src.name
                    )))
                }
            }
        }
        if src.kind.is_shuffle() {
            self.keyed.remove(&src.name);
            self.grouped.remove(&src.name);
        }
        self.metrics.peak_pages = self.metrics.peak_pages.max(self.mgr.store.live_pages());
        self.seal(sink, sink_decl, combine, val_kind)?;
        self.sample(stage, phase);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn read_block(
        &mut self,
        block: &mut CacheBlock,
        part: usize,
        udf: usize,
        sink: &mut Sink,
        key_kind: Option<PrimKind>,
        val_kind: Option<PrimKind>,
        combine: Option<usize>,
        sharing: Sharing,
        sink_name: &str,
    ) -> Result<(), EngineError> {
        let cur = block.cursor(&mut self.mgr)?;
        let mut picks = Vec::new();
        for i in 0..block.len() {
            let d = block.get(i, &cur, &self.mgr)?;
            let (out, em) = invoke(
                &self.interp,
                udf,
                &[d],
                &self.broadcasts,
                &mut self.oracle,
                self.cfg.fuel,
            )?;
            self.metrics.records_in += 1;
            match sharing {
                Sharing::Subset => {
                    self.metrics.records_out += em.len() as u64;
                    picks.extend(std::iter::repeat_n(i, em.len()));
                }
                Sharing::PointerSort if block.is_decomposed() => {
                    let (g, seg, len) = block
                        .segment(i, &cur)
                        .ok_or(ContainerError::OutOfRange(i))?;
                    let Sink::Sort(bufs) = sink else {
                        unreachable!("pointer sort writes a sort sink")
                    };
                    for (k, _, _) in em {
                        let k = coerce_opt(key_kind, k.ok_or_else(|| self.no_key(sink_name))?);
                        let r = route(&k, self.cfg.partitions);
                        bufs[part][r].insert_pointer(k, g, seg, len, &mut self.mgr)?;
                        self.metrics.records_out += 1;
                    }
                }
                _ => self.absorb(sink, part, em, key_kind, val_kind, combine, sink_name)?,
            }
            if let Some(wb) = out.written_back {
                block.set(i, wb, &cur, &mut self.mgr)?;
            }
        }
        if sharing == Sharing::Subset {
            let Sink::Cache(blocks) = sink else {
                unreachable!("subset writes a cache sink")
            };
            blocks.push(block.select(
                &format!("{sink_name}-p{part}"),
                &picks,
                &cur,
                &mut self.mgr,
            )?);
        }
        Ok(())
    }

    fn no_key(&self, sink: &str) -> EngineError {
        EngineError::Job(format!(
            "records emitted into keyed container `{sink}` need a key"
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn absorb(
        &mut self,
        sink: &mut Sink,
        part: usize,
        emitted: Vec<Emitted>,
        key_kind: Option<PrimKind>,
        val_kind: Option<PrimKind>,
        combine: Option<usize>,
        sink_name: &str,
    ) -> Result<(), EngineError> {
        let parts = self.cfg.partitions;
        for (k, v, _) in emitted {
            self.metrics.records_out += 1;
            let v = coerce_opt(val_kind, v);
            let key = |s: &Self| -> Result<Datum, EngineError> {
                k.clone()
                    .map(|k| coerce_opt(key_kind, k))
                    .ok_or_else(|| s.no_key(sink_name))
            };
            match sink {
                Sink::Cache(blocks) => blocks[part].put(v, &mut self.mgr)?,
                Sink::Output(out) => out[part].push((k.map(|k| coerce_opt(key_kind, k)), v)),
                Sink::Accum(acc) => {
                    let slot = &mut acc[part];
                    *slot = Some(match slot.take() {
                        None => v,
                        Some(a) => {
                            let mut f = combiner(
                                &self.interp,
                                combine,
                                val_kind,
                                &self.broadcasts,
                                &mut self.oracle,
                                self.cfg.fuel,
                            );
                            f(&a, &v)?
                        }
                    });
                }
                Sink::Reduce(bufs) => {
                    let k = key(self)?;
                    let r = route(&k, parts);
                    let mut f = combiner(
                        &self.interp,
                        combine,
                        val_kind,
                        &self.broadcasts,
                        &mut self.oracle,
                        self.cfg.fuel,
                    );
                    bufs[part][r].insert(k, v, &mut f, &mut self.mgr)?;
                }
                Sink::Sort(bufs) => {
                    let k = key(self)?;
                    let r = route(&k, parts);
                    bufs[part][r].insert(k, v, &mut self.mgr)?;
                }
                Sink::Group(bufs) => {
                    let k = key(self)?;
                    let r = route(&k, parts);
                    bufs[part][r].insert(k, v);
                }
            }
        }
        Ok(())
    }

    /// Ends the write phase of a sink: merges shuffle buffers per reduce
    /// partition in map order, folds driver-side accumulators in partition
    /// order, and publishes the result for the next reader.
    fn seal(
        &mut self,
        sink: Sink,
        decl: &ContainerDecl,
        combine: Option<usize>,
        val_kind: Option<PrimKind>,
    ) -> Result<(), EngineError> {
        let name = decl.name.clone();
        let parts = self.cfg.partitions;
        match sink {
            Sink::Cache(blocks) => {
                if let Some(mut old) = self.caches.insert(name, blocks) {
                    for b in &mut old {
                        b.release(&mut self.mgr)?;
                    }
                }
            }
            Sink::Output(out) => {
                self.outputs
                    .entry(name)
                    .or_default()
                    .extend(out.into_iter().flatten());
            }
            Sink::Accum(acc) => {
                let mut f = combiner(
                    &self.interp,
                    combine,
                    val_kind,
                    &self.broadcasts,
                    &mut self.oracle,
                    self.cfg.fuel,
                );
                let mut total: Option<Datum> = None;
                for a in acc.into_iter().flatten() {
                    total = Some(match total {
                        None => a,
                        Some(t) => f(&t, &a)?,
                    });
                }
                match total {
                    Some(t) => {
                        self.reduced.insert(name, t);
                    }
                    None => {
                        self.reduced.remove(&name);
                    }
                }
            }
            Sink::Reduce(mut bufs) => {
                let mut stat = ShuffleStat::default();
                for row in &bufs {
                    for b in row {
                        stat.keys += b.len() as u64;
                        stat.appended_segments += b.appended_segments(&self.mgr);
                        stat.runs += b.runs() as u64;
                    }
                }
                self.shuffle_stats.insert(name.clone(), stat);
                let mut merged = vec![Vec::new(); parts];
                for (r, slot) in merged.iter_mut().enumerate() {
                    let mut acc: BTreeMap<Datum, Datum> = BTreeMap::new();
                    for row in bufs.iter_mut() {
                        let mut f = combiner(
                            &self.interp,
                            combine,
                            val_kind,
                            &self.broadcasts,
                            &mut self.oracle,
                            self.cfg.fuel,
                        );
                        let recs = row[r].finish(&mut f, &mut self.mgr)?;
                        for (k, v) in recs {
                            match acc.get_mut(&k) {
                                Some(old) => *old = f(old, &v)?,
                                None => {
                                    acc.insert(k, v);
                                }
                            }
                        }
                    }
                    *slot = acc.into_iter().collect();
                }
                self.keyed.insert(name, merged);
            }
            Sink::Sort(mut bufs) => {
                let mut merged = vec![Vec::new(); parts];
                for (r, slot) in merged.iter_mut().enumerate() {
                    let mut all: Vec<(Datum, Datum)> = Vec::new();
                    for row in bufs.iter_mut() {
                        all.extend(row[r].finish(&mut self.mgr)?);
                    }
                    all.sort_by(|a, b| a.0.cmp(&b.0));
                    *slot = all;
                }
                self.keyed.insert(name, merged);
            }
            Sink::Group(mut bufs) => {
                let g = decl
                    .group
                    .clone()
                    .ok_or_else(|| EngineError::Job(format!("`{name}` declares no group type")))?;
                let vty = array_of(decl.value_ty.as_deref().unwrap_or("long"));
                let mut merged = vec![Vec::new(); parts];
                for (r, slot) in merged.iter_mut().enumerate() {
                    let mut acc: BTreeMap<Datum, Vec<Datum>> = BTreeMap::new();
                    for row in bufs.iter_mut() {
                        for (k, vs) in row[r].finish() {
                            acc.entry(k).or_default().extend(vs);
                        }
                    }
                    *slot = acc
                        .into_iter()
                        .map(|(k, vs)| Datum::obj(&g, vec![k, Datum::array(&vty, vs)]))
                        .collect();
                }
                self.grouped.insert(name, merged);
            }
        }
        Ok(())
    }

    fn sample(&mut self, stage: &str, phase: &str) {
        let mut objects = 0u64;
        let mut modeled = 0u64;
        for blocks in self.caches.values() {
            for b in blocks {
                if !b.is_decomposed() {
                    objects += b.trace_nodes(&self.mgr);
                } else if b.pages(&self.mgr) == 0 && !b.is_empty() {
                    // Pointer arrays into another container's pages.
                    objects += 1;
                }
                modeled += b.modeled_bytes(self.program, &self.mgr);
            }
        }
        for parts in self.keyed.values() {
            for (k, v) in parts.iter().flatten() {
                objects += k.node_count() + v.node_count();
                modeled += k.modeled_bytes(self.program) + v.modeled_bytes(self.program);
            }
        }
        for parts in self.grouped.values() {
            for g in parts.iter().flatten() {
                objects += g.node_count();
                modeled += g.modeled_bytes(self.program);
            }
        }
        let live = self.mgr.store.live_pages();
        let cache_pages = self.mgr.cache_pages();
        modeled += ((live - cache_pages.min(live)) * self.mgr.store.page_size()) as u64;
        let s = Sample {
            seq: self.metrics.samples.len(),
            stage: stage.to_string(),
            phase: phase.to_string(),
            label: self.label.clone(),
            live_pages: live,
            cache_pages,
            shuffle_pages: self.mgr.shuffle_pages(),
            managed_objects: objects,
            trace_cost: objects + live as u64,
            modeled_bytes: modeled,
            spill_runs: self.mgr.spill_count(),
            evictions: self.mgr.evict_count(),
        };
        self.metrics.push(s);
    }

    /// Simulated trace cost of the current heap: managed objects plus live pages.
    pub fn trace_cost(&mut self) -> u64 {
        self.sample("-", "-");
        self.metrics
            .samples
            .pop()
            .map(|s| s.trace_cost)
            .unwrap_or(0)
    }

    /// Ends the job: releases every container and reports. `outputs` are
    /// the job's results in a driver-defined order.
    pub fn finish(mut self, outputs: Vec<Datum>) -> Result<RunOutcome, EngineError> {
        let names: Vec<String> = self.caches.keys().cloned().collect();
        for n in names {
            if let Some(blocks) = self.caches.remove(&n) {
                for mut b in blocks {
                    b.release(&mut self.mgr)?;
                }
            }
        }
        self.keyed.clear();
        self.grouped.clear();
        let final_live_pages = self.mgr.store.live_pages();
        self.metrics.absorb_events(&self.mgr.events);
        self.metrics.elapsed_ms = self.started.elapsed_ms();
        if self.owns_spill_dir {
            let _ = std::fs::remove_dir(&self.cfg.spill_dir);
        }
        Ok(RunOutcome {
            digest: digest(&outputs),
            outputs,
            metrics: self.metrics,
            events: std::mem::take(&mut self.mgr.events),
            oracle: self.oracle,
            final_live_pages,
        })
    }
}
