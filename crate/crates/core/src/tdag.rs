//! Task graph construction.
//!
//! Tasks are analyzed as if the program executed on a single device:
//! dataflow edges point at the last writers of each read region at the
//! granularity of individual buffer elements, anti edges at previous readers
//! of overwritten regions, output edges at previous writers. Horizon tasks
//! are inserted on a critical-path cadence and subsume older tracking state
//! so the tracker size stays bounded over long programs.

use std::collections::BTreeSet;

use crate::ids::TaskId;
use crate::program::{evaluate_range_mapper, ProgramError, ProgramSpec, TaskSpec, TaskTarget};
use crate::region::{Region, RegionMap};

#[derive(Clone, Debug)]
pub enum TaskKind {
    Epoch { shutdown: bool },
    Kernel { spec: TaskSpec },
    HostTask { spec: TaskSpec },
    Horizon,
}

impl TaskKind {
    pub fn spec(&self) -> Option<&TaskSpec> {
        match self {
            TaskKind::Kernel { spec } | TaskKind::HostTask { spec } => Some(spec),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            TaskKind::Epoch { shutdown: false } => "epoch (init)".into(),
            TaskKind::Epoch { shutdown: true } => "epoch (shutdown)".into(),
            TaskKind::Kernel { spec } => format!("kernel {}", spec.name),
            TaskKind::HostTask { spec } => format!("host task {}", spec.name),
            TaskKind::Horizon => "horizon".into(),
        }
    }
}

/// Dependency kinds, strongest first. When one predecessor is reached for
/// several reasons only the strongest kind is recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskDepKind {
    Dataflow,
    Output,
    Anti,
    HorizonSync,
    LastEpoch,
}

#[derive(Clone, Copy, Debug)]
pub struct TaskDep {
    pub on: TaskId,
    pub kind: TaskDepKind,
}

#[derive(Clone, Debug)]
pub struct TaskRecord {
    pub tid: TaskId,
    pub kind: TaskKind,
    /// Sorted by predecessor id; all predecessor ids are smaller than `tid`.
    pub deps: Vec<TaskDep>,
    pub critical_path: u64,
}

impl TaskRecord {
    pub fn dep_on(&self, t: TaskId) -> Option<TaskDepKind> {
        self.deps.iter().find(|d| d.on == t).map(|d| d.kind)
    }
}

/// Last-writer value for a buffer region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WriterVal {
    /// Never written and not host-initialized.
    Uninit,
    Task(TaskId),
}

struct BufferTracker {
    writers: RegionMap<WriterVal>,
    readers: Vec<(TaskId, Region)>,
}

/// Counts of retained tracking state, used to verify horizon bounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrackerStats {
    pub entries: usize,
    pub distinct_tasks: usize,
}

pub struct TdagBuilder<'p> {
    program: &'p ProgramSpec,
    records: Vec<TaskRecord>,
    trackers: Vec<BufferTracker>,
    /// Current fallback predecessor: the last epoch, or the last applied
    /// horizon once one exists.
    fallback: TaskId,
    /// Most recent horizon; becomes the fallback when the next one appears.
    pending_horizon: Option<TaskId>,
    last_horizon_cp: u64,
    /// Emit a horizon when the critical path grew by this much; `None`
    /// disables horizons.
    horizon_step: Option<u64>,
    front: BTreeSet<TaskId>,
    finished: bool,
    peak_stats: TrackerStats,
}

impl<'p> TdagBuilder<'p> {
    /// Creates the builder and submits the initial epoch (task 0).
    pub fn new(program: &'p ProgramSpec, horizon_step: Option<u64>) -> Self {
        assert!(horizon_step != Some(0), "horizon step must be at least 1");
        let init = TaskRecord {
            tid: TaskId(0),
            kind: TaskKind::Epoch { shutdown: false },
            deps: Vec::new(),
            critical_path: 0,
        };
        let trackers = program
            .buffers
            .iter()
            .map(|b| BufferTracker {
                writers: RegionMap::new(
                    b.extent,
                    if b.host_initialized { WriterVal::Task(TaskId(0)) } else { WriterVal::Uninit },
                ),
                readers: Vec::new(),
            })
            .collect();
        Self {
            program,
            records: vec![init],
            trackers,
            fallback: TaskId(0),
            pending_horizon: None,
            last_horizon_cp: 0,
            horizon_step,
            front: BTreeSet::from([TaskId(0)]),
            finished: false,
            peak_stats: TrackerStats { entries: 1, distinct_tasks: 1 },
        }
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TaskRecord> {
        self.records
    }

    pub fn peak_tracker_stats(&self) -> TrackerStats {
        self.peak_stats
    }

    pub fn tracker_stats(&self) -> TrackerStats {
        let mut entries = 0;
        let mut tids = BTreeSet::new();
        for t in &self.trackers {
            entries += t.writers.len() + t.readers.len();
            for (_, v) in t.writers.entries() {
                if let WriterVal::Task(tid) = v {
                    tids.insert(*tid);
                }
            }
            for (tid, _) in &t.readers {
                tids.insert(*tid);
            }
        }
        TrackerStats { entries, distinct_tasks: tids.len() }
    }

    fn push_record(&mut self, kind: TaskKind, deps: Vec<TaskDep>, cp: u64) -> TaskId {
        let tid = TaskId(self.records.len() as u64);
        for d in &deps {
            self.front.remove(&d.on);
        }
        self.front.insert(tid);
        self.records.push(TaskRecord { tid, kind, deps, critical_path: cp });
        tid
    }

    /// True when `target` is reachable from `from` through existing edges.
    fn reaches(&self, from: TaskId, target: TaskId, extra_deps: &[TaskDep]) -> bool {
        if from == target {
            return true;
        }
        let mut stack: Vec<TaskId> = if from.0 == self.records.len() as u64 {
            // `from` is the task currently being built.
            extra_deps.iter().map(|d| d.on).collect()
        } else {
            self.records[from.0 as usize].deps.iter().map(|d| d.on).collect()
        };
        let mut seen = BTreeSet::new();
        while let Some(t) = stack.pop() {
            if t == target {
                return true;
            }
            // Ids are topological: nothing below the target can reach it.
            if t < target || !seen.insert(t) {
                continue;
            }
            stack.extend(self.records[t.0 as usize].deps.iter().map(|d| d.on));
        }
        false
    }

    /// Merges candidate dependencies, dropping those already implied
    /// transitively. Candidates are processed newest-first so that the
    /// near edge survives and older implied edges are pruned.
    fn resolve_deps(&self, own_tid: TaskId, mut cands: Vec<TaskDep>) -> Vec<TaskDep> {
        cands.sort_by(|a, b| b.on.cmp(&a.on).then(a.kind.cmp(&b.kind)));
        cands.dedup_by(|a, b| a.on == b.on);
        let mut deps: Vec<TaskDep> = Vec::new();
        for c in cands {
            if !self.reaches(own_tid, c.on, &deps) {
                deps.push(c);
            }
        }
        if deps.is_empty() {
            deps.push(TaskDep { on: self.fallback, kind: TaskDepKind::LastEpoch });
        }
        deps.sort_by_key(|d| d.on);
        deps
    }

    fn cp_of_deps(&self, deps: &[TaskDep]) -> u64 {
        deps.iter().map(|d| self.records[d.on.0 as usize].critical_path).max().unwrap_or(0)
    }

    /// Submits one task and computes its dependencies against tracked state.
    pub fn submit(&mut self, spec: TaskSpec) -> Result<TaskId, ProgramError> {
        assert!(!self.finished, "submit after finish");
        let own_tid = TaskId(self.records.len() as u64);
        let mut cands: Vec<TaskDep> = Vec::new();

        // Per-buffer read and write regions (accessor regions unioned).
        let mut per_buffer: Vec<(usize, Region, Region)> = Vec::new();
        for a in &spec.accesses {
            let bid = self.program.buffer_id(&a.buffer).expect("validated").0 as usize;
            let extent = self.program.buffers[bid].extent;
            let region = evaluate_range_mapper(&a.mapper, &spec.index_space, &extent)?;
            let entry = match per_buffer.iter_mut().find(|(b, _, _)| *b == bid) {
                Some(e) => e,
                None => {
                    per_buffer.push((bid, Region::empty(extent.dims()), Region::empty(extent.dims())));
                    per_buffer.last_mut().unwrap()
                }
            };
            if a.mode.reads() {
                entry.1 = entry.1.union(&region);
            }
            if a.mode.writes() {
                entry.2 = entry.2.union(&region);
            }
        }

        for (bid, read, write) in &per_buffer {
            let tracker = &self.trackers[*bid];
            if !read.is_empty() {
                for (_, val) in tracker.writers.query(read).expect("mapped within extent") {
                    if let WriterVal::Task(t) = val {
                        cands.push(TaskDep { on: t, kind: TaskDepKind::Dataflow });
                    }
                }
            }
            if !write.is_empty() {
                for (_, val) in tracker.writers.query(write).expect("mapped within extent") {
                    if let WriterVal::Task(t) = val {
                        cands.push(TaskDep { on: t, kind: TaskDepKind::Output });
                    }
                }
                for (reader, region) in &tracker.readers {
                    if region.intersects(write) {
                        cands.push(TaskDep { on: *reader, kind: TaskDepKind::Anti });
                    }
                }
            }
        }

        let deps = self.resolve_deps(own_tid, cands);
        let cp = 1 + self.cp_of_deps(&deps);

        // Apply tracker updates after analysis.
        for (bid, read, write) in per_buffer {
            let tracker = &mut self.trackers[bid];
            if !read.is_empty() {
                tracker.readers.push((own_tid, read));
            }
            if !write.is_empty() {
                for (_, r) in &mut tracker.readers {
                    *r = r.difference(&write);
                }
                tracker.readers.retain(|(_, r)| !r.is_empty());
                tracker.writers.update(&write, WriterVal::Task(own_tid)).expect("within extent");
            }
        }

        let kind = match spec.target {
            TaskTarget::Device => TaskKind::Kernel { spec },
            TaskTarget::Host => TaskKind::HostTask { spec },
        };
        let tid = self.push_record(kind, deps, cp);
        self.note_stats();
        Ok(tid)
    }

    fn note_stats(&mut self) {
        let s = self.tracker_stats();
        self.peak_stats.entries = self.peak_stats.entries.max(s.entries);
        self.peak_stats.distinct_tasks = self.peak_stats.distinct_tasks.max(s.distinct_tasks);
    }

    /// Emits a horizon when the critical path has grown `horizon_step` past
    /// the previous horizon. Creating a horizon applies its predecessor: the
    /// previous horizon becomes the fallback and subsumes all older tracker
    /// references.
    pub fn generate_horizon_if_due(&mut self) -> Option<TaskId> {
        let step = self.horizon_step?;
        let max_cp = self.records.last().map(|r| r.critical_path).unwrap_or(0);
        if max_cp < self.last_horizon_cp + step {
            return None;
        }
        let deps: Vec<TaskDep> = self
            .front
            .iter()
            .map(|t| TaskDep { on: *t, kind: TaskDepKind::HorizonSync })
            .collect();
        let cp = self.cp_of_deps(&deps);
        let tid = self.push_record(TaskKind::Horizon, deps, cp);
        self.last_horizon_cp = cp;
        if let Some(prev) = self.pending_horizon.replace(tid) {
            self.apply_horizon(prev);
        }
        self.note_stats();
        Some(tid)
    }

    /// Replaces all tracker references older than `horizon` by the horizon
    /// itself and makes it the fallback dependency for new tasks.
    fn apply_horizon(&mut self, horizon: TaskId) {
        self.fallback = horizon;
        for tracker in &mut self.trackers {
            tracker.writers.replace_values(|v| match v {
                WriterVal::Task(t) if *t < horizon => WriterVal::Task(horizon),
                other => *other,
            });
            let mut subsumed = Region::empty(tracker.writers.extent().dims());
            let mut kept = Vec::new();
            for (tid, region) in tracker.readers.drain(..) {
                if tid < horizon {
                    subsumed = subsumed.union(&region);
                } else {
                    kept.push((tid, region));
                }
            }
            if !subsumed.is_empty() {
                kept.push((horizon, subsumed));
            }
            kept.sort_by_key(|(t, _)| *t);
            tracker.readers = kept;
        }
    }

    /// Emits the shutdown epoch. Every prior task is reachable from it.
    pub fn finish(&mut self) -> TaskId {
        assert!(!self.finished, "finish called twice");
        self.finished = true;
        let deps: Vec<TaskDep> = self
            .front
            .iter()
            .map(|t| TaskDep { on: *t, kind: TaskDepKind::HorizonSync })
            .collect();
        let cp = self.cp_of_deps(&deps);
        let tid = self.push_record(TaskKind::Epoch { shutdown: true }, deps, cp);
        self.fallback = tid;
        tid
    }
}

/// Builds the complete task graph for a program in one call.
pub fn build_tdag(
    program: &ProgramSpec,
    horizon_step: Option<u64>,
) -> Result<Vec<TaskRecord>, ProgramError> {
    let mut b = TdagBuilder::new(program, horizon_step);
    for spec in program.unroll() {
        b.submit(spec)?;
        b.generate_horizon_if_due();
    }
    b.finish();
    Ok(b.into_records())
}

/// True when `target` is reachable from `from` over dependency edges.
pub fn task_reaches(records: &[TaskRecord], from: TaskId, target: TaskId) -> bool {
    if from == target {
        return true;
    }
    let mut seen = BTreeSet::new();
    let mut stack = vec![from];
    while let Some(t) = stack.pop() {
        if t == target {
            return true;
        }
        if t < target || !seen.insert(t) {
            continue;
        }
        stack.extend(records[t.0 as usize].deps.iter().map(|d| d.on));
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures as fx;
    use crate::program::{AccessDecl, AccessMode, KernelArchetype, RangeMapper};
    use crate::region::GridBox;

    fn kernel_tids(records: &[TaskRecord]) -> Vec<TaskId> {
        records
            .iter()
            .filter(|r| matches!(r.kind, TaskKind::Kernel { .. } | TaskKind::HostTask { .. }))
            .map(|r| r.tid)
            .collect()
    }

    #[test]
    fn nbody_is_a_linear_chain() {
        let p = fx::nbody(2, 64);
        let records = build_tdag(&p, Some(2)).unwrap();
        let kernels = kernel_tids(&records);
        assert_eq!(kernels.len(), 4);
        for pair in kernels.windows(2) {
            let rec = &records[pair[1].0 as usize];
            assert_eq!(rec.dep_on(pair[0]), Some(TaskDepKind::Dataflow));
            // Linear: exactly one dataflow predecessor.
            assert_eq!(
                rec.deps.iter().filter(|d| d.kind == TaskDepKind::Dataflow).count(),
                1,
                "task {} should have one dataflow dep",
                rec.tid,
            );
        }
        // First kernel depends only on the init epoch.
        let first = &records[kernels[0].0 as usize];
        assert!(first.deps.iter().all(|d| d.on == TaskId(0)));
        // Horizons appear after each timestep+update pair.
        let horizons: Vec<&TaskRecord> =
            records.iter().filter(|r| matches!(r.kind, TaskKind::Horizon)).collect();
        assert_eq!(horizons.len(), 2);
    }

    #[test]
    fn disjoint_writers_both_feed_full_reader() {
        let extent = GridBox::d1(0, 64);
        let p = fx::program(
            1,
            1,
            vec![fx::int_buffer("b", extent, false), fx::int_buffer("out", extent, false)],
            vec![
                fx::fill_task("w_lo", GridBox::d1(0, 32), "b"),
                fx::fill_task("w_hi", GridBox::d1(32, 64), "b"),
                fx::task(
                    "r",
                    extent,
                    vec![
                        AccessDecl {
                            buffer: "b".into(),
                            mode: AccessMode::Read,
                            mapper: RangeMapper::All,
                        },
                        AccessDecl {
                            buffer: "out".into(),
                            mode: AccessMode::Write,
                            mapper: RangeMapper::OneToOne,
                        },
                    ],
                    KernelArchetype::GatherSum { gather_coeff: 1.0, coeffs: vec![], offset: 0.0 },
                ),
            ],
        );
        let records = build_tdag(&p, None).unwrap();
        let kernels = kernel_tids(&records);
        let reader = &records[kernels[2].0 as usize];
        assert_eq!(reader.dep_on(kernels[0]), Some(TaskDepKind::Dataflow));
        assert_eq!(reader.dep_on(kernels[1]), Some(TaskDepKind::Dataflow));
    }

    #[test]
    fn first_task_gets_last_epoch_fallback() {
        let extent = GridBox::d1(0, 16);
        let p = fx::program(
            1,
            1,
            vec![fx::int_buffer("b", extent, false)],
            vec![fx::fill_task("w", extent, "b")],
        );
        let records = build_tdag(&p, None).unwrap();
        let kernels = kernel_tids(&records);
        let rec = &records[kernels[0].0 as usize];
        assert_eq!(rec.deps.len(), 1);
        assert_eq!(rec.deps[0].on, TaskId(0));
        assert_eq!(rec.deps[0].kind, TaskDepKind::LastEpoch);
    }

    #[test]
    fn write_after_read_gets_anti_edge() {
        let extent = GridBox::d1(0, 16);
        let p = fx::program(
            1,
            1,
            vec![fx::int_buffer("b", extent, true), fx::int_buffer("o", extent, false)],
            vec![
                fx::task(
                    "r",
                    extent,
                    vec![
                        AccessDecl {
                            buffer: "b".into(),
                            mode: AccessMode::Read,
                            mapper: RangeMapper::OneToOne,
                        },
                        AccessDecl {
                            buffer: "o".into(),
                            mode: AccessMode::Write,
                            mapper: RangeMapper::OneToOne,
                        },
                    ],
                    KernelArchetype::Map { coeffs: vec![1.0], offset: 0.0 },
                ),
                fx::fill_task("w", extent, "b"),
            ],
        );
        let records = build_tdag(&p, None).unwrap();
        let kernels = kernel_tids(&records);
        let writer = &records[kernels[1].0 as usize];
        assert_eq!(writer.dep_on(kernels[0]), Some(TaskDepKind::Anti));
    }

    #[test]
    fn no_horizons_when_disabled() {
        let p = fx::nbody(2, 64);
        let records = build_tdag(&p, None).unwrap();
        assert!(records.iter().all(|r| !matches!(r.kind, TaskKind::Horizon)));
    }

    #[test]
    fn empty_program_is_two_epochs() {
        let p = fx::program(1, 1, vec![], vec![]);
        let records = build_tdag(&p, Some(2)).unwrap();
        assert_eq!(records.len(), 2);
        assert!(matches!(records[0].kind, TaskKind::Epoch { shutdown: false }));
        assert!(matches!(records[1].kind, TaskKind::Epoch { shutdown: true }));
        assert_eq!(records[1].deps.len(), 1);
    }

    #[test]
    fn every_task_reachable_from_final_epoch() {
        let p = fx::nbody(3, 64);
        let records = build_tdag(&p, Some(2)).unwrap();
        let last = records.last().unwrap().tid;
        for r in &records {
            assert!(task_reaches(&records, last, r.tid), "{} unreachable", r.tid);
        }
    }

    #[test]
    fn ids_are_topological_and_acyclic() {
        let p = fx::nbody(4, 64);
        let records = build_tdag(&p, Some(2)).unwrap();
        for r in &records {
            for d in &r.deps {
                assert!(d.on < r.tid);
            }
        }
    }

    #[test]
    fn long_loop_tracker_state_is_bounded() {
        let extent = GridBox::d1(0, 64);
        let steps = 1000;
        let p = fx::program(
            1,
            1,
            vec![fx::int_buffer("b", extent, true)],
            vec![fx::loop_body(
                steps,
                vec![fx::rw_map_task("step", extent, "b")],
            )],
        );
        let mut b = TdagBuilder::new(&p, Some(2));
        for spec in p.unroll() {
            b.submit(spec).unwrap();
            b.generate_horizon_if_due();
        }
        b.finish();
        let peak = b.peak_tracker_stats();
        assert!(peak.distinct_tasks <= 8, "distinct tids unbounded: {peak:?}");
        assert!(peak.entries <= 16, "entries unbounded: {peak:?}");
    }

    #[test]
    fn horizon_subsumes_old_tracker_references() {
        let extent = GridBox::d1(0, 64);
        let p = fx::program(
            1,
            1,
            vec![fx::int_buffer("b", extent, true)],
            vec![fx::loop_body(20, vec![fx::rw_map_task("step", extent, "b")])],
        );
        let mut b = TdagBuilder::new(&p, Some(2));
        let mut applied: Option<TaskId> = None;
        let mut pending: Option<TaskId> = None;
        for spec in p.unroll() {
            b.submit(spec).unwrap();
            if let Some(h) = b.generate_horizon_if_due() {
                applied = pending.replace(h);
            }
            if let Some(a) = applied {
                let min_tid = b
                    .trackers
                    .iter()
                    .flat_map(|t| {
                        t.writers.entries().iter().filter_map(|(_, v)| match v {
                            WriterVal::Task(t) => Some(*t),
                            _ => None,
                        })
                    })
                    .min();
                if let Some(m) = min_tid {
                    assert!(m >= a, "tracker references {m} below applied horizon {a}");
                }
            }
        }
    }

    /// Element-granular dependency oracle: per-element last-writer scan over
    /// small random programs; every oracle edge must be present or implied.
    #[test]
    fn dataflow_matches_per_element_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let p = fx::random_1d_program(&mut rng, 24, 6);
            let records = build_tdag(&p, None).unwrap();
            let kernels = kernel_tids(&records);
            let specs: Vec<&TaskSpec> =
                kernels.iter().map(|t| records[t.0 as usize].kind.spec().unwrap()).collect();

            // Oracle: element -> last writer kernel index.
            let mut last_writer: Vec<Vec<Option<usize>>> = p
                .buffers
                .iter()
                .map(|b| vec![None; b.extent.volume() as usize])
                .collect();
            for (ki, spec) in specs.iter().enumerate() {
                let mut expect = BTreeSet::new();
                for a in &spec.accesses {
                    let bid = p.buffer_id(&a.buffer).unwrap().0 as usize;
                    let extent = p.buffers[bid].extent;
                    let region =
                        evaluate_range_mapper(&a.mapper, &spec.index_space, &extent).unwrap();
                    if a.mode.reads() {
                        for bx in region.boxes() {
                            for pt in bx.iter_points() {
                                if let Some(w) = last_writer[bid][extent.linear_index(pt)] {
                                    expect.insert(w);
                                }
                            }
                        }
                    }
                }
                for a in &spec.accesses {
                    let bid = p.buffer_id(&a.buffer).unwrap().0 as usize;
                    let extent = p.buffers[bid].extent;
                    let region =
                        evaluate_range_mapper(&a.mapper, &spec.index_space, &extent).unwrap();
                    if a.mode.writes() {
                        for bx in region.boxes() {
                            for pt in bx.iter_points() {
                                last_writer[bid][extent.linear_index(pt)] = Some(ki);
                            }
                        }
                    }
                }
                // Each expected edge is an edge or transitively implied.
                for w in &expect {
                    assert!(
                        task_reaches(&records, kernels[ki], kernels[*w]),
                        "missing dataflow {} -> {}",
                        kernels[ki],
                        kernels[*w],
                    );
                }
                // No spurious direct dataflow edges.
                for d in &records[kernels[ki].0 as usize].deps {
                    if d.kind == TaskDepKind::Dataflow {
                        if let Some(widx) = kernels.iter().position(|t| *t == d.on) {
                            assert!(expect.contains(&widx), "spurious edge to {}", d.on);
                        }
                    }
                }
            }
        }
    }
}
