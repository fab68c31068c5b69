//! Per-node distributed command graph generation.
//!
//! Every node runs an identical builder over the task stream and generates
//! only the commands it will itself execute: its kernel chunk, pushes of
//! locally-owned data that remote chunks read, and await-pushes for data it
//! needs but does not own. The writer/replication tracking is replicated
//! state: all nodes compute it identically, which is what makes the
//! distributed generation consistent without communication.

use std::collections::BTreeSet;

use crate::ids::{BufferId, CommandId, NodeId, TaskId, TransferId};
use crate::program::{evaluate_range_mapper, ProgramError, ProgramSpec, TaskSpec};
use crate::region::{GridBox, Region, RegionMap};
use crate::tdag::{TaskDepKind, TaskKind, TaskRecord};

/// Bitmask of node ids holding a current copy of a region (≤ 64 nodes).
pub type NodeSet = u64;

fn node_bit(n: NodeId) -> NodeSet {
    1u64 << n.0
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CommandKind {
    Execution { chunk: GridBox },
    Push { target: NodeId, buffer: BufferId, region: Region, transfer: TransferId },
    AwaitPush { buffer: BufferId, region: Region, transfer: TransferId },
    Epoch { shutdown: bool },
    Horizon,
}

impl CommandKind {
    pub fn label(&self) -> String {
        match self {
            CommandKind::Execution { chunk } => format!("execution {chunk:?}"),
            CommandKind::Push { target, region, transfer, .. } => {
                format!("push {region:?} to {target} ({transfer})")
            }
            CommandKind::AwaitPush { region, transfer, .. } => {
                format!("await push {region:?} ({transfer})")
            }
            CommandKind::Epoch { shutdown: false } => "epoch (init)".into(),
            CommandKind::Epoch { shutdown: true } => "epoch (shutdown)".into(),
            CommandKind::Horizon => "horizon".into(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CommandDep {
    pub on: CommandId,
    pub kind: TaskDepKind,
}

#[derive(Clone, Debug)]
pub struct CommandRecord {
    pub cid: CommandId,
    pub node: NodeId,
    pub origin: TaskId,
    pub kind: CommandKind,
    pub deps: Vec<CommandDep>,
}

impl CommandRecord {
    pub fn dep_on(&self, c: CommandId) -> Option<TaskDepKind> {
        self.deps.iter().find(|d| d.on == c).map(|d| d.kind)
    }
}

/// Splits a kernel index space into `parts` contiguous chunks along the
/// slowest-varying axis. Chunk sizes differ by at most one, with the
/// remainder going to lower ids; chunks beyond the extent are empty.
pub fn split_task(space: &GridBox, parts: u64) -> Vec<GridBox> {
    assert!(parts >= 1);
    let total = space.extent(0);
    let base = total / parts;
    let rem = total % parts;
    let mut out = Vec::with_capacity(parts as usize);
    let mut lo = space.lower()[0];
    for i in 0..parts {
        let len = base + u64::from(i < rem);
        if len == 0 {
            out.push(GridBox::empty(space.dims()));
            continue;
        }
        let mut min = space.lower();
        let mut max = space.upper();
        min[0] = lo;
        max[0] = lo + len;
        lo += len;
        out.push(GridBox::new(space.dims(), &min[..space.dims()], &max[..space.dims()]));
    }
    out
}

/// Who produced the current version of a buffer region, cluster-wide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalWriter {
    /// Never written, not host-initialized.
    Uninit,
    /// Host-initialized at program start; every node holds a copy.
    HostInit,
    Task { node: NodeId, task: TaskId },
}

/// Node-local availability of a buffer region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LocalSrc {
    Missing,
    /// Present locally; the command that produced or received it.
    Fresh(CommandId),
}

struct BufferState {
    // Replicated across nodes (must stay identical everywhere).
    global_writers: RegionMap<GlobalWriter>,
    replicated: RegionMap<NodeSet>,
    // Node-local.
    local_src: RegionMap<LocalSrc>,
    local_readers: Vec<(CommandId, Region)>,
}

/// Snapshot of the replicated tracking state, used to assert SPMD
/// consistency between node builders.
#[derive(Debug, PartialEq, Eq)]
pub struct ReplicatedDigest(Vec<(Vec<(GridBox, GlobalWriter)>, Vec<(GridBox, NodeSet)>)>);

pub struct CdagBuilder<'p> {
    program: &'p ProgramSpec,
    num_nodes: u32,
    node: NodeId,
    records: Vec<CommandRecord>,
    buffers: Vec<BufferState>,
    fallback: CommandId,
    pending_horizon: Option<CommandId>,
    front: BTreeSet<CommandId>,
}

impl<'p> CdagBuilder<'p> {
    pub fn new(program: &'p ProgramSpec, num_nodes: u32, node: NodeId) -> Self {
        let all_nodes: NodeSet = if num_nodes == 64 { !0 } else { (1u64 << num_nodes) - 1 };
        let buffers = program
            .buffers
            .iter()
            .map(|b| BufferState {
                global_writers: RegionMap::new(
                    b.extent,
                    if b.host_initialized { GlobalWriter::HostInit } else { GlobalWriter::Uninit },
                ),
                replicated: RegionMap::new(
                    b.extent,
                    if b.host_initialized { all_nodes } else { 0 },
                ),
                local_src: RegionMap::new(
                    b.extent,
                    if b.host_initialized { LocalSrc::Fresh(CommandId(0)) } else { LocalSrc::Missing },
                ),
                local_readers: Vec::new(),
            })
            .collect();
        let init = CommandRecord {
            cid: CommandId(0),
            node,
            origin: TaskId(0),
            kind: CommandKind::Epoch { shutdown: false },
            deps: Vec::new(),
        };
        Self {
            program,
            num_nodes,
            node,
            records: vec![init],
            buffers,
            fallback: CommandId(0),
            pending_horizon: None,
            front: BTreeSet::from([CommandId(0)]),
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn records(&self) -> &[CommandRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<CommandRecord> {
        self.records
    }

    /// Fragments of one buffer by cluster-wide writer, over the full extent.
    pub fn global_fragments(&self, buffer: BufferId) -> Vec<(Region, GlobalWriter)> {
        let state = &self.buffers[buffer.0 as usize];
        let full = Region::from_box(*state.global_writers.extent());
        state.global_writers.query(&full).expect("full extent")
    }

    pub fn replicated_digest(&self) -> ReplicatedDigest {
        ReplicatedDigest(
            self.buffers
                .iter()
                .map(|b| {
                    (b.global_writers.entries().to_vec(), b.replicated.entries().to_vec())
                })
                .collect(),
        )
    }

    /// Total boxes retained across all tracking maps (horizon bounding).
    pub fn tracker_entries(&self) -> usize {
        self.buffers
            .iter()
            .map(|b| {
                b.global_writers.len()
                    + b.replicated.len()
                    + b.local_src.len()
                    + b.local_readers.len()
            })
            .sum()
    }

    fn push_record(
        &mut self,
        origin: TaskId,
        kind: CommandKind,
        mut deps: Vec<CommandDep>,
    ) -> CommandId {
        let cid = CommandId(self.records.len() as u64);
        deps.sort_by(|a, b| a.on.cmp(&b.on).then(a.kind.cmp(&b.kind)));
        deps.dedup_by(|a, b| a.on == b.on);
        if deps.is_empty() {
            deps.push(CommandDep { on: self.fallback, kind: TaskDepKind::LastEpoch });
        }
        for d in &deps {
            self.front.remove(&d.on);
        }
        self.front.insert(cid);
        self.records.push(CommandRecord { cid, node: self.node, origin, kind, deps });
        cid
    }

    /// Compiles one task record into this node's commands, in task order.
    /// Returns the ids of the commands generated for this task.
    pub fn compile_task(&mut self, task: &TaskRecord) -> Result<Vec<CommandId>, ProgramError> {
        let start = self.records.len();
        match &task.kind {
            TaskKind::Epoch { shutdown } => {
                let deps = self.front_deps();
                let cid = self.push_record(
                    task.tid,
                    CommandKind::Epoch { shutdown: *shutdown },
                    deps,
                );
                self.fallback = cid;
            }
            TaskKind::Horizon => {
                let deps = self.front_deps();
                let cid = self.push_record(task.tid, CommandKind::Horizon, deps);
                if let Some(prev) = self.pending_horizon.replace(cid) {
                    self.apply_horizon(prev);
                }
            }
            TaskKind::Kernel { spec } | TaskKind::HostTask { spec } => {
                self.compile_compute(task.tid, spec)?;
            }
        }
        Ok((start..self.records.len()).map(|i| CommandId(i as u64)).collect())
    }

    fn front_deps(&self) -> Vec<CommandDep> {
        self.front
            .iter()
            .map(|c| CommandDep { on: *c, kind: TaskDepKind::HorizonSync })
            .collect()
    }

    fn apply_horizon(&mut self, horizon: CommandId) {
        self.fallback = horizon;
        for b in &mut self.buffers {
            b.local_src.replace_values(|v| match v {
                LocalSrc::Fresh(c) if *c < horizon => LocalSrc::Fresh(horizon),
                other => *other,
            });
            let dims = b.local_src.extent().dims();
            let mut subsumed = Region::empty(dims);
            let mut kept = Vec::new();
            for (cid, region) in b.local_readers.drain(..) {
                if cid < horizon {
                    subsumed = subsumed.union(&region);
                } else {
                    kept.push((cid, region));
                }
            }
            if !subsumed.is_empty() {
                kept.push((horizon, subsumed));
            }
            kept.sort_by_key(|(c, _)| *c);
            b.local_readers = kept;
        }
    }

    /// Per-node read/write regions of one buffer for every chunk of a task.
    fn per_node_regions(
        &self,
        spec: &TaskSpec,
        chunks: &[GridBox],
    ) -> Result<Vec<(BufferId, Vec<Region>, Vec<Region>)>, ProgramError> {
        let mut out: Vec<(BufferId, Vec<Region>, Vec<Region>)> = Vec::new();
        for a in &spec.accesses {
            let bid = self.program.buffer_id(&a.buffer).expect("validated");
            let extent = self.program.buffer(bid).extent;
            let dims = extent.dims();
            let entry = match out.iter_mut().find(|(b, _, _)| *b == bid) {
                Some(e) => e,
                None => {
                    out.push((
                        bid,
                        vec![Region::empty(dims); chunks.len()],
                        vec![Region::empty(dims); chunks.len()],
                    ));
                    out.last_mut().unwrap()
                }
            };
            for (j, chunk) in chunks.iter().enumerate() {
                if chunk.is_empty() {
                    continue;
                }
                let region = evaluate_range_mapper(&a.mapper, chunk, &extent)?;
                if a.mode.reads() {
                    entry.1[j] = entry.1[j].union(&region);
                }
                if a.mode.writes() {
                    entry.2[j] = entry.2[j].union(&region);
                }
            }
        }
        out.sort_by_key(|(b, _, _)| *b);
        Ok(out)
    }

    fn compile_compute(&mut self, tid: TaskId, spec: &TaskSpec) -> Result<(), ProgramError> {
        let me = self.node.0 as usize;
        let chunks = split_task(&spec.index_space, self.num_nodes as u64);
        let regions = self.per_node_regions(spec, &chunks)?;

        // Transfer planning against pre-task state. `needs[j]` is what node j
        // reads but does not hold; of that, the parts some node owns are
        // exchanged (and recorded as replicated to j on every builder).
        let mut push_cmds: Vec<(NodeId, BufferId, Region)> = Vec::new();
        let mut await_cmds: Vec<(BufferId, Region)> = Vec::new();
        let mut new_replicas: Vec<(BufferId, NodeId, Region)> = Vec::new();
        for (bid, reads, _) in &regions {
            let state = &self.buffers[bid.0 as usize];
            for j in 0..self.num_nodes as usize {
                if reads[j].is_empty() {
                    continue;
                }
                let holds = state.replicated.region_where(|s| s & node_bit(NodeId(j as u32)) != 0);
                let need = reads[j].difference(&holds);
                if need.is_empty() {
                    continue;
                }
                let mut transferred = Region::empty(need.dims());
                for (part, writer) in state.global_writers.query(&need).expect("within extent") {
                    let GlobalWriter::Task { node: owner, .. } = writer else {
                        continue; // Uninitialized parts move no data.
                    };
                    transferred = transferred.union(&part);
                    if owner.0 as usize == me && j != me {
                        // I own it, the peer needs it.
                        match push_cmds
                            .iter_mut()
                            .find(|(t, b, _)| t.0 as usize == j && b == bid)
                        {
                            Some((_, _, r)) => *r = r.union(&part),
                            None => push_cmds.push((NodeId(j as u32), *bid, part)),
                        }
                    } else if j == me && owner.0 as usize != me {
                        match await_cmds.iter_mut().find(|(b, _)| b == bid) {
                            Some((_, r)) => *r = r.union(&part),
                            None => await_cmds.push((*bid, part)),
                        }
                    }
                }
                if !transferred.is_empty() {
                    new_replicas.push((*bid, NodeId(j as u32), transferred));
                }
            }
        }

        // Outbound pushes, then inbound awaits, then the execution command.
        push_cmds.sort_by_key(|(t, b, _)| (*t, *b));
        for (target, bid, region) in push_cmds {
            let state = &self.buffers[bid.0 as usize];
            let mut deps = Vec::new();
            for (_, src) in state.local_src.query(&region).expect("within extent") {
                if let LocalSrc::Fresh(c) = src {
                    deps.push(CommandDep { on: c, kind: TaskDepKind::Dataflow });
                }
            }
            let transfer = TransferId { task: tid, buffer: bid };
            let cid = self.push_record(
                tid,
                CommandKind::Push { target, buffer: bid, region: region.clone(), transfer },
                deps,
            );
            // The push reads local data: later local overwrites must wait.
            self.buffers[bid.0 as usize].local_readers.push((cid, region));
        }

        for (bid, region) in &await_cmds {
            let state = &self.buffers[bid.0 as usize];
            let mut deps = Vec::new();
            // Receiving overwrites the local stale copy; previous readers of
            // that memory must finish first.
            for (cid, r) in &state.local_readers {
                if r.intersects(region) {
                    deps.push(CommandDep { on: *cid, kind: TaskDepKind::Anti });
                }
            }
            let transfer = TransferId { task: tid, buffer: *bid };
            let cid = self.push_record(
                tid,
                CommandKind::AwaitPush { buffer: *bid, region: region.clone(), transfer },
                deps,
            );
            let state = &mut self.buffers[bid.0 as usize];
            for (_, r) in &mut state.local_readers {
                *r = r.difference(region);
            }
            state.local_readers.retain(|(_, r)| !r.is_empty());
            state.local_src.update(region, LocalSrc::Fresh(cid)).expect("within extent");
        }

        let my_chunk = chunks[me];
        let mut exec_cid = None;
        if !my_chunk.is_empty() {
            let mut deps = Vec::new();
            for (bid, reads, writes) in &regions {
                let state = &self.buffers[bid.0 as usize];
                if !reads[me].is_empty() {
                    for (_, src) in state.local_src.query(&reads[me]).expect("within extent") {
                        if let LocalSrc::Fresh(c) = src {
                            deps.push(CommandDep { on: c, kind: TaskDepKind::Dataflow });
                        }
                    }
                }
                if !writes[me].is_empty() {
                    for (_, src) in state.local_src.query(&writes[me]).expect("within extent") {
                        if let LocalSrc::Fresh(c) = src {
                            deps.push(CommandDep { on: c, kind: TaskDepKind::Output });
                        }
                    }
                    for (cid, r) in &state.local_readers {
                        if r.intersects(&writes[me]) {
                            deps.push(CommandDep { on: *cid, kind: TaskDepKind::Anti });
                        }
                    }
                }
            }
            // Dataflow wins over output/anti on the same predecessor.
            deps.sort_by(|a, b| a.on.cmp(&b.on).then(a.kind.cmp(&b.kind)));
            let cid =
                self.push_record(tid, CommandKind::Execution { chunk: my_chunk }, deps);
            exec_cid = Some(cid);
            for (bid, reads, _) in &regions {
                if !reads[me].is_empty() {
                    self.buffers[bid.0 as usize].local_readers.push((cid, reads[me].clone()));
                }
            }
        }

        // Post-task tracking updates, identical on every builder.
        for (bid, _, writes) in &regions {
            let state = &mut self.buffers[bid.0 as usize];
            for (bid2, j, region) in &new_replicas {
                if bid2 == bid {
                    for (part, mask) in state.replicated.query(region).expect("within extent") {
                        state
                            .replicated
                            .update(&part, mask | node_bit(*j))
                            .expect("within extent");
                    }
                }
            }
            for (j, w) in writes.iter().enumerate() {
                if w.is_empty() {
                    continue;
                }
                state
                    .global_writers
                    .update(w, GlobalWriter::Task { node: NodeId(j as u32), task: tid })
                    .expect("within extent");
                state.replicated.update(w, node_bit(NodeId(j as u32))).expect("within extent");
                if j == me {
                    let cid = exec_cid.expect("non-empty chunk wrote");
                    for (_, r) in &mut state.local_readers {
                        *r = r.difference(w);
                    }
                    state.local_readers.retain(|(_, r)| !r.is_empty());
                    state.local_src.update(w, LocalSrc::Fresh(cid)).expect("within extent");
                } else {
                    // A peer produced a newer version; the local copy is stale.
                    state.local_src.update(w, LocalSrc::Missing).expect("within extent");
                }
            }
            // Awaited regions became locally fresh before our own writes; if
            // we also wrote over them, the write above already replaced them.
        }
        Ok(())
    }
}

/// Builds the command graphs of all nodes for a finished task graph.
pub fn build_cdags(
    program: &ProgramSpec,
    num_nodes: u32,
    tasks: &[TaskRecord],
) -> Result<Vec<Vec<CommandRecord>>, ProgramError> {
    let mut out = Vec::new();
    for n in 0..num_nodes {
        let mut b = CdagBuilder::new(program, num_nodes, NodeId(n));
        for t in tasks.iter().skip(1) {
            b.compile_task(t)?;
        }
        out.push(b.into_records());
    }
    Ok(out)
}

/// True when `target` is reachable from `from` over dependency edges.
pub fn command_reaches(records: &[CommandRecord], from: CommandId, target: CommandId) -> bool {
    if from == target {
        return true;
    }
    let mut seen = BTreeSet::new();
    let mut stack = vec![from];
    while let Some(c) = stack.pop() {
        if c == target {
            return true;
        }
        if c < target || !seen.insert(c) {
            continue;
        }
        stack.extend(records[c.0 as usize].deps.iter().map(|d| d.on));
    }
    false
}

/// One entry of the push/await concurrency report: an await-push that is
/// ordered against an execution command of its task's predecessor.
#[derive(Debug)]
pub struct ConcurrencyViolation {
    pub await_cmd: CommandId,
    pub exec_cmd: CommandId,
}

#[derive(Debug, Default)]
pub struct ConcurrencyReport {
    pub checked_pairs: usize,
    pub concurrent_pairs: usize,
    pub violations: Vec<ConcurrencyViolation>,
}

/// Verifies that await-push commands stay concurrent with execution commands
/// of their task's direct predecessors, unless ordering is forced by the
/// data itself (the execution touched the awaited region locally).
pub fn push_await_concurrency_check(
    program: &ProgramSpec,
    tasks: &[TaskRecord],
    cmds: &[CommandRecord],
) -> Result<ConcurrencyReport, ProgramError> {
    let mut report = ConcurrencyReport::default();
    let num_nodes = program.cluster.nodes;
    for a in cmds {
        let CommandKind::AwaitPush { buffer, region, .. } = &a.kind else { continue };
        let task = &tasks[a.origin.0 as usize];
        for dep in &task.deps {
            let pred = &tasks[dep.on.0 as usize];
            let Some(pred_spec) = pred.kind.spec() else { continue };
            for e in cmds {
                if e.origin != pred.tid {
                    continue;
                }
                let CommandKind::Execution { chunk } = &e.kind else { continue };
                report.checked_pairs += 1;
                let _ = num_nodes;
                let mut touched = Region::empty(region.dims());
                for acc in &pred_spec.accesses {
                    if program.buffer_id(&acc.buffer) != Some(*buffer) {
                        continue;
                    }
                    let extent = program.buffer(*buffer).extent;
                    let r = evaluate_range_mapper(&acc.mapper, chunk, &extent)?;
                    touched = touched.union(&r);
                }
                let forced = touched.intersects(region);
                let ordered = command_reaches(cmds, a.cid, e.cid)
                    || command_reaches(cmds, e.cid, a.cid);
                if !ordered {
                    report.concurrent_pairs += 1;
                } else if !forced {
                    report.violations.push(ConcurrencyViolation {
                        await_cmd: a.cid,
                        exec_cmd: e.cid,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures as fx;
    use crate::tdag::build_tdag;

    #[test]
    fn split_halves() {
        let chunks = split_task(&GridBox::d1(0, 64), 2);
        assert_eq!(chunks, vec![GridBox::d1(0, 32), GridBox::d1(32, 64)]);
    }

    #[test]
    fn split_remainder_to_lower_ids() {
        let chunks = split_task(&GridBox::d1(0, 7), 2);
        assert_eq!(chunks, vec![GridBox::d1(0, 4), GridBox::d1(4, 7)]);
    }

    #[test]
    fn split_oversubscribed_yields_empty_chunks() {
        let chunks = split_task(&GridBox::d1(0, 4), 8);
        assert_eq!(chunks.iter().filter(|c| !c.is_empty()).count(), 4);
        assert_eq!(chunks.iter().filter(|c| c.is_empty()).count(), 4);
        assert!(chunks[..4].iter().all(|c| c.volume() == 1));
    }

    #[test]
    fn split_2d_only_along_slowest_axis() {
        let chunks = split_task(&GridBox::d2([0, 0], [8, 6]), 2);
        assert_eq!(chunks, vec![GridBox::d2([0, 0], [4, 6]), GridBox::d2([4, 0], [8, 6])]);
    }

    fn nbody_graphs(steps: u64) -> (crate::program::ProgramSpec, Vec<TaskRecord>, Vec<Vec<CommandRecord>>) {
        let p = fx::nbody(steps, 64);
        let tasks = build_tdag(&p, Some(2)).unwrap();
        let cdags = build_cdags(&p, 2, &tasks).unwrap();
        (p, tasks, cdags)
    }

    #[test]
    fn nbody_node0_has_one_push_one_await_per_exchange() {
        let (_, _, cdags) = nbody_graphs(2);
        let n0 = &cdags[0];
        let pushes: Vec<_> = n0
            .iter()
            .filter(|c| matches!(c.kind, CommandKind::Push { .. }))
            .collect();
        let awaits: Vec<_> = n0
            .iter()
            .filter(|c| matches!(c.kind, CommandKind::AwaitPush { .. }))
            .collect();
        // Two timesteps, but the first reads host-initialized data that every
        // node already holds: exactly one exchange.
        assert_eq!(pushes.len(), 1);
        assert_eq!(awaits.len(), 1);
        let CommandKind::Push { target, region, .. } = &pushes[0].kind else { unreachable!() };
        assert_eq!(*target, NodeId(1));
        assert_eq!(region, &Region::from_box(GridBox::d1(0, 32)));
        let CommandKind::AwaitPush { region, .. } = &awaits[0].kind else { unreachable!() };
        assert_eq!(region, &Region::from_box(GridBox::d1(32, 64)));
    }

    #[test]
    fn nbody_await_concurrent_with_prior_execution() {
        let (p, tasks, cdags) = nbody_graphs(2);
        for cmds in &cdags {
            let report = push_await_concurrency_check(&p, &tasks, cmds).unwrap();
            assert!(report.violations.is_empty(), "{:?}", report.violations);
            assert!(report.concurrent_pairs > 0);
        }
    }

    #[test]
    fn one_to_one_task_makes_no_transfers() {
        let extent = GridBox::d1(0, 64);
        let p = fx::program(
            2,
            1,
            vec![fx::int_buffer("b", extent, true)],
            vec![fx::loop_body(4, vec![fx::rw_map_task("step", extent, "b")])],
        );
        let tasks = build_tdag(&p, Some(2)).unwrap();
        for cmds in build_cdags(&p, 2, &tasks).unwrap() {
            assert!(cmds.iter().all(|c| matches!(
                c.kind,
                CommandKind::Execution { .. } | CommandKind::Epoch { .. } | CommandKind::Horizon
            )));
        }
    }

    #[test]
    fn single_node_program_has_no_transfers() {
        let p = fx::nbody(2, 64);
        let tasks = build_tdag(&p, Some(2)).unwrap();
        let cdags = build_cdags(&p, 1, &tasks).unwrap();
        assert!(cdags[0].iter().all(|c| !matches!(
            c.kind,
            CommandKind::Push { .. } | CommandKind::AwaitPush { .. }
        )));
    }

    #[test]
    fn stencil_pushes_one_row_boundary_each_way() {
        let extent = GridBox::d2([0, 0], [16, 8]);
        let p = fx::program(
            2,
            1,
            vec![fx::f64_buffer("u", extent, true), fx::f64_buffer("v", extent, false)],
            vec![fx::task(
                "blur",
                extent,
                vec![
                    fx::access(
                        "u",
                        crate::program::AccessMode::Read,
                        crate::program::RangeMapper::Neighborhood { border: vec![1, 0] },
                    ),
                    fx::access(
                        "v",
                        crate::program::AccessMode::Write,
                        crate::program::RangeMapper::OneToOne,
                    ),
                ],
                crate::program::KernelArchetype::StencilSum {
                    radius: 1,
                    sum_coeff: 1.0,
                    coeffs: vec![],
                    offset: 0.0,
                },
            ), fx::task(
                "blur2",
                extent,
                vec![
                    fx::access(
                        "v",
                        crate::program::AccessMode::Read,
                        crate::program::RangeMapper::Neighborhood { border: vec![1, 0] },
                    ),
                    fx::access(
                        "u",
                        crate::program::AccessMode::Write,
                        crate::program::RangeMapper::OneToOne,
                    ),
                ],
                crate::program::KernelArchetype::StencilSum {
                    radius: 1,
                    sum_coeff: 1.0,
                    coeffs: vec![],
                    offset: 0.0,
                },
            )],
        );
        let tasks = build_tdag(&p, None).unwrap();
        let cdags = build_cdags(&p, 2, &tasks).unwrap();
        // First task: u is host-initialized everywhere, no transfers. Second
        // task: v halves were written per node, each node needs one boundary
        // row from the other.
        for (n, cmds) in cdags.iter().enumerate() {
            let pushes: Vec<&CommandRecord> = cmds
                .iter()
                .filter(|c| matches!(c.kind, CommandKind::Push { .. }))
                .collect();
            assert_eq!(pushes.len(), 1, "node {n}");
            let CommandKind::Push { region, .. } = &pushes[0].kind else { unreachable!() };
            // One boundary row of 8 elements.
            assert_eq!(region.num_elements(), 8, "node {n}: {region:?}");
            let awaits: Vec<&CommandRecord> = cmds
                .iter()
                .filter(|c| matches!(c.kind, CommandKind::AwaitPush { .. }))
                .collect();
            assert_eq!(awaits.len(), 1, "node {n}");
        }
    }

    /// Every push has a matching await-push on the target node whose region
    /// contains the pushed region, per transfer id.
    fn check_push_await_matching(cdags: &[Vec<CommandRecord>]) {
        for (n, cmds) in cdags.iter().enumerate() {
            for c in cmds {
                if let CommandKind::Push { target, region, transfer, .. } = &c.kind {
                    let peer = &cdags[target.0 as usize];
                    let matched = peer.iter().any(|pc| match &pc.kind {
                        CommandKind::AwaitPush { region: ar, transfer: at, .. } => {
                            at == transfer && ar.contains_region(region)
                        }
                        _ => false,
                    });
                    assert!(matched, "push from node {n} {transfer} has no matching await");
                }
            }
        }
    }

    #[test]
    fn spmd_determinism_and_matching_on_random_programs() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for round in 0..30 {
            let mut p = fx::random_1d_program(&mut rng, 32, 6);
            let nodes = rng.gen_range(1..=4u32);
            p.cluster.nodes = nodes;
            let tasks = build_tdag(&p, Some(2)).unwrap();
            let mut builders: Vec<CdagBuilder> =
                (0..nodes).map(|n| CdagBuilder::new(&p, nodes, NodeId(n))).collect();
            for t in tasks.iter().skip(1) {
                for b in &mut builders {
                    b.compile_task(t).unwrap();
                }
                let d0 = builders[0].replicated_digest();
                for b in &builders[1..] {
                    assert_eq!(d0, b.replicated_digest(), "round {round} diverged at {}", t.tid);
                }
            }
            let cdags: Vec<Vec<CommandRecord>> =
                builders.into_iter().map(|b| b.into_records()).collect();
            check_push_await_matching(&cdags);
            // Chunk union/disjointness.
            for t in &tasks {
                if let Some(spec) = t.kind.spec() {
                    let chunks = split_task(&spec.index_space, nodes as u64);
                    let union = Region::from_boxes(spec.index_space.dims(), chunks.clone());
                    assert_eq!(union, Region::from_box(spec.index_space));
                    let total: u64 = chunks.iter().map(|c| c.volume()).sum();
                    assert_eq!(total, spec.index_space.volume());
                }
            }
            // Node-local graphs acyclic and topologically numbered.
            for cmds in &cdags {
                for c in cmds {
                    for d in &c.deps {
                        assert!(d.on < c.cid);
                    }
                }
            }
        }
    }
}
