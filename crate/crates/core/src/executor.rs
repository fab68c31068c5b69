//! Discrete-event execution of instruction graphs across all simulated
//! nodes: out-of-order dispatch onto in-order lanes, receive arbitration
//! against pilots, a simulated communicator with per-pair ordered pilot
//! delivery, optional data-level kernel interpretation and trace production.
//!
//! The executor consumes per-node schedule streams stamped with the
//! scheduler stage's availability times. Timing decisions depend only on
//! those stamps and the graph, never on wall-clock arrival, so pipelined and
//! pre-scheduled runs are equally deterministic.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::mpsc::Receiver;

use crate::arbiter::{ArbiterEffect, ArbiterInput, ReceiveArbiter};
use crate::checks::{check_bounds, Diagnostic};
use crate::costmodel::CostModel;
use crate::idag::{
    AllocationRecord, InstrKind, InstructionRecord, KernelBinding, PilotMessage,
    ScheduleItem,
};
use crate::ids::{AllocationId, BufferId, InstructionId, MemoryId, MessageId, NodeId, TaskId};
use crate::interp::{
    actual_access_regions, execute_kernel, host_init_value, KernelCtx, ValueVec,
};
use crate::program::{ClusterTopology, ElemType, ProgramSpec};
use crate::region::{GridBox, Region};
use crate::trace::{SimTrace, TraceEvent};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("deadlock: no runnable instruction but the graph is incomplete\n{0}")]
    Deadlock(String),
    #[error("transfer protocol error: {0}")]
    Protocol(String),
}

/// One fragment of the final gather: read `region` of `buffer` from
/// allocation `alloc` on `node`.
#[derive(Clone, Debug)]
pub struct GatherEntry {
    pub buffer: BufferId,
    pub region: Region,
    pub node: NodeId,
    pub alloc: AllocationId,
}

/// Messages streamed from the scheduler stage.
pub enum StreamMsg {
    Item { node: NodeId, avail_ns: u64, item: ScheduleItem },
    /// End of all streams; carries the plan for assembling final contents.
    Done { gather: Vec<GatherEntry> },
}

#[derive(Clone, Debug)]
pub struct ExecutorConfig {
    pub interpret: bool,
    pub eager_issue: bool,
    pub kernel_lanes_per_device: u32,
    pub host_task_lanes: u32,
    /// Honor scheduler availability stamps (pipelined mode); otherwise all
    /// instructions are treated as available at time zero.
    pub respect_avail: bool,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            interpret: true,
            eager_issue: true,
            kernel_lanes_per_device: 1,
            host_task_lanes: 2,
            respect_avail: false,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum LaneTag {
    DeviceKernel(u32),
    DeviceCopy(u32),
    HostTask,
    HostCopy,
    Comm,
}

struct Lane {
    tag: LaneTag,
    label: String,
    busy_until: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Waiting,
    /// Committed to a lane (`usize::MAX` marks virtual lanes).
    Issued { lane: usize, start: u64, end: u64 },
    /// Receive-family instruction registered with the arbiter.
    Dispatched { start: u64 },
    Completed { end: u64 },
}

struct InstrState {
    rec: InstructionRecord,
    avail: u64,
    unmet: usize,
    max_dep_end: u64,
    issue_ns: u64,
    status: Status,
}

struct NodeState {
    lanes: Vec<Lane>,
    instrs: BTreeMap<u64, InstrState>,
    dependents: BTreeMap<u64, Vec<u64>>,
    allocs: BTreeMap<AllocationId, AllocationRecord>,
    arrays: BTreeMap<AllocationId, ValueVec>,
    arbiter: ReceiveArbiter,
    last_avail: u64,
    live_bytes: u64,
    live_bytes_by_memory: BTreeMap<u8, u64>,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    /// (time, seq) ordering; payload describes what happens.
    At(u64, u64, EventKind),
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Arrival { node: u32, iid: u64 },
    Pilot { receiver: u32, index: usize },
    Complete { node: u32, iid: u64 },
}

pub struct Executor<'p> {
    program: &'p ProgramSpec,
    cost: CostModel,
    cfg: ExecutorConfig,
    nodes: Vec<NodeState>,
    heap: BinaryHeap<std::cmp::Reverse<Event>>,
    seq: u64,
    now: u64,
    pilots: Vec<PilotMessage>,
    payloads: BTreeMap<(u32, MessageId), (ValueVec, GridBox)>,
    trace: Vec<TraceEvent>,
    counts: BTreeMap<String, u64>,
    peak_bytes: u64,
    peak_bytes_by_memory: BTreeMap<u8, u64>,
    diagnostics: Vec<Diagnostic>,
    bounds_seen: BTreeSet<(TaskId, BufferId)>,
    scheduler_finish: u64,
}

impl<'p> Executor<'p> {
    pub fn new(
        program: &'p ProgramSpec,
        topology: ClusterTopology,
        cost: CostModel,
        cfg: ExecutorConfig,
    ) -> Self {
        let nodes = (0..topology.nodes)
            .map(|_| {
                let mut lanes = Vec::new();
                for d in 0..topology.devices_per_node {
                    for k in 0..cfg.kernel_lanes_per_device {
                        let label = if cfg.kernel_lanes_per_device == 1 {
                            format!("d{d}.kernel")
                        } else {
                            format!("d{d}.kernel{k}")
                        };
                        lanes.push(Lane { tag: LaneTag::DeviceKernel(d), label, busy_until: 0 });
                    }
                    lanes.push(Lane {
                        tag: LaneTag::DeviceCopy(d),
                        label: format!("d{d}.copy"),
                        busy_until: 0,
                    });
                }
                for h in 0..cfg.host_task_lanes {
                    lanes.push(Lane {
                        tag: LaneTag::HostTask,
                        label: format!("host.task{h}"),
                        busy_until: 0,
                    });
                }
                lanes.push(Lane { tag: LaneTag::HostCopy, label: "host.copy".into(), busy_until: 0 });
                lanes.push(Lane { tag: LaneTag::Comm, label: "comm".into(), busy_until: 0 });
                NodeState {
                    lanes,
                    instrs: BTreeMap::new(),
                    dependents: BTreeMap::new(),
                    allocs: BTreeMap::new(),
                    arrays: BTreeMap::new(),
                    arbiter: ReceiveArbiter::new(),
                    last_avail: 0,
                    live_bytes: 0,
                    live_bytes_by_memory: BTreeMap::new(),
                }
            })
            .collect();
        Self {
            program,
            cost,
            cfg,
            nodes,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
            pilots: Vec::new(),
            payloads: BTreeMap::new(),
            trace: Vec::new(),
            counts: BTreeMap::new(),
            peak_bytes: 0,
            peak_bytes_by_memory: BTreeMap::new(),
            diagnostics: Vec::new(),
            bounds_seen: BTreeSet::new(),
            scheduler_finish: 0,
        }
    }

    fn push_event(&mut self, time: u64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(std::cmp::Reverse(Event::At(time, self.seq, kind)));
    }

    fn ingest(&mut self, node: NodeId, avail_raw: u64, item: ScheduleItem) {
        let avail = if self.cfg.respect_avail { avail_raw } else { 0 };
        self.scheduler_finish = self.scheduler_finish.max(avail_raw);
        let ns = &mut self.nodes[node.0 as usize];
        ns.last_avail = ns.last_avail.max(avail);
        match item {
            ScheduleItem::Alloc(rec) => {
                if self.cfg.interpret {
                    let array = self.initial_array(&rec);
                    self.nodes[node.0 as usize].arrays.insert(rec.aid, array);
                }
                self.nodes[node.0 as usize].allocs.insert(rec.aid, rec);
            }
            ScheduleItem::Pilot(p) => {
                let idx = self.pilots.len();
                let receiver = p.receiver.0;
                self.pilots.push(p);
                self.push_event(avail, EventKind::Pilot { receiver, index: idx });
            }
            ScheduleItem::Instr(rec) => {
                let iid = rec.iid.0;
                let node_i = node.0 as usize;
                let mut unmet = 0;
                let mut max_dep_end = 0;
                for d in &rec.deps {
                    let ds = self.nodes[node_i]
                        .instrs
                        .get(&d.on.0)
                        .map(|s| s.status)
                        .expect("deps precede their instruction in the stream");
                    match ds {
                        Status::Completed { end } => max_dep_end = max_dep_end.max(end),
                        _ => {
                            unmet += 1;
                            self.nodes[node_i].dependents.entry(d.on.0).or_default().push(iid);
                        }
                    }
                }
                self.nodes[node_i].instrs.insert(
                    iid,
                    InstrState { rec, avail, unmet, max_dep_end, issue_ns: 0, status: Status::Waiting },
                );
                self.push_event(avail, EventKind::Arrival { node: node.0, iid });
            }
        }
    }

    fn initial_array(&self, rec: &AllocationRecord) -> ValueVec {
        let decl = rec.buffer.map(|b| self.program.buffer(b));
        let ty = decl.map(|d| d.element_type).unwrap_or(ElemType::F64);
        let len = rec.bbox.volume() as usize;
        let mut v = ValueVec::zeros(ty, len);
        if rec.memory == MemoryId::USER {
            if let (Some(d), Some(bid)) = (decl, rec.buffer) {
                if d.host_initialized {
                    match &mut v {
                        ValueVec::Int(x) => {
                            for p in rec.bbox.iter_points() {
                                x[rec.bbox.linear_index(p)] = host_init_value(bid.0, p);
                            }
                        }
                        ValueVec::F64(x) => {
                            for p in rec.bbox.iter_points() {
                                x[rec.bbox.linear_index(p)] = host_init_value(bid.0, p) as f64;
                            }
                        }
                    }
                }
            }
        }
        v
    }

    fn eligible_lanes(&self, node: usize, kind: &InstrKind) -> Option<LaneTag> {
        Some(match kind {
            InstrKind::DeviceKernel { device, .. } => LaneTag::DeviceKernel(device.0),
            InstrKind::HostTask { .. } => LaneTag::HostTask,
            InstrKind::Copy { src_memory, dst_memory, .. } => {
                if let Some(d) = dst_memory.as_device() {
                    LaneTag::DeviceCopy(d.0)
                } else if let Some(d) = src_memory.as_device() {
                    LaneTag::DeviceCopy(d.0)
                } else {
                    LaneTag::HostCopy
                }
            }
            InstrKind::Alloc { alloc } | InstrKind::Free { alloc } => {
                let mem = self.nodes[node].allocs[alloc].memory;
                if let Some(d) = mem.as_device() {
                    LaneTag::DeviceCopy(d.0)
                } else {
                    LaneTag::HostCopy
                }
            }
            InstrKind::Send { .. } => LaneTag::Comm,
            InstrKind::Receive { .. }
            | InstrKind::SplitReceive { .. }
            | InstrKind::AwaitReceive { .. }
            | InstrKind::Horizon
            | InstrKind::Epoch { .. } => return None,
        })
    }

    fn duration(&self, kind: &InstrKind) -> u64 {
        match kind {
            InstrKind::DeviceKernel { chunk, .. } => self.cost.kernel_cost(chunk.volume()),
            InstrKind::HostTask { chunk, .. } => self.cost.host_task_cost(chunk.volume()),
            InstrKind::Copy { buffer, src_memory, dst_memory, region, .. } => {
                let bytes = region.volume() * self.program.buffer(*buffer).element_bytes;
                self.cost.copy_cost(*src_memory, *dst_memory, bytes)
            }
            InstrKind::Alloc { .. } => self.cost.alloc_ns,
            InstrKind::Free { .. } => self.cost.free_ns,
            InstrKind::Send { buffer, region, .. } => {
                let bytes = region.volume() * self.program.buffer(*buffer).element_bytes;
                self.cost.send_cost(bytes)
            }
            InstrKind::Horizon => self.cost.horizon_ns,
            InstrKind::Epoch { .. } => self.cost.epoch_ns,
            InstrKind::Receive { .. }
            | InstrKind::SplitReceive { .. }
            | InstrKind::AwaitReceive { .. } => 0,
        }
    }

    /// Attempts to issue one waiting instruction at time `now`.
    fn try_issue(&mut self, node: usize, iid: u64) {
        let st = &self.nodes[node].instrs[&iid];
        if st.status != Status::Waiting {
            return;
        }
        let ready = st.max_dep_end.max(st.avail);
        let lane_tag = self.eligible_lanes(node, &st.rec.kind);
        if st.unmet == 0 {
            match lane_tag {
                None => self.dispatch_virtual(node, iid, ready.max(st.avail)),
                Some(tag) => {
                    // Least-loaded eligible lane, lowest index on ties.
                    let lane_idx = self.nodes[node]
                        .lanes
                        .iter()
                        .enumerate()
                        .filter(|(_, l)| l.tag == tag)
                        .min_by_key(|(i, l)| (l.busy_until, *i))
                        .map(|(i, _)| i)
                        .expect("lane inventory covers all kinds");
                    self.issue_onto(node, iid, lane_idx, ready);
                }
            }
            return;
        }
        // Eager issue: every incomplete dependency already committed to one
        // single in-order lane this instruction may also use.
        if !self.cfg.eager_issue {
            return;
        }
        let Some(tag) = lane_tag else { return };
        let mut common: Option<usize> = None;
        for d in &st.rec.deps.clone() {
            let ds = &self.nodes[node].instrs[&d.on.0];
            match ds.status {
                Status::Completed { .. } => continue,
                Status::Issued { lane, .. } if lane != usize::MAX => match common {
                    None => common = Some(lane),
                    Some(l) if l == lane => {}
                    Some(_) => return,
                },
                _ => return,
            }
        }
        let Some(lane_idx) = common else { return };
        if self.nodes[node].lanes[lane_idx].tag != tag {
            return;
        }
        let ready = {
            let st = &self.nodes[node].instrs[&iid];
            st.max_dep_end.max(st.avail)
        };
        self.issue_onto(node, iid, lane_idx, ready);
    }

    fn issue_onto(&mut self, node: usize, iid: u64, lane_idx: usize, ready: u64) {
        let duration = {
            let st = &self.nodes[node].instrs[&iid];
            self.duration(&st.rec.kind)
        };
        let lane = &mut self.nodes[node].lanes[lane_idx];
        let start = ready.max(lane.busy_until);
        let end = start + duration;
        lane.busy_until = end;
        let st = self.nodes[node].instrs.get_mut(&iid).unwrap();
        st.issue_ns = self.now.max(st.avail);
        st.status = Status::Issued { lane: lane_idx, start, end };
        self.push_event(end, EventKind::Complete { node: node as u32, iid });
        // A newly issued lane instruction may enable eager issue downstream.
        if let Some(deps) = self.nodes[node].dependents.get(&iid).cloned() {
            for d in deps {
                self.try_issue(node, d);
            }
        }
    }

    /// Receives and sync markers occupy no exclusive lane.
    fn dispatch_virtual(&mut self, node: usize, iid: u64, ready: u64) {
        let kind_is_receive = {
            let st = &self.nodes[node].instrs[&iid];
            matches!(
                st.rec.kind,
                InstrKind::Receive { .. }
                    | InstrKind::SplitReceive { .. }
                    | InstrKind::AwaitReceive { .. }
            )
        };
        if kind_is_receive {
            let st = self.nodes[node].instrs.get_mut(&iid).unwrap();
            st.issue_ns = ready;
            st.status = Status::Dispatched { start: ready };
            let input = match &st.rec.kind {
                InstrKind::Receive { transfer, dst, region, .. } => ArbiterInput::OpenReceive {
                    iid: InstructionId(iid),
                    transfer: *transfer,
                    dst: *dst,
                    region: region.clone(),
                    split: false,
                },
                InstrKind::SplitReceive { transfer, dst, region, .. } => {
                    ArbiterInput::OpenReceive {
                        iid: InstructionId(iid),
                        transfer: *transfer,
                        dst: *dst,
                        region: region.clone(),
                        split: true,
                    }
                }
                InstrKind::AwaitReceive { transfer, region, .. } => ArbiterInput::OpenAwait {
                    iid: InstructionId(iid),
                    transfer: *transfer,
                    region: region.clone(),
                },
                _ => unreachable!(),
            };
            let effects = self.nodes[node].arbiter.ingest(input);
            let at = ready.max(self.now);
            self.apply_arbiter_effects(node, effects, at);
        } else {
            // Horizon/epoch: timed on a virtual per-instruction lane.
            let duration = {
                let st = &self.nodes[node].instrs[&iid];
                self.duration(&st.rec.kind)
            };
            let start = ready;
            let st = self.nodes[node].instrs.get_mut(&iid).unwrap();
            st.issue_ns = start;
            st.status = Status::Issued { lane: usize::MAX, start, end: start + duration };
            self.push_event(start + duration, EventKind::Complete { node: node as u32, iid });
        }
    }

    fn apply_arbiter_effects(&mut self, node: usize, effects: Vec<ArbiterEffect>, at: u64) {
        for e in effects {
            match e {
                ArbiterEffect::Land { sender, message, dst, region } => {
                    if self.cfg.interpret {
                        if let Some((payload, pbox)) =
                            self.payloads.get(&(sender.0, message)).cloned()
                        {
                            let ns = &mut self.nodes[node];
                            let dst_box = ns.allocs[&dst].bbox;
                            if let Some(arr) = ns.arrays.get_mut(&dst) {
                                let mut tmp = std::mem::replace(arr, ValueVec::Int(vec![]));
                                ValueVec::copy_box(&payload, &pbox, &mut tmp, &dst_box, &region);
                                *arr = tmp;
                            }
                        }
                    }
                }
                ArbiterEffect::Complete { iid } => {
                    let start = match self.nodes[node].instrs[&iid.0].status {
                        Status::Dispatched { start } => start,
                        other => unreachable!("arbiter completed {iid} in state {other:?}"),
                    };
                    let _ = start;
                    self.complete(node, iid.0, at);
                }
                ArbiterEffect::ProtocolError { transfer, message, region } => {
                    panic!(
                        "pilot {message} of {transfer} region {region:?} does not match any receive"
                    );
                }
            }
        }
    }

    fn complete(&mut self, node: usize, iid: u64, end: u64) {
        // Record the trace event and apply data effects.
        let (lane_label, start, issue, kind_name) = {
            let st = &self.nodes[node].instrs[&iid];
            match st.status {
                Status::Issued { lane, start, .. } => {
                    let label = if lane == usize::MAX {
                        format!("sync.I{iid}")
                    } else {
                        self.nodes[node].lanes[lane].label.clone()
                    };
                    (label, start, st.issue_ns, st.rec.kind.name())
                }
                Status::Dispatched { start } => {
                    (format!("rx.I{iid}"), start, st.issue_ns, st.rec.kind.name())
                }
                other => unreachable!("completing I{iid} in state {other:?}"),
            }
        };
        let avail = self.nodes[node].instrs[&iid].avail;
        self.trace.push(TraceEvent {
            iid,
            node: node as u32,
            lane: lane_label,
            kind: kind_name.to_string(),
            issue_ns: issue,
            start_ns: start,
            end_ns: end,
            avail_ns: avail,
        });
        *self.counts.entry(kind_name.to_string()).or_insert(0) += 1;

        self.apply_effects(node, iid, end);

        let st = self.nodes[node].instrs.get_mut(&iid).unwrap();
        st.status = Status::Completed { end };
        if let Some(deps) = self.nodes[node].dependents.remove(&iid) {
            let mut deps = deps;
            deps.sort_unstable();
            deps.dedup();
            for d in deps {
                let ds = self.nodes[node].instrs.get_mut(&d).unwrap();
                ds.unmet -= 1;
                ds.max_dep_end = ds.max_dep_end.max(end);
                self.try_issue(node, d);
            }
        }
    }

    fn apply_effects(&mut self, node: usize, iid: u64, end: u64) {
        enum Effect {
            None,
            AllocBytes(MemoryId, u64, bool),
            Copy { src: AllocationId, dst: AllocationId, region: GridBox },
            Kernel,
            Send { to: NodeId, message: MessageId, src: AllocationId, region: GridBox, transfer: crate::ids::TransferId },
        }
        let effect = {
            let st = &self.nodes[node].instrs[&iid];
            match &st.rec.kind {
                InstrKind::Alloc { alloc } => {
                    let a = &self.nodes[node].allocs[alloc];
                    Effect::AllocBytes(a.memory, a.bytes, true)
                }
                InstrKind::Free { alloc } => {
                    let a = &self.nodes[node].allocs[alloc];
                    Effect::AllocBytes(a.memory, a.bytes, false)
                }
                InstrKind::Copy { src, dst, region, .. } => Effect::Copy {
                    src: *src,
                    dst: *dst,
                    region: *region,
                },
                InstrKind::DeviceKernel { .. } | InstrKind::HostTask { .. } => Effect::Kernel,
                InstrKind::Send { to, message, src, region, transfer, .. } => Effect::Send {
                    to: *to,
                    message: *message,
                    src: *src,
                    region: *region,
                    transfer: *transfer,
                },
                _ => Effect::None,
            }
        };
        match effect {
            Effect::None => {}
            Effect::AllocBytes(mem, bytes, up) => {
                let ns = &mut self.nodes[node];
                let slot = ns.live_bytes_by_memory.entry(mem.0).or_insert(0);
                if up {
                    *slot += bytes;
                    ns.live_bytes += bytes;
                } else {
                    *slot = slot.saturating_sub(bytes);
                    ns.live_bytes = ns.live_bytes.saturating_sub(bytes);
                }
                let total: u64 = self.nodes.iter().map(|n| n.live_bytes).sum();
                self.peak_bytes = self.peak_bytes.max(total);
                for n in &self.nodes {
                    for (m, b) in &n.live_bytes_by_memory {
                        let peak = self.peak_bytes_by_memory.entry(*m).or_insert(0);
                        *peak = (*peak).max(*b);
                    }
                }
            }
            Effect::Copy { src, dst, region } => {
                if self.cfg.interpret {
                    let ns = &mut self.nodes[node];
                    let src_box = ns.allocs[&src].bbox;
                    let dst_box = ns.allocs[&dst].bbox;
                    let src_arr = ns.arrays.get(&src).cloned();
                    if let (Some(sa), Some(da)) = (src_arr, ns.arrays.get_mut(&dst)) {
                        ValueVec::copy_box(&sa, &src_box, da, &dst_box, &region);
                    }
                }
            }
            Effect::Kernel => {
                if self.cfg.interpret {
                    self.run_kernel(node, iid);
                }
            }
            Effect::Send { to, message, src, region, transfer } => {
                if self.cfg.interpret {
                    let ns = &self.nodes[node];
                    let src_box = ns.allocs[&src].bbox;
                    let arr = &ns.arrays[&src];
                    let mut payload =
                        ValueVec::zeros(arr.elem_type(), region.volume() as usize);
                    ValueVec::copy_box(arr, &src_box, &mut payload, &region, &region);
                    self.payloads.insert((node as u32, message), (payload, region));
                }
                let effects = self.nodes[to.0 as usize].arbiter.ingest(ArbiterInput::Wire {
                    sender: NodeId(node as u32),
                    message,
                    transfer,
                });
                self.apply_arbiter_effects(to.0 as usize, effects, end);
            }
        }
    }

    fn run_kernel(&mut self, node: usize, iid: u64) {
        let (spec, chunk, bindings, gather, task) = {
            let st = &self.nodes[node].instrs[&iid];
            match &st.rec.kind {
                InstrKind::DeviceKernel { spec, chunk, bindings, gather_region, task, .. }
                | InstrKind::HostTask { spec, chunk, bindings, gather_region, task, .. } => (
                    spec.clone(),
                    *chunk,
                    bindings.clone(),
                    gather_region.clone(),
                    *task,
                ),
                _ => unreachable!(),
            }
        };
        let read_bindings: Vec<&KernelBinding> = spec
            .accesses
            .iter()
            .enumerate()
            .filter(|(_, a)| a.mode.reads())
            .map(|(i, _)| bindings.iter().find(|b| b.access == i).expect("bound"))
            .collect();
        let write_binding = {
            let wi = spec
                .accesses
                .iter()
                .position(|a| a.mode.writes())
                .expect("validated: one writer");
            bindings.iter().find(|b| b.access == wi).expect("bound")
        };
        let read0_extent = read_bindings
            .first()
            .map(|b| self.program.buffer(b.buffer).extent);
        let ctx = KernelCtx {
            kernel: &spec.kernel,
            chunk,
            read0_extent,
            gather_region: gather.as_ref(),
        };

        let elem_type = self.program.buffer(write_binding.buffer).element_type;
        let arrays = &self.nodes[node].arrays;
        let read_value_int = |slot: usize, p: [u64; 3]| -> i64 {
            match read_bindings[slot].alloc {
                Some((aid, bbox)) if bbox.contains_point(p) => match &arrays[&aid] {
                    ValueVec::Int(v) => v[bbox.linear_index(p)],
                    ValueVec::F64(_) => 0,
                },
                _ => 0,
            }
        };
        let read_value_f64 = |slot: usize, p: [u64; 3]| -> f64 {
            match read_bindings[slot].alloc {
                Some((aid, bbox)) if bbox.contains_point(p) => match &arrays[&aid] {
                    ValueVec::F64(v) => v[bbox.linear_index(p)],
                    ValueVec::Int(_) => 0.0,
                },
                _ => 0.0,
            }
        };

        // Parallel-for semantics: stage writes, commit afterwards.
        match elem_type {
            ElemType::Int => {
                let mut staged: Vec<(usize, i64)> = Vec::new();
                if let Some((_, wbox)) = write_binding.alloc {
                    execute_kernel::<i64>(&ctx, read_value_int, |p, v| {
                        if wbox.contains_point(p) {
                            staged.push((wbox.linear_index(p), v));
                        }
                    });
                    if let Some(ValueVec::Int(arr)) =
                        self.nodes[node].arrays.get_mut(&write_binding.alloc.unwrap().0)
                    {
                        for (i, v) in staged {
                            arr[i] = v;
                        }
                    }
                }
            }
            ElemType::F64 => {
                let mut staged: Vec<(usize, f64)> = Vec::new();
                if let Some((_, wbox)) = write_binding.alloc {
                    execute_kernel::<f64>(&ctx, read_value_f64, |p, v| {
                        if wbox.contains_point(p) {
                            staged.push((wbox.linear_index(p), v));
                        }
                    });
                    if let Some(ValueVec::F64(arr)) =
                        self.nodes[node].arrays.get_mut(&write_binding.alloc.unwrap().0)
                    {
                        for (i, v) in staged {
                            arr[i] = v;
                        }
                    }
                }
            }
        }

        // Accessor bounds: compare what the archetype touched against the
        // declared regions, after the kernel has finished.
        let (actual_reads, actual_write) = actual_access_regions(&ctx, read_bindings.len());
        let declared: Vec<(usize, Region)> =
            bindings.iter().map(|b| (b.access, b.declared.clone())).collect();
        check_bounds(
            self.program,
            task,
            &spec,
            &actual_reads,
            &actual_write,
            &declared,
            &mut self.bounds_seen,
            &mut self.diagnostics,
        );
    }

    /// Runs the event loop to completion, pulling stream messages as the
    /// simulation frontier requires them.
    pub fn run(mut self, rx: Receiver<StreamMsg>) -> Result<SimTrace, SimError> {
        let mut gather_plan: Option<Vec<GatherEntry>> = None;
        let mut stream_open = true;
        loop {
            // Pull stream messages until the next event is safely below every
            // node's availability frontier.
            loop {
                let next_time = self.heap.peek().map(|std::cmp::Reverse(Event::At(t, _, _))| *t);
                if !stream_open {
                    break;
                }
                let frontier = if self.cfg.respect_avail {
                    self.nodes.iter().map(|n| n.last_avail).min().unwrap_or(0)
                } else {
                    u64::MAX
                };
                let need_more = match next_time {
                    None => true,
                    Some(t) => t > frontier,
                };
                if !need_more {
                    break;
                }
                match rx.recv() {
                    Ok(StreamMsg::Item { node, avail_ns, item }) => {
                        self.ingest(node, avail_ns, item)
                    }
                    Ok(StreamMsg::Done { gather }) => {
                        gather_plan = Some(gather);
                        stream_open = false;
                    }
                    Err(_) => stream_open = false,
                }
            }
            let Some(std::cmp::Reverse(Event::At(t, _, kind))) = self.heap.pop() else {
                break;
            };
            self.now = t;
            match kind {
                EventKind::Arrival { node, iid } => {
                    self.try_issue(node as usize, iid);
                }
                EventKind::Pilot { receiver, index } => {
                    let p = self.pilots[index].clone();
                    let effects =
                        self.nodes[receiver as usize].arbiter.ingest(ArbiterInput::Pilot(p));
                    self.apply_arbiter_effects(receiver as usize, effects, t);
                }
                EventKind::Complete { node, iid } => {
                    self.complete(node as usize, iid, t);
                }
            }
        }

        // Everything arrived must have completed, or the graph deadlocked.
        let mut blocked = String::new();
        for (ni, n) in self.nodes.iter().enumerate() {
            for (iid, st) in &n.instrs {
                if !matches!(st.status, Status::Completed { .. }) {
                    let waiting: Vec<String> = st
                        .rec
                        .deps
                        .iter()
                        .filter(|d| {
                            !matches!(
                                n.instrs.get(&d.on.0).map(|s| s.status),
                                Some(Status::Completed { .. })
                            )
                        })
                        .map(|d| d.on.to_string())
                        .collect();
                    blocked.push_str(&format!(
                        "node {ni}: I{iid} {} blocked on [{}]\n",
                        st.rec.kind.name(),
                        waiting.join(", ")
                    ));
                }
            }
            for p in n.arbiter.unmatched_pilots() {
                blocked.push_str(&format!("node {ni}: unmatched pilot {:?}\n", p));
            }
        }
        if !blocked.is_empty() {
            return Err(SimError::Deadlock(blocked));
        }

        let makespan = self.trace.iter().map(|e| e.end_ns).max().unwrap_or(0);
        let contents = if self.cfg.interpret {
            Some(self.assemble_contents(gather_plan.as_deref().unwrap_or(&[])))
        } else {
            None
        };
        let mut events = std::mem::take(&mut self.trace);
        events.sort_by_key(|e| (e.start_ns, e.node, e.iid));
        Ok(SimTrace {
            events,
            makespan_ns: makespan,
            instruction_counts: self.counts,
            peak_alloc_bytes: self.peak_bytes,
            peak_alloc_bytes_by_memory: self
                .peak_bytes_by_memory
                .iter()
                .map(|(m, b)| (MemoryId(*m).to_string(), *b))
                .collect(),
            diagnostics: self.diagnostics,
            contents,
            scheduler_finish_ns: self.scheduler_finish,
        })
    }

    /// Assembles full-extent buffer images from the gather plan; fragments
    /// nobody produced stay zero.
    fn assemble_contents(&self, plan: &[GatherEntry]) -> Vec<ValueVec> {
        let mut out: Vec<ValueVec> = self
            .program
            .buffers
            .iter()
            .map(|b| ValueVec::zeros(b.element_type, b.extent.volume() as usize))
            .collect();
        for entry in plan {
            let decl = self.program.buffer(entry.buffer);
            let ns = &self.nodes[entry.node.0 as usize];
            let Some(arr) = ns.arrays.get(&entry.alloc) else { continue };
            let abox = ns.allocs[&entry.alloc].bbox;
            let img = &mut out[entry.buffer.0 as usize];
            for b in entry.region.boxes() {
                ValueVec::copy_box(arr, &abox, img, &decl.extent, b);
            }
        }
        out
    }
}

/// Convenience for tests and the sequential path: run a pre-collected set of
/// per-node schedules.
pub fn run_collected(
    program: &ProgramSpec,
    topology: ClusterTopology,
    cost: CostModel,
    cfg: ExecutorConfig,
    streams: Vec<Vec<(u64, ScheduleItem)>>,
    gather: Vec<GatherEntry>,
) -> Result<SimTrace, SimError> {
    let (tx, rx) = std::sync::mpsc::channel();
    // Interleave per-node streams in availability order so frontier logic
    // sees monotone stamps per node.
    let mut cursors: Vec<std::vec::IntoIter<(u64, ScheduleItem)>> =
        streams.into_iter().map(|s| s.into_iter()).collect();
    let mut heads: Vec<Option<(u64, ScheduleItem)>> =
        cursors.iter_mut().map(|c| c.next()).collect();
    loop {
        let mut best: Option<(usize, u64)> = None;
        for (i, h) in heads.iter().enumerate() {
            if let Some((avail, _)) = h {
                if best.map(|(_, a)| *avail < a).unwrap_or(true) {
                    best = Some((i, *avail));
                }
            }
        }
        let Some((i, _)) = best else { break };
        let (avail, item) = heads[i].take().unwrap();
        heads[i] = cursors[i].next();
        tx.send(StreamMsg::Item { node: NodeId(i as u32), avail_ns: avail, item })
            .expect("receiver alive");
    }
    tx.send(StreamMsg::Done { gather }).expect("receiver alive");
    drop(tx);
    Executor::new(program, topology, cost, cfg).run(rx)
}
