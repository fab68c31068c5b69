//! Node-local instruction graph generation.
//!
//! Lowers the command stream into micro-operations: backing-allocation
//! management (with resize chains and a no-downsizing rule), coherence
//! copies subject to producer split, staged sends with pilot messages,
//! receive/split-receive/await-receive lowering of await-pushes, horizon and
//! epoch synchronization and allocation frees.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use crate::cdag::{split_task, CommandKind, CommandRecord};
use crate::ids::{
    AllocationId, BufferId, CommandId, DeviceId, InstructionId, MemoryId, MessageId, NodeId,
    TaskId, TransferId,
};
use crate::program::{
    evaluate_range_mapper, ClusterTopology, ProgramError, ProgramSpec, TaskSpec, TaskTarget,
};
use crate::region::{GridBox, Region, RegionMap};
use crate::tdag::TaskRecord;

/// Why a copy instruction exists; summaries count resize copies separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyReason {
    Coherence,
    Resize,
    Staging,
}

#[derive(Clone, Debug)]
pub struct KernelBinding {
    /// Index into the task spec's access list.
    pub access: usize,
    pub buffer: BufferId,
    pub memory: MemoryId,
    /// Backing allocation and its box; `None` when the accessed region is
    /// empty for this chunk.
    pub alloc: Option<(AllocationId, GridBox)>,
    pub declared: Region,
}

#[derive(Clone, Debug)]
pub enum InstrKind {
    Alloc {
        alloc: AllocationId,
    },
    Copy {
        buffer: BufferId,
        src: AllocationId,
        dst: AllocationId,
        src_memory: MemoryId,
        dst_memory: MemoryId,
        region: GridBox,
        reason: CopyReason,
    },
    Free {
        alloc: AllocationId,
    },
    Send {
        to: NodeId,
        message: MessageId,
        transfer: TransferId,
        buffer: BufferId,
        src: AllocationId,
        region: GridBox,
    },
    Receive {
        transfer: TransferId,
        buffer: BufferId,
        dst: AllocationId,
        region: Region,
    },
    SplitReceive {
        transfer: TransferId,
        buffer: BufferId,
        dst: AllocationId,
        region: Region,
    },
    AwaitReceive {
        transfer: TransferId,
        split: InstructionId,
        region: Region,
    },
    DeviceKernel {
        device: DeviceId,
        task: TaskId,
        spec: Box<TaskSpec>,
        chunk: GridBox,
        bindings: Vec<KernelBinding>,
        gather_region: Option<Region>,
    },
    HostTask {
        task: TaskId,
        spec: Box<TaskSpec>,
        chunk: GridBox,
        bindings: Vec<KernelBinding>,
        gather_region: Option<Region>,
    },
    Horizon,
    Epoch {
        shutdown: bool,
    },
}

impl InstrKind {
    pub fn name(&self) -> &'static str {
        match self {
            InstrKind::Alloc { .. } => "alloc",
            InstrKind::Copy { .. } => "copy",
            InstrKind::Free { .. } => "free",
            InstrKind::Send { .. } => "send",
            InstrKind::Receive { .. } => "receive",
            InstrKind::SplitReceive { .. } => "split_receive",
            InstrKind::AwaitReceive { .. } => "await_receive",
            InstrKind::DeviceKernel { .. } => "device_kernel",
            InstrKind::HostTask { .. } => "host_task",
            InstrKind::Horizon => "horizon",
            InstrKind::Epoch { shutdown: false } => "epoch_init",
            InstrKind::Epoch { shutdown: true } => "epoch_shutdown",
        }
    }
}

/// Dependency kinds in dedupe priority order: when one predecessor is hit
/// for several reasons the earliest listed kind is kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum InstrDepKind {
    Dataflow,
    Anti,
    AllocationLifetime,
    ExecutionFront,
    LastEpoch,
}

#[derive(Clone, Copy, Debug)]
pub struct InstrDep {
    pub on: InstructionId,
    pub kind: InstrDepKind,
}

#[derive(Clone, Debug)]
pub struct InstructionRecord {
    pub iid: InstructionId,
    pub node: NodeId,
    /// Command this instruction was compiled from.
    pub origin: Option<CommandId>,
    pub kind: InstrKind,
    pub deps: Vec<InstrDep>,
}

#[derive(Clone, Debug)]
pub struct AllocationRecord {
    pub aid: AllocationId,
    pub node: NodeId,
    pub memory: MemoryId,
    /// Backing allocations carry their buffer; scratch staging does not.
    pub buffer: Option<BufferId>,
    pub bbox: GridBox,
    pub bytes: u64,
    /// `None` for pre-existing user allocations in M0.
    pub alloc_instr: Option<InstructionId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PilotMessage {
    pub message: MessageId,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub transfer: TransferId,
    pub buffer: BufferId,
    pub region: GridBox,
}

/// Items streamed from the scheduler to the executor, in emission order.
/// Allocation metadata always precedes instructions that reference it.
#[derive(Clone, Debug)]
pub enum ScheduleItem {
    Alloc(AllocationRecord),
    Instr(InstructionRecord),
    Pilot(PilotMessage),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UpVal {
    /// No current version of the region in this memory.
    No,
    /// Current; the local original producer instruction.
    Yes(InstructionId),
}

struct MemState {
    up_to_date: RegionMap<UpVal>,
    /// Last instruction that physically wrote these bytes in this memory,
    /// regardless of whether they are still current.
    last_writer: RegionMap<Option<InstructionId>>,
    readers: Vec<(InstructionId, Region)>,
}

struct BufState {
    /// One entry per memory id.
    mems: Vec<MemState>,
    /// Live backing allocations per memory: (aid, box).
    live: Vec<Vec<(AllocationId, GridBox)>>,
    /// Union of locally written or initialized regions (consistency checks).
    ever_local: Region,
}

struct ScratchAlloc {
    aid: AllocationId,
    alloc_instr: InstructionId,
    users: Vec<InstructionId>,
}

pub struct IdagCompiler<'p> {
    program: &'p ProgramSpec,
    topology: ClusterTopology,
    node: NodeId,
    num_memories: usize,
    next_iid: u64,
    next_aid: u64,
    next_msg: u64,
    buffers: Vec<BufState>,
    allocations: BTreeMap<AllocationId, AllocationRecord>,
    scratch_pool: Vec<ScratchAlloc>,
    fallback: InstructionId,
    pending_horizon: Option<InstructionId>,
    front: BTreeSet<InstructionId>,
    /// Records not yet pruned by horizon progress (scheduler-retained state).
    retained: BTreeSet<InstructionId>,
    peak_retained: usize,
    out: Vec<ScheduleItem>,
    emitted: usize,
}

/// Widened allocation extents per (buffer, memory), supplied by the
/// lookahead queue at flush time.
pub type Widening = BTreeMap<(BufferId, MemoryId), GridBox>;

impl<'p> IdagCompiler<'p> {
    pub fn new(program: &'p ProgramSpec, topology: ClusterTopology, node: NodeId) -> Self {
        let num_memories = 2 + topology.devices_per_node as usize;
        let buffers = program
            .buffers
            .iter()
            .map(|b| BufState {
                mems: (0..num_memories)
                    .map(|_| MemState {
                        up_to_date: RegionMap::new(b.extent, UpVal::No),
                        last_writer: RegionMap::new(b.extent, None),
                        readers: Vec::new(),
                    })
                    .collect(),
                live: vec![Vec::new(); num_memories],
                ever_local: if b.host_initialized {
                    Region::from_box(b.extent)
                } else {
                    Region::empty(b.extent.dims())
                },
            })
            .collect();
        let mut c = Self {
            program,
            topology,
            node,
            num_memories,
            next_iid: 0,
            next_aid: 0,
            next_msg: 0,
            buffers,
            allocations: BTreeMap::new(),
            scratch_pool: Vec::new(),
            fallback: InstructionId(0),
            pending_horizon: None,
            front: BTreeSet::new(),
            retained: BTreeSet::new(),
            peak_retained: 0,
            out: Vec::new(),
            emitted: 0,
        };
        // The initial epoch is instruction 0 and the original producer of
        // every host-initialized buffer's user allocation in M0.
        let epoch = c.emit(None, InstrKind::Epoch { shutdown: false }, Vec::new());
        for (i, decl) in program.buffers.iter().enumerate() {
            if !decl.host_initialized {
                continue;
            }
            let bid = BufferId(i as u32);
            let aid = AllocationId(c.next_aid);
            c.next_aid += 1;
            let rec = AllocationRecord {
                aid,
                node,
                memory: MemoryId::USER,
                buffer: Some(bid),
                bbox: decl.extent,
                bytes: decl.extent.volume() * decl.element_bytes,
                alloc_instr: None,
            };
            c.allocations.insert(aid, rec.clone());
            c.out.push(ScheduleItem::Alloc(rec));
            let st = &mut c.buffers[i];
            st.live[MemoryId::USER.0 as usize].push((aid, decl.extent));
            let full = Region::from_box(decl.extent);
            st.mems[MemoryId::USER.0 as usize]
                .up_to_date
                .update(&full, UpVal::Yes(epoch))
                .expect("extent");
            st.mems[MemoryId::USER.0 as usize]
                .last_writer
                .update(&full, Some(epoch))
                .expect("extent");
        }
        c
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Drains items emitted since the last call.
    pub fn take_items(&mut self) -> Vec<ScheduleItem> {
        self.out.drain(..).collect()
    }

    pub fn peak_retained_records(&self) -> usize {
        self.peak_retained
    }

    /// Total region-map entries held right now (horizon bounding metric).
    pub fn tracker_entries(&self) -> usize {
        self.buffers
            .iter()
            .map(|b| {
                b.mems
                    .iter()
                    .map(|m| m.up_to_date.len() + m.last_writer.len() + m.readers.len())
                    .sum::<usize>()
            })
            .sum()
    }

    pub fn allocation(&self, aid: AllocationId) -> &AllocationRecord {
        &self.allocations[&aid]
    }

    fn emit(
        &mut self,
        origin: Option<CommandId>,
        kind: InstrKind,
        mut deps: Vec<InstrDep>,
    ) -> InstructionId {
        let iid = InstructionId(self.next_iid);
        self.next_iid += 1;
        deps.sort_by(|a, b| a.on.cmp(&b.on).then(a.kind.cmp(&b.kind)));
        deps.dedup_by(|a, b| a.on == b.on);
        deps.retain(|d| d.on != iid);
        if deps.is_empty() && iid.0 != 0 {
            deps.push(InstrDep { on: self.fallback, kind: InstrDepKind::LastEpoch });
        }
        for d in &deps {
            self.front.remove(&d.on);
        }
        self.front.insert(iid);
        self.retained.insert(iid);
        self.peak_retained = self.peak_retained.max(self.retained.len());
        self.out.push(ScheduleItem::Instr(InstructionRecord {
            iid,
            node: self.node,
            origin,
            kind,
            deps,
        }));
        self.emitted += 1;
        iid
    }

    fn buffer_extent(&self, b: BufferId) -> GridBox {
        self.program.buffer(b).extent
    }

    /// Emits allocation metadata followed by its alloc instruction, so the
    /// record always precedes the first reference to the id in the stream.
    fn emit_allocation(
        &mut self,
        origin: Option<CommandId>,
        memory: MemoryId,
        buffer: Option<BufferId>,
        bbox: GridBox,
        bytes: u64,
    ) -> (AllocationId, InstructionId) {
        let aid = AllocationId(self.next_aid);
        self.next_aid += 1;
        let alloc_iid = InstructionId(self.next_iid);
        let rec = AllocationRecord {
            aid,
            node: self.node,
            memory,
            buffer,
            bbox,
            bytes,
            alloc_instr: Some(alloc_iid),
        };
        self.allocations.insert(aid, rec.clone());
        self.out.push(ScheduleItem::Alloc(rec));
        let emitted = self.emit(origin, InstrKind::Alloc { alloc: aid }, Vec::new());
        debug_assert_eq!(emitted, alloc_iid);
        (aid, alloc_iid)
    }

    /// The contiguous allocations a command would require, as
    /// (buffer, memory, required box) triples. Used both by compilation and
    /// by the lookahead classifier.
    pub fn required_allocations(
        &self,
        cmd: &CommandRecord,
        tasks: &[TaskRecord],
    ) -> Result<Vec<(BufferId, MemoryId, GridBox)>, ProgramError> {
        let mut out = Vec::new();
        match &cmd.kind {
            CommandKind::Execution { chunk } => {
                let spec = tasks[cmd.origin.0 as usize].kind.spec().expect("execution has spec");
                for (memory, sub) in self.execution_units(spec, chunk) {
                    for a in &spec.accesses {
                        let bid = self.program.buffer_id(&a.buffer).expect("validated");
                        let extent = self.buffer_extent(bid);
                        let r = evaluate_range_mapper(&a.mapper, &sub, &extent)?;
                        if r.is_empty() {
                            continue;
                        }
                        out.push((bid, memory, r.bounding_box()));
                    }
                }
            }
            CommandKind::AwaitPush { buffer, region, .. } => {
                out.push((*buffer, MemoryId::STAGING, region.bounding_box()));
            }
            _ => {}
        }
        Ok(out)
    }

    /// True when compiling the command now would emit at least one backing
    /// alloc instruction (containment test only, no instruction generation).
    pub fn would_allocate(
        &self,
        cmd: &CommandRecord,
        tasks: &[TaskRecord],
    ) -> Result<bool, ProgramError> {
        for (bid, mem, required) in self.required_allocations(cmd, tasks)? {
            let live = &self.buffers[bid.0 as usize].live[mem.0 as usize];
            if !live.iter().any(|(_, b)| b.contains_box(&required)) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// The (memory, sub-chunk) execution units of one execution command:
    /// device-split for device kernels, the staging host memory for host
    /// tasks.
    fn execution_units(&self, spec: &TaskSpec, chunk: &GridBox) -> Vec<(MemoryId, GridBox)> {
        match spec.target {
            TaskTarget::Host => vec![(MemoryId::STAGING, *chunk)],
            TaskTarget::Device => {
                split_task(chunk, self.topology.devices_per_node as u64)
                    .into_iter()
                    .enumerate()
                    .filter(|(_, c)| !c.is_empty())
                    .map(|(d, c)| (MemoryId::device(DeviceId(d as u32)), c))
                    .collect()
            }
        }
    }

    /// Ensures a live backing allocation of `buffer` in `memory` containing
    /// `required`. New allocations are widened to `future_extent` and merged
    /// with every live allocation they overlap; allocations never shrink.
    pub fn allocate_contiguous(
        &mut self,
        origin: Option<CommandId>,
        buffer: BufferId,
        memory: MemoryId,
        required: GridBox,
        future_extent: Option<GridBox>,
    ) -> AllocationId {
        let mi = memory.0 as usize;
        if let Some((aid, _)) = self.buffers[buffer.0 as usize].live[mi]
            .iter()
            .find(|(_, b)| b.contains_box(&required))
        {
            return *aid;
        }
        // Grow the target box until no live allocation partially overlaps it.
        let mut target = required;
        if let Some(f) = future_extent {
            target = target.hull(&f);
        }
        let mut merged: Vec<(AllocationId, GridBox)> = Vec::new();
        loop {
            let overlaps: Vec<(AllocationId, GridBox)> = self.buffers[buffer.0 as usize].live[mi]
                .iter()
                .filter(|(aid, b)| b.overlaps(&target) && !merged.iter().any(|(m, _)| m == aid))
                .copied()
                .collect();
            if overlaps.is_empty() {
                break;
            }
            for (aid, b) in overlaps {
                target = target.hull(&b);
                merged.push((aid, b));
            }
        }
        merged.sort_by_key(|(aid, _)| *aid);

        let decl = self.program.buffer(buffer);
        let bytes = target.volume() * decl.element_bytes;
        let (aid, alloc_iid) = self.emit_allocation(origin, memory, Some(buffer), target, bytes);

        // Move current fragments out of the merged allocations, then retire
        // them.
        for (old_aid, old_box) in &merged {
            let old_region = Region::from_box(*old_box);
            let fragments = self.buffers[buffer.0 as usize].mems[mi]
                .up_to_date
                .query(&old_region)
                .expect("extent");
            let mut copies = Vec::new();
            for (frag, val) in fragments {
                let UpVal::Yes(producer) = val else { continue };
                for fb in frag.boxes() {
                    let copy = self.emit(
                        origin,
                        InstrKind::Copy {
                            buffer,
                            src: *old_aid,
                            dst: aid,
                            src_memory: memory,
                            dst_memory: memory,
                            region: *fb,
                            reason: CopyReason::Resize,
                        },
                        vec![
                            InstrDep { on: producer, kind: InstrDepKind::Dataflow },
                            InstrDep { on: alloc_iid, kind: InstrDepKind::AllocationLifetime },
                        ],
                    );
                    copies.push((copy, *fb));
                }
            }
            // Free the superseded allocation once everything using it is done.
            let mut free_deps: Vec<InstrDep> = copies
                .iter()
                .map(|(c, _)| InstrDep { on: *c, kind: InstrDepKind::Anti })
                .collect();
            let st = &mut self.buffers[buffer.0 as usize];
            for (r, region) in &st.mems[mi].readers {
                if region.intersects_box(old_box) {
                    free_deps.push(InstrDep { on: *r, kind: InstrDepKind::Anti });
                }
            }
            for (wb, w) in st.mems[mi].last_writer.query(&old_region).expect("extent") {
                let _ = wb;
                if let Some(w) = w {
                    free_deps.push(InstrDep { on: w, kind: InstrDepKind::Anti });
                }
            }
            let old_alloc_instr = self.allocations[old_aid].alloc_instr;
            if let Some(ai) = old_alloc_instr {
                free_deps.push(InstrDep { on: ai, kind: InstrDepKind::AllocationLifetime });
            }
            self.emit(origin, InstrKind::Free { alloc: *old_aid }, free_deps);

            // Rebind trackers: copied fragments are now produced by their
            // resize copy; uncopied (stale) bytes are plain fresh memory.
            let st = &mut self.buffers[buffer.0 as usize];
            let mut copied = Region::empty(old_region.dims());
            for (copy, fb) in &copies {
                let fr = Region::from_box(*fb);
                st.mems[mi].up_to_date.update(&fr, UpVal::Yes(*copy)).expect("extent");
                st.mems[mi].last_writer.update(&fr, Some(*copy)).expect("extent");
                copied = copied.union(&fr);
            }
            let uncopied = old_region.difference(&copied);
            if !uncopied.is_empty() {
                st.mems[mi].last_writer.update(&uncopied, None).expect("extent");
            }
            for (_, region) in &mut st.mems[mi].readers {
                *region = region.difference(&old_region);
            }
            st.mems[mi].readers.retain(|(_, r)| !r.is_empty());
            st.live[mi].retain(|(a, _)| a != old_aid);
        }
        self.buffers[buffer.0 as usize].live[mi].push((aid, target));
        self.buffers[buffer.0 as usize].live[mi].sort_by_key(|(a, _)| *a);
        aid
    }

    fn live_alloc_containing(
        &self,
        buffer: BufferId,
        memory: MemoryId,
        b: &GridBox,
    ) -> Option<(AllocationId, GridBox)> {
        self.buffers[buffer.0 as usize].live[memory.0 as usize]
            .iter()
            .find(|(_, bb)| bb.contains_box(b))
            .copied()
    }

    /// Emits one copy from `src_memory` into `dst_memory` for a single
    /// producer fragment box, registering reader/writer tracking on both
    /// sides.
    fn emit_copy_box(
        &mut self,
        origin: Option<CommandId>,
        buffer: BufferId,
        src_memory: MemoryId,
        dst_memory: MemoryId,
        producer: InstructionId,
        fb: GridBox,
        reason: CopyReason,
    ) -> InstructionId {
        let (src_aid, _) = self
            .live_alloc_containing(buffer, src_memory, &fb)
            .expect("source fragment is backed");
        let (dst_aid, _) = self
            .live_alloc_containing(buffer, dst_memory, &fb)
            .expect("destination allocated before coherence");
        let frag = Region::from_box(fb);
        let mut deps = vec![InstrDep { on: producer, kind: InstrDepKind::Dataflow }];
        if let Some(ai) = self.allocations[&dst_aid].alloc_instr {
            deps.push(InstrDep { on: ai, kind: InstrDepKind::AllocationLifetime });
        }
        {
            let dst = &self.buffers[buffer.0 as usize].mems[dst_memory.0 as usize];
            for (r, region) in &dst.readers {
                if region.intersects(&frag) {
                    deps.push(InstrDep { on: *r, kind: InstrDepKind::Anti });
                }
            }
            for (_, w) in dst.last_writer.query(&frag).expect("extent") {
                if let Some(w) = w {
                    deps.push(InstrDep { on: w, kind: InstrDepKind::Anti });
                }
            }
        }
        let copy = self.emit(
            origin,
            InstrKind::Copy {
                buffer,
                src: src_aid,
                dst: dst_aid,
                src_memory,
                dst_memory,
                region: fb,
                reason,
            },
            deps,
        );
        let st = &mut self.buffers[buffer.0 as usize];
        // The copy reads the source bytes and overwrites the destination.
        st.mems[src_memory.0 as usize].readers.push((copy, frag.clone()));
        let dst = &mut st.mems[dst_memory.0 as usize];
        for (_, region) in &mut dst.readers {
            *region = region.difference(&frag);
        }
        dst.readers.retain(|(_, r)| !r.is_empty());
        dst.up_to_date.update(&frag, UpVal::Yes(copy)).expect("extent");
        dst.last_writer.update(&frag, Some(copy)).expect("extent");
        copy
    }

    /// Makes `region` current in `dst` memory, copying producer fragments
    /// from wherever they are up to date. Device-to-device copies lower to a
    /// staging pair through M1 when the topology cannot copy directly.
    pub fn establish_coherence(
        &mut self,
        origin: Option<CommandId>,
        buffer: BufferId,
        dst: MemoryId,
        region: &Region,
    ) -> Vec<InstructionId> {
        let mut copies = Vec::new();
        if region.is_empty() {
            return copies;
        }
        let di = dst.0 as usize;
        let mut missing = region
            .difference(&self.buffers[buffer.0 as usize].mems[di].up_to_date.region_where(
                |v| matches!(v, UpVal::Yes(_)),
            ));
        for src_mem in 0..self.num_memories {
            if missing.is_empty() {
                break;
            }
            if src_mem == di {
                continue;
            }
            let src = MemoryId(src_mem as u8);
            let avail = self.buffers[buffer.0 as usize].mems[src_mem]
                .up_to_date
                .region_where(|v| matches!(v, UpVal::Yes(_)));
            let take = missing.intersection(&avail);
            if take.is_empty() {
                continue;
            }
            missing = missing.difference(&take);
            let needs_staging = src.is_device() && dst.is_device() && !self.topology.d2d_copy;
            let fragments = self.buffers[buffer.0 as usize].mems[src_mem]
                .up_to_date
                .query(&take)
                .expect("extent");
            for (frag, val) in fragments {
                let UpVal::Yes(producer) = val else { unreachable!("filtered to Yes") };
                for fb in frag.boxes() {
                    if needs_staging {
                        // Stage through host memory: device -> M1 -> device.
                        self.allocate_contiguous(
                            origin,
                            buffer,
                            MemoryId::STAGING,
                            *fb,
                            None,
                        );
                        let up = self.emit_copy_box(
                            origin,
                            buffer,
                            src,
                            MemoryId::STAGING,
                            producer,
                            *fb,
                            CopyReason::Coherence,
                        );
                        let down = self.emit_copy_box(
                            origin,
                            buffer,
                            MemoryId::STAGING,
                            dst,
                            up,
                            *fb,
                            CopyReason::Coherence,
                        );
                        copies.push(up);
                        copies.push(down);
                    } else {
                        copies.push(self.emit_copy_box(
                            origin,
                            buffer,
                            src,
                            dst,
                            producer,
                            *fb,
                            CopyReason::Coherence,
                        ));
                    }
                }
            }
        }
        // Whatever remains was never produced or received locally: an
        // uninitialized read (diagnosed by the checks), which moves no data.
        debug_assert!(
            missing.intersection(&self.buffers[buffer.0 as usize].ever_local).is_empty(),
            "coherence source lost for {missing:?}"
        );
        copies
    }

    fn widened_for(
        &self,
        widening: &Widening,
        buffer: BufferId,
        memory: MemoryId,
    ) -> Option<GridBox> {
        widening.get(&(buffer, memory)).copied()
    }

    /// Compiles one command; emitted items are collected via `take_items`.
    pub fn compile_command(
        &mut self,
        cmd: &CommandRecord,
        tasks: &[TaskRecord],
        widening: &Widening,
    ) -> Result<(), ProgramError> {
        match &cmd.kind {
            CommandKind::Epoch { shutdown: false } => {
                // The initial epoch instruction was emitted at construction.
            }
            CommandKind::Epoch { shutdown: true } => {
                self.free_all_buffers(Some(cmd.cid));
                self.free_scratch(Some(cmd.cid));
                let deps = self.front_deps();
                let iid = self.emit(Some(cmd.cid), InstrKind::Epoch { shutdown: true }, deps);
                self.fallback = iid;
            }
            CommandKind::Horizon => {
                self.free_scratch(Some(cmd.cid));
                let deps = self.front_deps();
                let iid = self.emit(Some(cmd.cid), InstrKind::Horizon, deps);
                if let Some(prev) = self.pending_horizon.replace(iid) {
                    self.apply_horizon(prev);
                }
            }
            CommandKind::Execution { chunk } => {
                let task = &tasks[cmd.origin.0 as usize];
                self.compile_execution(cmd, task, chunk, widening)?;
            }
            CommandKind::Push { target, buffer, region, transfer } => {
                self.compile_push(cmd, *target, *buffer, region, *transfer)?;
            }
            CommandKind::AwaitPush { buffer, region, transfer } => {
                self.compile_await_push(cmd, tasks, *buffer, region, *transfer, widening)?;
            }
        }
        Ok(())
    }

    fn front_deps(&self) -> Vec<InstrDep> {
        self.front
            .iter()
            .map(|i| InstrDep { on: *i, kind: InstrDepKind::ExecutionFront })
            .collect()
    }

    fn apply_horizon(&mut self, horizon: InstructionId) {
        self.fallback = horizon;
        for b in &mut self.buffers {
            for m in &mut b.mems {
                m.up_to_date.replace_values(|v| match v {
                    UpVal::Yes(i) if *i < horizon => UpVal::Yes(horizon),
                    other => *other,
                });
                m.last_writer.replace_values(|v| match v {
                    Some(i) if *i < horizon => Some(horizon),
                    other => *other,
                });
                let dims = m.up_to_date.extent().dims();
                let mut subsumed = Region::empty(dims);
                let mut kept = Vec::new();
                for (iid, region) in m.readers.drain(..) {
                    if iid < horizon {
                        subsumed = subsumed.union(&region);
                    } else {
                        kept.push((iid, region));
                    }
                }
                if !subsumed.is_empty() {
                    kept.push((horizon, subsumed));
                }
                kept.sort_by_key(|(i, _)| *i);
                m.readers = kept;
            }
        }
        // Records older than the applied horizon are no longer referenced by
        // any tracker and can be pruned from retained state.
        self.retained = self.retained.split_off(&horizon);
    }

    fn compile_execution(
        &mut self,
        cmd: &CommandRecord,
        task: &TaskRecord,
        chunk: &GridBox,
        widening: &Widening,
    ) -> Result<(), ProgramError> {
        let spec = task.kind.spec().expect("execution command has a spec").clone();
        let origin = Some(cmd.cid);
        let units = self.execution_units(&spec, chunk);
        let gather_region = crate::interp::gather_region_of(&spec, |name| {
            self.buffer_extent(self.program.buffer_id(name).expect("validated"))
        })?;

        // Phase A: allocations and coherence for every unit against pre-task
        // state, so sibling chunks never source data this task overwrites.
        struct UnitPlan {
            memory: MemoryId,
            sub: GridBox,
            bindings: Vec<KernelBinding>,
            read_regions: Vec<(BufferId, Region)>,
            write_regions: Vec<(BufferId, Region)>,
        }
        let mut plans = Vec::new();
        for (memory, sub) in units {
            let mut bindings = Vec::new();
            let mut read_regions: Vec<(BufferId, Region)> = Vec::new();
            let mut write_regions: Vec<(BufferId, Region)> = Vec::new();
            for (ai, a) in spec.accesses.iter().enumerate() {
                let bid = self.program.buffer_id(&a.buffer).expect("validated");
                let extent = self.buffer_extent(bid);
                let region = evaluate_range_mapper(&a.mapper, &sub, &extent)?;
                if region.is_empty() {
                    bindings.push(KernelBinding {
                        access: ai,
                        buffer: bid,
                        memory,
                        alloc: None,
                        declared: region,
                    });
                    continue;
                }
                let required = region.bounding_box();
                let future = self.widened_for(widening, bid, memory);
                let aid = self.allocate_contiguous(origin, bid, memory, required, future);
                if a.mode.reads() {
                    self.establish_coherence(origin, bid, memory, &region);
                    merge_region(&mut read_regions, bid, &region);
                }
                if a.mode.writes() {
                    merge_region(&mut write_regions, bid, &region);
                }
                let bbox = self.allocations[&aid].bbox;
                bindings.push(KernelBinding {
                    access: ai,
                    buffer: bid,
                    memory,
                    alloc: Some((aid, bbox)),
                    declared: region,
                });
            }
            plans.push(UnitPlan { memory, sub, bindings, read_regions, write_regions });
        }

        // Phase B: kernel instructions with dependencies against pre-task
        // trackers (plus the coherence copies inserted above).
        let mut emitted: Vec<(InstructionId, usize)> = Vec::new();
        for (pi, plan) in plans.iter().enumerate() {
            let mi = plan.memory.0 as usize;
            let mut deps = Vec::new();
            for (bid, region) in &plan.read_regions {
                let st = &self.buffers[bid.0 as usize].mems[mi];
                for (_, val) in st.up_to_date.query(region).expect("extent") {
                    if let UpVal::Yes(p) = val {
                        deps.push(InstrDep { on: p, kind: InstrDepKind::Dataflow });
                    }
                }
            }
            for (bid, region) in &plan.write_regions {
                let st = &self.buffers[bid.0 as usize].mems[mi];
                for (r, rr) in &st.readers {
                    if rr.intersects(region) {
                        deps.push(InstrDep { on: *r, kind: InstrDepKind::Anti });
                    }
                }
                for (_, w) in st.last_writer.query(region).expect("extent") {
                    if let Some(w) = w {
                        deps.push(InstrDep { on: w, kind: InstrDepKind::Anti });
                    }
                }
            }
            for b in &plan.bindings {
                if let Some((aid, _)) = b.alloc {
                    if let Some(ai) = self.allocations[&aid].alloc_instr {
                        deps.push(InstrDep { on: ai, kind: InstrDepKind::AllocationLifetime });
                    }
                }
            }
            let kind = match spec.target {
                TaskTarget::Device => InstrKind::DeviceKernel {
                    device: plan.memory.as_device().expect("device unit"),
                    task: task.tid,
                    spec: Box::new(spec.clone()),
                    chunk: plan.sub,
                    bindings: plan.bindings.clone(),
                    gather_region: gather_region.clone(),
                },
                TaskTarget::Host => InstrKind::HostTask {
                    task: task.tid,
                    spec: Box::new(spec.clone()),
                    chunk: plan.sub,
                    bindings: plan.bindings.clone(),
                    gather_region: gather_region.clone(),
                },
            };
            let iid = self.emit(origin, kind, deps);
            emitted.push((iid, pi));
        }

        // Phase C: tracker updates for the whole task.
        for (iid, pi) in emitted {
            let plan = &plans[pi];
            let mi = plan.memory.0 as usize;
            for (bid, region) in &plan.read_regions {
                self.buffers[bid.0 as usize].mems[mi].readers.push((iid, region.clone()));
            }
            for (bid, region) in &plan.write_regions {
                let st = &mut self.buffers[bid.0 as usize];
                st.ever_local = st.ever_local.union(region);
                for (mem_i, mem) in st.mems.iter_mut().enumerate() {
                    if mem_i == mi {
                        for (_, r) in &mut mem.readers {
                            *r = r.difference(region);
                        }
                        mem.readers.retain(|(_, r)| !r.is_empty());
                        mem.up_to_date.update(region, UpVal::Yes(iid)).expect("extent");
                        mem.last_writer.update(region, Some(iid)).expect("extent");
                    } else {
                        // Copies elsewhere are now stale.
                        mem.up_to_date.update(region, UpVal::No).expect("extent");
                    }
                }
            }
        }
        Ok(())
    }

    fn compile_push(
        &mut self,
        cmd: &CommandRecord,
        target: NodeId,
        buffer: BufferId,
        region: &Region,
        transfer: TransferId,
    ) -> Result<(), ProgramError> {
        let origin = Some(cmd.cid);
        // One pooled staging allocation per push command.
        let decl = self.program.buffer(buffer);
        let bbox = region.bounding_box();
        let bytes = bbox.volume() * decl.element_bytes;
        let (scratch_aid, alloc_iid) =
            self.emit_allocation(origin, MemoryId::STAGING, None, bbox, bytes);
        let mut scratch_users = Vec::new();

        // Producer split: one staging copy + send per up-to-date fragment
        // rectangle, sourced from the lowest memory holding it.
        let mut remaining = region.clone();
        for src_mem in 0..self.num_memories {
            if remaining.is_empty() {
                break;
            }
            let src = MemoryId(src_mem as u8);
            let avail = self.buffers[buffer.0 as usize].mems[src_mem]
                .up_to_date
                .region_where(|v| matches!(v, UpVal::Yes(_)));
            let take = remaining.intersection(&avail);
            if take.is_empty() {
                continue;
            }
            remaining = remaining.difference(&take);
            let fragments = self.buffers[buffer.0 as usize].mems[src_mem]
                .up_to_date
                .query(&take)
                .expect("extent");
            for (frag, val) in fragments {
                let UpVal::Yes(producer) = val else { unreachable!() };
                for fb in frag.boxes() {
                    let (src_aid, _) = self
                        .live_alloc_containing(buffer, src, fb)
                        .expect("pushed data is backed");
                    let copy = self.emit(
                        origin,
                        InstrKind::Copy {
                            buffer,
                            src: src_aid,
                            dst: scratch_aid,
                            src_memory: src,
                            dst_memory: MemoryId::STAGING,
                            region: *fb,
                            reason: CopyReason::Staging,
                        },
                        vec![
                            InstrDep { on: producer, kind: InstrDepKind::Dataflow },
                            InstrDep { on: alloc_iid, kind: InstrDepKind::AllocationLifetime },
                        ],
                    );
                    // The copy reads live buffer bytes; later overwrites of
                    // the pushed region must wait for it.
                    self.buffers[buffer.0 as usize].mems[src_mem]
                        .readers
                        .push((copy, Region::from_box(*fb)));
                    let message = MessageId(self.next_msg);
                    self.next_msg += 1;
                    let send = self.emit(
                        origin,
                        InstrKind::Send {
                            to: target,
                            message,
                            transfer,
                            buffer,
                            src: scratch_aid,
                            region: *fb,
                        },
                        vec![InstrDep { on: copy, kind: InstrDepKind::Dataflow }],
                    );
                    scratch_users.push(send);
                    self.out.push(ScheduleItem::Pilot(PilotMessage {
                        message,
                        sender: self.node,
                        receiver: target,
                        transfer,
                        buffer,
                        region: *fb,
                    }));
                }
            }
        }
        assert!(
            remaining.is_empty(),
            "push of region that is not locally up to date: {remaining:?}"
        );
        self.scratch_pool.push(ScratchAlloc {
            aid: scratch_aid,
            alloc_instr: alloc_iid,
            users: scratch_users,
        });
        Ok(())
    }

    fn compile_await_push(
        &mut self,
        cmd: &CommandRecord,
        tasks: &[TaskRecord],
        buffer: BufferId,
        region: &Region,
        transfer: TransferId,
        widening: &Widening,
    ) -> Result<(), ProgramError> {
        let origin = Some(cmd.cid);
        let future = self.widened_for(widening, buffer, MemoryId::STAGING);
        let dst_aid = self.allocate_contiguous(
            origin,
            buffer,
            MemoryId::STAGING,
            region.bounding_box(),
            future,
        );

        // Consumer split: the regions of this await that each local
        // execution unit of the task will read.
        let spec = tasks[cmd.origin.0 as usize].kind.spec().expect("await belongs to a task");
        let node_chunk =
            split_task(&spec.index_space, self.topology.nodes as u64)[self.node.0 as usize];
        let extent = self.buffer_extent(buffer);
        let mut consumer_regions: Vec<Region> = Vec::new();
        for (_, sub) in self.execution_units(spec, &node_chunk) {
            let mut r = Region::empty(extent.dims());
            for a in &spec.accesses {
                if self.program.buffer_id(&a.buffer) != Some(buffer) || !a.mode.reads() {
                    continue;
                }
                r = r.union(&evaluate_range_mapper(&a.mapper, &sub, &extent)?);
            }
            let r = r.intersection(region);
            if !r.is_empty() && !consumer_regions.contains(&r) {
                consumer_regions.push(r);
            }
        }
        consumer_regions.sort_by(|a, b| a.boxes().cmp(b.boxes()));

        let mi = MemoryId::STAGING.0 as usize;
        let mut head_deps = vec![];
        if let Some(ai) = self.allocations[&dst_aid].alloc_instr {
            head_deps.push(InstrDep { on: ai, kind: InstrDepKind::AllocationLifetime });
        }
        {
            let st = &self.buffers[buffer.0 as usize].mems[mi];
            for (r, rr) in &st.readers {
                if rr.intersects(region) {
                    head_deps.push(InstrDep { on: *r, kind: InstrDepKind::Anti });
                }
            }
            for (_, w) in st.last_writer.query(region).expect("extent") {
                if let Some(w) = w {
                    head_deps.push(InstrDep { on: w, kind: InstrDepKind::Anti });
                }
            }
        }

        // A single receive when consumers cannot be told apart; otherwise a
        // split receive with one await-receive per consumer fragment.
        let single = consumer_regions.len() <= 1
            || consumer_regions.iter().all(|r| r == region);
        let mut produced: Vec<(Region, InstructionId)> = Vec::new();
        if single {
            let recv = self.emit(
                origin,
                InstrKind::Receive { transfer, buffer, dst: dst_aid, region: region.clone() },
                head_deps,
            );
            produced.push((region.clone(), recv));
        } else {
            let split = self.emit(
                origin,
                InstrKind::SplitReceive {
                    transfer,
                    buffer,
                    dst: dst_aid,
                    region: region.clone(),
                },
                head_deps,
            );
            let mut covered = Region::empty(region.dims());
            for cr in &consumer_regions {
                let ar = self.emit(
                    origin,
                    InstrKind::AwaitReceive { transfer, split, region: cr.clone() },
                    vec![InstrDep { on: split, kind: InstrDepKind::Dataflow }],
                );
                produced.push((cr.clone(), ar));
                covered = covered.union(cr);
            }
            // Parts nobody consumes directly still complete with the split
            // receive itself.
            let rest = region.difference(&covered);
            if !rest.is_empty() {
                produced.push((rest, split));
            }
        }

        // The incoming version supersedes every local copy.
        let st = &mut self.buffers[buffer.0 as usize];
        st.ever_local = st.ever_local.union(region);
        for (mem_i, mem) in st.mems.iter_mut().enumerate() {
            if mem_i == mi {
                continue;
            }
            mem.up_to_date.update(region, UpVal::No).expect("extent");
        }
        let mem = &mut st.mems[mi];
        for (_, r) in &mut mem.readers {
            *r = r.difference(region);
        }
        mem.readers.retain(|(_, r)| !r.is_empty());
        for (r, iid) in produced {
            mem.up_to_date.update(&r, UpVal::Yes(iid)).expect("extent");
            mem.last_writer.update(&r, Some(iid)).expect("extent");
        }
        Ok(())
    }

    fn free_scratch(&mut self, origin: Option<CommandId>) {
        let pool = std::mem::take(&mut self.scratch_pool);
        for s in pool {
            let mut deps: Vec<InstrDep> =
                s.users.iter().map(|u| InstrDep { on: *u, kind: InstrDepKind::Anti }).collect();
            deps.push(InstrDep { on: s.alloc_instr, kind: InstrDepKind::AllocationLifetime });
            self.emit(origin, InstrKind::Free { alloc: s.aid }, deps);
        }
    }

    /// Frees every live backing allocation (user M0 allocations stay).
    fn free_all_buffers(&mut self, origin: Option<CommandId>) {
        for bid in 0..self.buffers.len() {
            self.free_buffer(origin, BufferId(bid as u32));
        }
    }

    /// Emits frees for all live backing allocations of one buffer outside
    /// user memory, anti-ordered after their readers and writers.
    pub fn free_buffer(&mut self, origin: Option<CommandId>, buffer: BufferId) {
        let bi = buffer.0 as usize;
        for mem_i in 1..self.num_memories {
            let live = std::mem::take(&mut self.buffers[bi].live[mem_i]);
            for (aid, bbox) in live {
                let mut deps = Vec::new();
                {
                    let st = &self.buffers[bi].mems[mem_i];
                    for (r, rr) in &st.readers {
                        if rr.intersects_box(&bbox) {
                            deps.push(InstrDep { on: *r, kind: InstrDepKind::Anti });
                        }
                    }
                    for (_, w) in
                        st.last_writer.query(&Region::from_box(bbox)).expect("extent")
                    {
                        if let Some(w) = w {
                            deps.push(InstrDep { on: w, kind: InstrDepKind::Anti });
                        }
                    }
                }
                if let Some(ai) = self.allocations[&aid].alloc_instr {
                    deps.push(InstrDep { on: ai, kind: InstrDepKind::AllocationLifetime });
                }
                self.emit(origin, InstrKind::Free { alloc: aid }, deps);
            }
        }
    }

    /// Where each fragment of `region` is currently up to date, preferring
    /// low memory ids. Used to assemble final buffer contents.
    pub fn lookup_fresh(
        &self,
        buffer: BufferId,
        region: &Region,
    ) -> Vec<(Region, MemoryId, AllocationId)> {
        let mut out = Vec::new();
        let mut remaining = region.clone();
        for mem_i in 0..self.num_memories {
            if remaining.is_empty() {
                break;
            }
            let avail = self.buffers[buffer.0 as usize].mems[mem_i]
                .up_to_date
                .region_where(|v| matches!(v, UpVal::Yes(_)));
            let take = remaining.intersection(&avail);
            if take.is_empty() {
                continue;
            }
            remaining = remaining.difference(&take);
            // Resize chains move data into ever-larger allocations, so the
            // newest allocation containing a fragment holds its final bytes.
            // Simulation keeps freed arrays readable, so frees do not matter
            // here.
            let mut rest = take;
            for (aid, bbox) in self.all_allocs_of(buffer, MemoryId(mem_i as u8)).into_iter().rev()
            {
                let part = rest.intersection_box(&bbox);
                if !part.is_empty() {
                    rest = rest.difference(&part);
                    out.push((part, MemoryId(mem_i as u8), aid));
                }
            }
            debug_assert!(rest.is_empty(), "up-to-date fragment has no backing: {rest:?}");
        }
        out
    }

    /// Allocations of one (buffer, memory) pair in ascending aid order.
    fn all_allocs_of(&self, buffer: BufferId, memory: MemoryId) -> Vec<(AllocationId, GridBox)> {
        self.allocations
            .values()
            .filter(|a| a.buffer == Some(buffer) && a.memory == memory)
            .map(|a| (a.aid, a.bbox))
            .collect()
    }
}

fn merge_region(list: &mut Vec<(BufferId, Region)>, bid: BufferId, region: &Region) {
    match list.iter_mut().find(|(b, _)| *b == bid) {
        Some((_, r)) => *r = r.union(region),
        None => list.push((bid, region.clone())),
    }
}

/// True when `target` is reachable from `from` over dependency edges.
pub fn instr_reaches(
    records: &BTreeMap<InstructionId, InstructionRecord>,
    from: InstructionId,
    target: InstructionId,
) -> bool {
    if from == target {
        return true;
    }
    let mut seen = BTreeSet::new();
    let mut stack = vec![from];
    while let Some(i) = stack.pop() {
        if i == target {
            return true;
        }
        if i < target || !seen.insert(i) {
            continue;
        }
        stack.extend(records[&i].deps.iter().map(|d| d.on));
    }
    false
}
