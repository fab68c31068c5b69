//! Scheduler command queue with the horizon-based flush heuristic.
//!
//! Commands whose compilation would allocate are held back, accumulating
//! the memory requirements of everything queued behind them; the queue
//! flushes once two horizons pass without another allocating command (or at
//! program end). At flush time each first allocation is widened to the
//! bounding box of all queued requirements, eliding later resizes.

use std::collections::BTreeMap;

use crate::cdag::{CommandKind, CommandRecord};
use crate::idag::{IdagCompiler, Widening};
use crate::program::ProgramError;
use crate::tdag::TaskRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookaheadMode {
    /// Compile every command immediately (the legacy eager behavior).
    None,
    /// Flush two horizons after the last allocating command.
    Auto,
    /// Flush only at program end.
    Infinite,
}

impl std::str::FromStr for LookaheadMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(LookaheadMode::None),
            "auto" => Ok(LookaheadMode::Auto),
            "infinite" => Ok(LookaheadMode::Infinite),
            other => Err(format!("unknown lookahead mode {other:?}")),
        }
    }
}

/// A batch of commands released to instruction-graph generation, together
/// with the allocation widening collected while they were queued.
pub struct ReleasedBatch {
    pub commands: Vec<CommandRecord>,
    pub widening: Widening,
}

pub struct CommandQueue {
    mode: LookaheadMode,
    queued: Vec<CommandRecord>,
    horizons_since_allocating: u32,
    requirements: BTreeMap<(crate::ids::BufferId, crate::ids::MemoryId), crate::region::Region>,
    flush_count: usize,
}

impl CommandQueue {
    pub fn new(mode: LookaheadMode) -> Self {
        Self {
            mode,
            queued: Vec::new(),
            horizons_since_allocating: 0,
            requirements: BTreeMap::new(),
            flush_count: 0,
        }
    }

    /// Number of times a non-empty queue was released.
    pub fn flush_count(&self) -> usize {
        self.flush_count
    }

    pub fn queued_len(&self) -> usize {
        self.queued.len()
    }

    fn accumulate(
        &mut self,
        cmd: &CommandRecord,
        compiler: &IdagCompiler<'_>,
        tasks: &[TaskRecord],
    ) -> Result<(), ProgramError> {
        for (buffer, memory, required) in compiler.required_allocations(cmd, tasks)? {
            let slot = self
                .requirements
                .entry((buffer, memory))
                .or_insert_with(|| crate::region::Region::empty(required.dims()));
            *slot = slot.union(&crate::region::Region::from_box(required));
        }
        Ok(())
    }

    fn flush(&mut self) -> ReleasedBatch {
        if !self.queued.is_empty() {
            self.flush_count += 1;
        }
        let widening: Widening = self
            .requirements
            .iter()
            .map(|(k, region)| (*k, region.bounding_box()))
            .collect();
        self.requirements.clear();
        self.horizons_since_allocating = 0;
        ReleasedBatch { commands: std::mem::take(&mut self.queued), widening }
    }

    /// Feeds one command through the queue. Returns the batch of commands
    /// (possibly just this one) now released for compilation, or `None`
    /// while the command stays queued.
    pub fn enqueue(
        &mut self,
        cmd: CommandRecord,
        compiler: &IdagCompiler<'_>,
        tasks: &[TaskRecord],
    ) -> Result<Option<ReleasedBatch>, ProgramError> {
        if matches!(self.mode, LookaheadMode::None) {
            return Ok(Some(ReleasedBatch {
                commands: vec![cmd],
                widening: Widening::new(),
            }));
        }
        let shutdown = matches!(cmd.kind, CommandKind::Epoch { shutdown: true });
        let allocating = compiler.would_allocate(&cmd, tasks)?;
        if self.queued.is_empty() && !allocating && !shutdown {
            return Ok(Some(ReleasedBatch { commands: vec![cmd], widening: Widening::new() }));
        }
        self.accumulate(&cmd, compiler, tasks)?;
        let is_horizon = matches!(cmd.kind, CommandKind::Horizon);
        self.queued.push(cmd);
        if allocating {
            self.horizons_since_allocating = 0;
        } else if is_horizon {
            self.horizons_since_allocating += 1;
        }
        let due = match self.mode {
            LookaheadMode::None => unreachable!("handled above"),
            LookaheadMode::Auto => self.horizons_since_allocating >= 2,
            LookaheadMode::Infinite => false,
        };
        if due || shutdown {
            Ok(Some(self.flush()))
        } else {
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdag::CdagBuilder;
    use crate::fixtures as fx;
    use crate::idag::ScheduleItem;
    use crate::ids::NodeId;
    use crate::program::ProgramSpec;
    use crate::region::GridBox;
    use crate::tdag::build_tdag;

    /// Runs the scheduler side (tdag → cdag → lookahead → idag) for a single
    /// node and returns the emitted items plus the flush count.
    fn compile_node0(p: &ProgramSpec, mode: LookaheadMode) -> (Vec<ScheduleItem>, usize) {
        let tasks = build_tdag(p, Some(2)).unwrap();
        let mut cdag = CdagBuilder::new(p, p.cluster.nodes, NodeId(0));
        let mut idag = crate::idag::IdagCompiler::new(p, p.cluster, NodeId(0));
        let mut queue = CommandQueue::new(mode);
        let mut items = Vec::new();
        for t in tasks.iter().skip(1) {
            for cid in cdag.compile_task(t).unwrap() {
                let cmd = cdag.records()[cid.0 as usize].clone();
                if let Some(batch) = queue.enqueue(cmd, &idag, &tasks).unwrap() {
                    for c in &batch.commands {
                        idag.compile_command(c, &tasks, &batch.widening).unwrap();
                    }
                    items.extend(idag.take_items());
                }
            }
        }
        (items, queue.flush_count())
    }

    fn alloc_count(items: &[ScheduleItem], backing_only: bool) -> usize {
        items
            .iter()
            .filter(|i| match i {
                ScheduleItem::Instr(r) => match &r.kind {
                    crate::idag::InstrKind::Alloc { alloc } => {
                        !backing_only
                            || items.iter().any(|j| matches!(j,
                                ScheduleItem::Alloc(a) if a.aid == *alloc && a.buffer.is_some()))
                    }
                    _ => false,
                },
                _ => false,
            })
            .count()
    }

    fn resize_copies(items: &[ScheduleItem]) -> usize {
        items
            .iter()
            .filter(|i| matches!(i, ScheduleItem::Instr(r)
                if matches!(&r.kind, crate::idag::InstrKind::Copy { reason: crate::idag::CopyReason::Resize, .. })))
            .count()
    }

    #[test]
    fn steady_state_loop_flows_through_auto_mode() {
        let extent = GridBox::d1(0, 64);
        let p = fx::program(
            1,
            1,
            vec![fx::int_buffer("b", extent, true)],
            vec![fx::loop_body(20, vec![fx::rw_map_task("step", extent, "b")])],
        );
        let (_, flushes) = compile_node0(&p, LookaheadMode::Auto);
        // The first-touch allocation queues once; afterwards the stable
        // access pattern streams straight through.
        assert_eq!(flushes, 1);
    }

    #[test]
    fn listing5_auto_elides_the_resize() {
        let p = fx::listing5(256);
        let (none_items, _) = compile_node0(&p, LookaheadMode::None);
        let (auto_items, _) = compile_node0(&p, LookaheadMode::Auto);
        // Eager: first-touch alloc for the write, then a grow to fit the
        // neighborhood read: resize copy plus free.
        assert!(resize_copies(&none_items) >= 1);
        assert_eq!(resize_copies(&auto_items), 0);
        assert!(alloc_count(&auto_items, true) < alloc_count(&none_items, true));
    }

    #[test]
    fn rsim_growth_never_flushes_until_the_end() {
        let p = fx::rsim(20, 16);
        let (items, flushes) = compile_node0(&p, LookaheadMode::Auto);
        assert_eq!(flushes, 1);
        // One backing allocation over the whole run and no resize chain.
        assert_eq!(resize_copies(&items), 0);
        let backing: Vec<&crate::idag::AllocationRecord> = items
            .iter()
            .filter_map(|i| match i {
                ScheduleItem::Alloc(a) if a.buffer.is_some() => Some(a),
                _ => None,
            })
            .collect();
        assert_eq!(backing.len(), 1, "{backing:?}");
        assert_eq!(backing[0].bbox, GridBox::d2([0, 0], [20, 16]));
    }

    #[test]
    fn widened_extent_is_union_bounding_box() {
        let p = fx::rsim(4, 8);
        let tasks = build_tdag(&p, Some(2)).unwrap();
        let mut cdag = CdagBuilder::new(&p, 1, NodeId(0));
        let idag = crate::idag::IdagCompiler::new(&p, p.cluster, NodeId(0));
        let mut queue = CommandQueue::new(LookaheadMode::Infinite);
        let mut final_batch = None;
        for t in tasks.iter().skip(1) {
            for cid in cdag.compile_task(t).unwrap() {
                let cmd = cdag.records()[cid.0 as usize].clone();
                if let Some(batch) = queue.enqueue(cmd, &idag, &tasks).unwrap() {
                    final_batch = Some(batch);
                }
            }
        }
        let batch = final_batch.expect("shutdown epoch flushes");
        let key = (crate::ids::BufferId(0), crate::ids::MemoryId::device(crate::ids::DeviceId(0)));
        assert_eq!(batch.widening[&key], GridBox::d2([0, 0], [4, 8]));
    }
}
