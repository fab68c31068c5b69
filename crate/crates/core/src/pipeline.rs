//! Composition of the full scheduling and execution pipeline.
//!
//! The scheduler stage runs task-graph, command-graph, lookahead and
//! instruction-graph generation per node, stamping every emitted item with a
//! simulated per-node scheduler clock. The executor stage consumes the
//! streams. In sequential mode the whole schedule is generated first; in
//! pipelined mode both stages run concurrently connected by an ordered
//! channel, and by construction produce identical graphs and contents.

use std::collections::BTreeSet;
use std::sync::mpsc;

use crate::cdag::{CdagBuilder, CommandRecord, GlobalWriter};
use crate::checks::{Diagnostic, SchedulerChecks, Severity};
use crate::costmodel::CostModel;
use crate::executor::{run_collected, Executor, GatherEntry, SimError, StreamMsg};
use crate::idag::{IdagCompiler, InstructionRecord, ScheduleItem};
use crate::ids::NodeId;
use crate::lookahead::{CommandQueue, LookaheadMode};
use crate::program::{ClusterTopology, ProgramError, ProgramSpec};
use crate::tdag::{TaskRecord, TdagBuilder, TrackerStats};
use crate::trace::SimTrace;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Overrides the program's cluster topology when set.
    pub topology: Option<ClusterTopology>,
    pub lookahead: LookaheadMode,
    /// Critical-path distance between horizons; `None` disables them.
    pub horizon_step: Option<u64>,
    pub interpret: bool,
    pub checks: bool,
    pub eager_issue: bool,
    /// Run scheduler and executor as concurrent stages.
    pub pipelined: bool,
    pub cost: CostModel,
    pub kernel_lanes_per_device: u32,
    pub host_task_lanes: u32,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            topology: None,
            lookahead: LookaheadMode::Auto,
            horizon_step: Some(2),
            interpret: true,
            checks: true,
            eager_issue: true,
            pipelined: false,
            cost: CostModel::default(),
            kernel_lanes_per_device: 1,
            host_task_lanes: 2,
        }
    }
}

/// Scheduler-stage output for one node.
pub struct NodeSchedule {
    pub node: NodeId,
    pub items: Vec<(u64, ScheduleItem)>,
    pub commands: Vec<CommandRecord>,
    /// Scheduler clock when each command was generated (parallel to
    /// `commands`).
    pub command_times: Vec<u64>,
    pub flush_count: usize,
    pub peak_retained_records: usize,
    pub peak_tracker_entries: usize,
}

impl NodeSchedule {
    pub fn instructions(&self) -> impl Iterator<Item = &InstructionRecord> {
        self.items.iter().filter_map(|(_, item)| match item {
            ScheduleItem::Instr(r) => Some(r),
            _ => None,
        })
    }
}

pub struct Schedule {
    pub topology: ClusterTopology,
    pub tasks: Vec<TaskRecord>,
    pub nodes: Vec<NodeSchedule>,
    pub gather: Vec<GatherEntry>,
    pub diagnostics: Vec<Diagnostic>,
    pub tdag_peak: TrackerStats,
}

impl Schedule {
    pub fn has_errors(&self) -> bool {
        self.diagnostics.iter().any(|d| d.severity == Severity::Error)
    }
}

/// Runs the complete scheduler stage, feeding every emitted item to `sink`
/// as it is produced.
pub fn build_schedule(
    program: &ProgramSpec,
    opts: &RunOptions,
    mut sink: impl FnMut(NodeId, u64, &ScheduleItem),
) -> Result<Schedule, ProgramError> {
    let topology = opts.topology.unwrap_or(program.cluster);
    topology.validate()?;
    let num_nodes = topology.nodes;

    let mut tdag = TdagBuilder::new(program, opts.horizon_step);
    let mut checks = SchedulerChecks::new(program, opts.checks);
    let mut cdags: Vec<CdagBuilder> =
        (0..num_nodes).map(|n| CdagBuilder::new(program, num_nodes, NodeId(n))).collect();
    let mut idags: Vec<IdagCompiler> =
        (0..num_nodes).map(|n| IdagCompiler::new(program, topology, NodeId(n))).collect();
    let mut queues: Vec<CommandQueue> =
        (0..num_nodes).map(|_| CommandQueue::new(opts.lookahead)).collect();
    let mut clocks = vec![0u64; num_nodes as usize];
    let mut node_items: Vec<Vec<(u64, ScheduleItem)>> = vec![Vec::new(); num_nodes as usize];
    let mut command_times: Vec<Vec<u64>> = vec![Vec::new(); num_nodes as usize];
    let mut peak_tracker_entries = vec![0usize; num_nodes as usize];

    // The initial epoch instruction is emitted at compiler construction.
    for n in 0..num_nodes as usize {
        for item in idags[n].take_items() {
            sink(NodeId(n as u32), 0, &item);
            node_items[n].push((0, item));
        }
    }

    let mut process_task = |task: &TaskRecord,
                            tdag_records: &[TaskRecord],
                            cdags: &mut Vec<CdagBuilder>,
                            idags: &mut Vec<IdagCompiler>,
                            queues: &mut Vec<CommandQueue>,
                            clocks: &mut Vec<u64>,
                            node_items: &mut Vec<Vec<(u64, ScheduleItem)>>,
                            command_times: &mut Vec<Vec<u64>>,
                            peaks: &mut Vec<usize>|
     -> Result<(), ProgramError> {
        for n in 0..num_nodes as usize {
            clocks[n] += opts.cost.sched_task_ns;
            let new_cids = cdags[n].compile_task(task)?;
            for cid in new_cids {
                clocks[n] += opts.cost.sched_command_ns;
                command_times[n].push(clocks[n]);
                let cmd = cdags[n].records()[cid.0 as usize].clone();
                if let Some(batch) = queues[n].enqueue(cmd, &idags[n], tdag_records)? {
                    for c in &batch.commands {
                        idags[n].compile_command(c, tdag_records, &batch.widening)?;
                        for item in idags[n].take_items() {
                            clocks[n] += opts.cost.sched_instruction_ns;
                            sink(NodeId(n as u32), clocks[n], &item);
                            node_items[n].push((clocks[n], item));
                        }
                    }
                }
                peaks[n] = peaks[n].max(idags[n].tracker_entries());
            }
        }
        Ok(())
    };

    for spec in program.unroll() {
        checks.on_task(
            program,
            num_nodes,
            topology.devices_per_node,
            crate::ids::TaskId(tdag.records().len() as u64),
            &spec,
        )?;
        tdag.submit(spec)?;
        let task = tdag.records().last().unwrap().clone();
        process_task(
            &task,
            tdag.records(),
            &mut cdags,
            &mut idags,
            &mut queues,
            &mut clocks,
            &mut node_items,
            &mut command_times,
            &mut peak_tracker_entries,
        )?;
        if tdag.generate_horizon_if_due().is_some() {
            let task = tdag.records().last().unwrap().clone();
            process_task(
                &task,
                tdag.records(),
                &mut cdags,
                &mut idags,
                &mut queues,
                &mut clocks,
                &mut node_items,
                &mut command_times,
                &mut peak_tracker_entries,
            )?;
        }
    }
    tdag.finish();
    let task = tdag.records().last().unwrap().clone();
    process_task(
        &task,
        tdag.records(),
        &mut cdags,
        &mut idags,
        &mut queues,
        &mut clocks,
        &mut node_items,
        &mut command_times,
        &mut peak_tracker_entries,
    )?;

    // Assemble the gather plan from the final writer tracking.
    let mut gather = Vec::new();
    for (bi, _) in program.buffers.iter().enumerate() {
        let bid = crate::ids::BufferId(bi as u32);
        for (region, writer) in cdags[0].global_fragments(bid) {
            let owner = match writer {
                GlobalWriter::Uninit => continue,
                GlobalWriter::HostInit => NodeId(0),
                GlobalWriter::Task { node, .. } => node,
            };
            for (part, _, alloc) in idags[owner.0 as usize].lookup_fresh(bid, &region) {
                gather.push(GatherEntry { buffer: bid, region: part, node: owner, alloc });
            }
        }
    }

    let tdag_peak = tdag.peak_tracker_stats();
    let nodes = (0..num_nodes as usize)
        .map(|n| NodeSchedule {
            node: NodeId(n as u32),
            items: std::mem::take(&mut node_items[n]),
            commands: cdags[n].records().to_vec(),
            command_times: std::mem::take(&mut command_times[n]),
            flush_count: queues[n].flush_count(),
            peak_retained_records: idags[n].peak_retained_records(),
            peak_tracker_entries: peak_tracker_entries[n],
        })
        .collect();
    Ok(Schedule {
        topology,
        tasks: tdag.into_records(),
        nodes,
        gather,
        diagnostics: checks.diagnostics,
        tdag_peak,
    })
}

/// Full run: scheduler and executor, sequential or pipelined.
pub fn run(program: &ProgramSpec, opts: &RunOptions) -> Result<(Schedule, SimTrace), RunError> {
    let exec_cfg = crate::executor::ExecutorConfig {
        interpret: opts.interpret,
        eager_issue: opts.eager_issue,
        kernel_lanes_per_device: opts.kernel_lanes_per_device,
        host_task_lanes: opts.host_task_lanes,
        respect_avail: opts.pipelined,
    };
    if !opts.pipelined {
        let schedule = build_schedule(program, opts, |_, _, _| {})?;
        let streams: Vec<Vec<(u64, ScheduleItem)>> =
            schedule.nodes.iter().map(|n| n.items.clone()).collect();
        let trace = run_collected(
            program,
            schedule.topology,
            opts.cost.clone(),
            exec_cfg,
            streams,
            schedule.gather.clone(),
        )?;
        return Ok((schedule, trace));
    }

    // Concurrent two-stage pipeline over an ordered channel.
    let topology = opts.topology.unwrap_or(program.cluster);
    topology.validate().map_err(RunError::Program)?;
    let (tx, rx) = mpsc::channel::<StreamMsg>();
    std::thread::scope(|scope| {
        let sched_handle = scope.spawn(|| {
            let tx_items = tx;
            let schedule = build_schedule(program, opts, |node, avail, item| {
                let _ = tx_items.send(StreamMsg::Item {
                    node,
                    avail_ns: avail,
                    item: item.clone(),
                });
            })?;
            let _ = tx_items.send(StreamMsg::Done { gather: schedule.gather.clone() });
            Ok::<Schedule, ProgramError>(schedule)
        });
        let executor = Executor::new(program, topology, opts.cost.clone(), exec_cfg);
        let trace = executor.run(rx);
        let schedule = sched_handle.join().expect("scheduler thread");
        match (schedule, trace) {
            (Ok(s), Ok(t)) => Ok((s, t)),
            (Err(e), _) => Err(RunError::Program(e)),
            (_, Err(e)) => Err(RunError::Sim(e)),
        }
    })
}

/// Runs both the simulation and the sequential reference interpreter and
/// compares final buffer contents (1e-12 relative tolerance for floats).
pub struct VerifyReport {
    pub passed: bool,
    pub mismatches: Vec<String>,
    pub diagnostics: Vec<Diagnostic>,
    pub trace_violations: Vec<String>,
}

pub fn verify(program: &ProgramSpec, opts: &RunOptions) -> Result<VerifyReport, RunError> {
    let mut opts = opts.clone();
    opts.interpret = true;
    let (schedule, trace) = run(program, &opts)?;
    let reference = crate::oracle::run_sequential(program)?;
    let mut mismatches = Vec::new();
    let contents = trace.contents.as_ref().expect("interpret mode");
    for (i, decl) in program.buffers.iter().enumerate() {
        if let Some(m) =
            crate::interp::first_mismatch(decl, &reference.buffers[i], &contents[i], 1e-12)
        {
            mismatches.push(m);
        }
    }
    let trace_violations = validate_against_schedule(&schedule, &trace);
    let mut diagnostics = schedule.diagnostics.clone();
    diagnostics.extend(trace.diagnostics.iter().cloned());
    Ok(VerifyReport {
        passed: mismatches.is_empty() && trace_violations.is_empty(),
        mismatches,
        diagnostics,
        trace_violations,
    })
}

/// Structural trace validation: dependency soundness and lane FIFO, plus
/// alloc/free pairing over the emitted instruction graphs.
pub fn validate_against_schedule(schedule: &Schedule, trace: &SimTrace) -> Vec<String> {
    let mut violations = crate::trace::validate_trace(trace, |node, iid| {
        schedule.nodes[node as usize]
            .instructions()
            .find(|r| r.iid.0 == iid)
            .map(|r| r.deps.iter().map(|d| d.on.0).collect())
            .unwrap_or_default()
    });
    for ns in &schedule.nodes {
        let mut alloc_count: std::collections::BTreeMap<u64, i64> = Default::default();
        let mut user_allocs = BTreeSet::new();
        for (_, item) in &ns.items {
            match item {
                ScheduleItem::Alloc(a) if a.alloc_instr.is_none() => {
                    user_allocs.insert(a.aid.0);
                }
                ScheduleItem::Instr(r) => match &r.kind {
                    crate::idag::InstrKind::Alloc { alloc } => {
                        *alloc_count.entry(alloc.0).or_insert(0) += 1;
                    }
                    crate::idag::InstrKind::Free { alloc } => {
                        *alloc_count.entry(alloc.0).or_insert(0) -= 1;
                    }
                    _ => {}
                },
                _ => {}
            }
        }
        for (aid, n) in alloc_count {
            if n != 0 && !user_allocs.contains(&aid) {
                violations.push(format!(
                    "node {}: allocation A{aid} has unbalanced alloc/free ({n})",
                    ns.node
                ));
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures as fx;

    fn opts() -> RunOptions {
        RunOptions::default()
    }

    #[test]
    fn nbody_interpreted_matches_oracle() {
        let p = fx::nbody(2, 64);
        for nodes in [1u32, 2] {
            for devices in [1u32, 2] {
                for mode in
                    [LookaheadMode::None, LookaheadMode::Auto, LookaheadMode::Infinite]
                {
                    let mut o = opts();
                    o.topology = Some(ClusterTopology {
                        nodes,
                        devices_per_node: devices,
                        d2d_copy: true,
                    });
                    o.lookahead = mode;
                    let report = verify(&p, &o).unwrap_or_else(|e| {
                        panic!("{nodes}x{devices} {mode:?}: {e}")
                    });
                    assert!(
                        report.passed,
                        "{nodes}x{devices} {mode:?}: {:?} {:?}",
                        report.mismatches, report.trace_violations
                    );
                }
            }
        }
    }

    #[test]
    fn empty_program_makespan_is_epoch_costs() {
        let p = fx::program(1, 1, vec![], vec![]);
        let (_, trace) = run(&p, &opts()).unwrap();
        let epochs = 2 * CostModel::default().epoch_ns;
        assert_eq!(trace.makespan_ns, epochs);
    }

    #[test]
    fn pipeline_and_sequential_agree() {
        let p = fx::nbody(3, 64);
        let mut seq = opts();
        seq.topology =
            Some(ClusterTopology { nodes: 2, devices_per_node: 2, d2d_copy: true });
        let mut pip = seq.clone();
        pip.pipelined = true;
        let (s1, t1) = run(&p, &seq).unwrap();
        let (s2, t2) = run(&p, &pip).unwrap();
        for (a, b) in s1.nodes.iter().zip(&s2.nodes) {
            let ia: Vec<String> = a.instructions().map(|r| format!("{r:?}")).collect();
            let ib: Vec<String> = b.instructions().map(|r| format!("{r:?}")).collect();
            assert_eq!(ia, ib);
        }
        assert_eq!(t1.contents.as_ref().unwrap(), t2.contents.as_ref().unwrap());
        // The pipelined run interleaves stages; the scheduler stamps make the
        // overlap visible.
        assert!(t2.scheduler_finish_ns < t2.makespan_ns);
    }

    #[test]
    fn wavesim_strong_scaling_trend() {
        let p = fx::wavesim(256, 4);
        let mut makespans = Vec::new();
        for devices in [1u32, 2, 4] {
            let mut o = opts();
            o.interpret = false;
            o.checks = false;
            o.topology = Some(ClusterTopology {
                nodes: 1,
                devices_per_node: devices,
                d2d_copy: true,
            });
            let (_, trace) = run(&p, &o).unwrap();
            makespans.push(trace.makespan_ns);
        }
        assert!(makespans[0] > makespans[1] && makespans[1] > makespans[2], "{makespans:?}");
    }
}
