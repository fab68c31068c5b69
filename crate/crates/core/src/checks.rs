//! User-facing debug diagnostics: uninitialized-read and overlapping-write
//! detection during scheduling, accessor bounds checking during interpreted
//! execution. Checks observe; they never alter graphs, traces or results.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::cdag::split_task;
use crate::ids::{BufferId, TaskId};
use crate::program::{evaluate_range_mapper, ProgramError, ProgramSpec, TaskSpec, TaskTarget};
use crate::region::{GridBox, Region};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    UninitializedRead,
    OverlappingWrite,
    OutOfBounds,
}

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub kind: DiagnosticKind,
    pub task: TaskId,
    pub task_name: String,
    pub buffer: String,
    /// Offending region (bounding box for out-of-bounds accesses).
    pub region: Vec<GridBox>,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        let what = match self.kind {
            DiagnosticKind::UninitializedRead => "read of uninitialized data",
            DiagnosticKind::OverlappingWrite => "overlapping writes between chunks",
            DiagnosticKind::OutOfBounds => "accesses outside the declared region",
        };
        write!(
            f,
            "{sev}: task {} ({}): {what} on buffer {:?}: {:?}",
            self.task, self.task_name, self.buffer, self.region
        )
    }
}

/// Scheduling-time checks, fed each task in submission order.
pub struct SchedulerChecks {
    enabled: bool,
    /// Initialized-or-written region per buffer.
    written: Vec<Region>,
    seen: BTreeSet<(DiagnosticKind, TaskId, BufferId)>,
    pub diagnostics: Vec<Diagnostic>,
}

impl SchedulerChecks {
    pub fn new(program: &ProgramSpec, enabled: bool) -> Self {
        Self {
            enabled,
            written: program
                .buffers
                .iter()
                .map(|b| {
                    if b.host_initialized {
                        Region::from_box(b.extent)
                    } else {
                        Region::empty(b.extent.dims())
                    }
                })
                .collect(),
            seen: BTreeSet::new(),
            diagnostics: Vec::new(),
        }
    }

    fn report(
        &mut self,
        severity: Severity,
        kind: DiagnosticKind,
        tid: TaskId,
        spec: &TaskSpec,
        buffer: BufferId,
        buffer_name: &str,
        region: &Region,
    ) {
        if !self.seen.insert((kind, tid, buffer)) {
            return;
        }
        self.diagnostics.push(Diagnostic {
            severity,
            kind,
            task: tid,
            task_name: spec.name.clone(),
            buffer: buffer_name.to_string(),
            region: region.boxes().to_vec(),
        });
    }

    /// Runs the uninitialized-read and overlapping-write checks for one task
    /// and folds its writes into the written tracking.
    pub fn on_task(
        &mut self,
        program: &ProgramSpec,
        num_nodes: u32,
        devices_per_node: u32,
        tid: TaskId,
        spec: &TaskSpec,
    ) -> Result<(), ProgramError> {
        if !self.enabled {
            return Ok(());
        }
        // Uninitialized reads: any read region intersecting the never-written
        // portion of a buffer.
        for a in &spec.accesses {
            if !a.mode.reads() {
                continue;
            }
            let bid = program.buffer_id(&a.buffer).expect("validated");
            let extent = program.buffer(bid).extent;
            let read = evaluate_range_mapper(&a.mapper, &spec.index_space, &extent)?;
            let uninit = read.difference(&self.written[bid.0 as usize]);
            if !uninit.is_empty() {
                self.report(
                    Severity::Warning,
                    DiagnosticKind::UninitializedRead,
                    tid,
                    spec,
                    bid,
                    &a.buffer,
                    &uninit,
                );
            }
        }

        // Overlapping writes: the declared write regions of all concurrent
        // chunks (across nodes and devices) must be pairwise disjoint.
        let mut chunks = Vec::new();
        for node_chunk in split_task(&spec.index_space, num_nodes as u64) {
            if node_chunk.is_empty() {
                continue;
            }
            match spec.target {
                TaskTarget::Host => chunks.push(node_chunk),
                TaskTarget::Device => {
                    for c in split_task(&node_chunk, devices_per_node as u64) {
                        if !c.is_empty() {
                            chunks.push(c);
                        }
                    }
                }
            }
        }
        if chunks.len() > 1 {
            for a in &spec.accesses {
                if !a.mode.writes() {
                    continue;
                }
                let bid = program.buffer_id(&a.buffer).expect("validated");
                let extent = program.buffer(bid).extent;
                let regions: Vec<Region> = chunks
                    .iter()
                    .map(|c| evaluate_range_mapper(&a.mapper, c, &extent))
                    .collect::<Result<_, _>>()?;
                let mut overlap = Region::empty(extent.dims());
                for i in 0..regions.len() {
                    for j in i + 1..regions.len() {
                        overlap = overlap.union(&regions[i].intersection(&regions[j]));
                    }
                }
                if !overlap.is_empty() {
                    self.report(
                        Severity::Error,
                        DiagnosticKind::OverlappingWrite,
                        tid,
                        spec,
                        bid,
                        &a.buffer,
                        &overlap,
                    );
                }
            }
        }

        // Fold writes in after checking.
        for a in &spec.accesses {
            if !a.mode.writes() {
                continue;
            }
            let bid = program.buffer_id(&a.buffer).expect("validated");
            let extent = program.buffer(bid).extent;
            let w = evaluate_range_mapper(&a.mapper, &spec.index_space, &extent)?;
            let slot = &mut self.written[bid.0 as usize];
            *slot = slot.union(&w);
        }
        Ok(())
    }
}

/// Bounds checking for one executed kernel chunk, evaluated after the kernel
/// finishes: reports the bounding box of accesses outside each accessor's
/// declared region. `dedupe` carries (task, buffer) pairs already reported.
#[allow(clippy::too_many_arguments)]
pub fn check_bounds(
    program: &ProgramSpec,
    tid: TaskId,
    spec: &TaskSpec,
    actual_reads: &[Region],
    actual_write: &Region,
    declared: &[(usize, Region)],
    dedupe: &mut BTreeSet<(TaskId, BufferId)>,
    out: &mut Vec<Diagnostic>,
) {
    let mut read_slot = 0;
    for (ai, a) in spec.accesses.iter().enumerate() {
        let bid = program.buffer_id(&a.buffer).expect("validated");
        let declared_region = declared
            .iter()
            .find(|(i, _)| *i == ai)
            .map(|(_, r)| r.clone())
            .unwrap_or_else(|| Region::empty(program.buffer(bid).extent.dims()));
        let mut out_of_bounds = Region::empty(declared_region.dims());
        if a.mode.reads() {
            if let Some(r) = actual_reads.get(read_slot) {
                out_of_bounds = out_of_bounds.union(&r.difference(&declared_region));
            }
            read_slot += 1;
        }
        if a.mode.writes() {
            out_of_bounds = out_of_bounds.union(&actual_write.difference(&declared_region));
        }
        if !out_of_bounds.is_empty() && dedupe.insert((tid, bid)) {
            out.push(Diagnostic {
                severity: Severity::Error,
                kind: DiagnosticKind::OutOfBounds,
                task: tid,
                task_name: spec.name.clone(),
                buffer: a.buffer.clone(),
                region: vec![out_of_bounds.bounding_box()],
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures as fx;
    use crate::tdag::{build_tdag, TaskKind};

    fn run_scheduler_checks(p: &ProgramSpec) -> Vec<Diagnostic> {
        let tasks = build_tdag(p, Some(2)).unwrap();
        let mut checks = SchedulerChecks::new(p, true);
        for t in &tasks {
            if let TaskKind::Kernel { spec } | TaskKind::HostTask { spec } = &t.kind {
                checks
                    .on_task(p, p.cluster.nodes, p.cluster.devices_per_node, t.tid, spec)
                    .unwrap();
            }
        }
        checks.diagnostics
    }

    #[test]
    fn fresh_buffer_read_warns() {
        let diags = run_scheduler_checks(&fx::diag_uninit());
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].kind, DiagnosticKind::UninitializedRead);
        assert_eq!(diags[0].severity, Severity::Warning);
        assert_eq!(diags[0].region, vec![GridBox::d1(0, 64)]);
    }

    #[test]
    fn host_initialized_buffer_read_is_clean() {
        let p = fx::nbody(2, 64);
        assert!(run_scheduler_checks(&p).is_empty());
    }

    #[test]
    fn partial_write_then_full_read_warns_on_the_gap() {
        let extent = GridBox::d1(0, 64);
        let p = fx::program(
            1,
            1,
            vec![fx::f64_buffer("b", extent, false), fx::f64_buffer("o", extent, false)],
            vec![
                fx::fill_task("w", GridBox::d1(0, 32), "b"),
                fx::task(
                    "r",
                    extent,
                    vec![
                        fx::access("b", crate::program::AccessMode::Read,
                            crate::program::RangeMapper::OneToOne),
                        fx::access("o", crate::program::AccessMode::Write,
                            crate::program::RangeMapper::OneToOne),
                    ],
                    crate::program::KernelArchetype::Map { coeffs: vec![1.0], offset: 0.0 },
                ),
            ],
        );
        let diags = run_scheduler_checks(&p);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].region, vec![GridBox::d1(32, 64)]);
    }

    #[test]
    fn all_mapper_writer_split_two_ways_errors_on_full_extent() {
        let diags = run_scheduler_checks(&fx::diag_overlap());
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].kind, DiagnosticKind::OverlappingWrite);
        assert_eq!(diags[0].severity, Severity::Error);
        assert_eq!(diags[0].region, vec![GridBox::d1(0, 64)]);
    }

    #[test]
    fn one_to_one_writer_is_clean() {
        let extent = GridBox::d1(0, 64);
        let mut p = fx::program(
            2,
            2,
            vec![fx::f64_buffer("b", extent, false)],
            vec![fx::fill_task("w", extent, "b")],
        );
        p.cluster.nodes = 2;
        assert!(run_scheduler_checks(&p).is_empty());
    }

    #[test]
    fn neighborhood_writer_errors_on_boundary_band() {
        let extent = GridBox::d1(0, 64);
        let p = fx::program(
            2,
            1,
            vec![fx::f64_buffer("b", extent, false)],
            vec![fx::task(
                "w",
                extent,
                vec![fx::access(
                    "b",
                    crate::program::AccessMode::Write,
                    crate::program::RangeMapper::Neighborhood { border: vec![1] },
                )],
                crate::program::KernelArchetype::Fill { offset: 0.0, index_coeffs: vec![] },
            )],
        );
        let diags = run_scheduler_checks(&p);
        assert_eq!(diags.len(), 1);
        // Chunks [0,32) and [32,64) inflate to [0,33) and [31,64).
        assert_eq!(diags[0].region, vec![GridBox::d1(31, 33)]);
    }
}
