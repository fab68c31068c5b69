//! Simulation trace and summary types.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::checks::Diagnostic;
use crate::interp::ValueVec;

/// One executed instruction. `issue_ns` is when the out-of-order engine
/// committed the instruction to a lane (eagerly issued instructions show
/// `issue_ns` before their predecessors finish); `start_ns`/`end_ns` is the
/// occupied interval.
#[derive(Clone, Debug, Serialize)]
pub struct TraceEvent {
    pub iid: u64,
    pub node: u32,
    pub lane: String,
    pub kind: String,
    pub issue_ns: u64,
    pub start_ns: u64,
    pub end_ns: u64,
    /// When the scheduler stage made this instruction available.
    pub avail_ns: u64,
}

#[derive(Debug, Default, Serialize)]
pub struct SimTrace {
    pub events: Vec<TraceEvent>,
    pub makespan_ns: u64,
    pub instruction_counts: BTreeMap<String, u64>,
    pub peak_alloc_bytes: u64,
    pub peak_alloc_bytes_by_memory: BTreeMap<String, u64>,
    /// Executor-side diagnostics (accessor bounds checking).
    pub diagnostics: Vec<Diagnostic>,
    /// Final buffer images gathered to user memory (interpret mode only).
    #[serde(skip)]
    pub contents: Option<Vec<ValueVec>>,
    /// Largest scheduler-stage availability stamp seen.
    pub scheduler_finish_ns: u64,
}

impl SimTrace {
    /// Serializes events as JSON lines.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

/// Post-hoc validity checks over a finished trace: per-lane FIFO and
/// non-overlap on exclusive lanes, and dependency soundness given the
/// instruction records. Returns human-readable violations.
pub fn validate_trace(
    trace: &SimTrace,
    deps: impl Fn(u32, u64) -> Vec<u64>,
) -> Vec<String> {
    let mut violations = Vec::new();
    // Exclusive lanes: receives and sync markers get per-instruction lanes.
    let mut by_lane: BTreeMap<(u32, &str), Vec<&TraceEvent>> = BTreeMap::new();
    for e in &trace.events {
        by_lane.entry((e.node, e.lane.as_str())).or_default().push(e);
    }
    for ((node, lane), mut events) in by_lane {
        events.sort_by_key(|e| e.start_ns);
        for w in events.windows(2) {
            if w[1].start_ns < w[0].end_ns {
                violations.push(format!(
                    "lane overlap on node {node} lane {lane}: I{} [{}..{}) vs I{} [{}..{})",
                    w[0].iid, w[0].start_ns, w[0].end_ns, w[1].iid, w[1].start_ns, w[1].end_ns
                ));
            }
        }
        // FIFO: completion order equals start order.
        for w in events.windows(2) {
            if w[1].end_ns < w[0].end_ns {
                violations.push(format!(
                    "lane FIFO violation on node {node} lane {lane}: I{} ends before I{}",
                    w[1].iid, w[0].iid
                ));
            }
        }
    }
    // Dependency soundness: every instruction starts no earlier than all of
    // its dependencies end.
    let mut end_of: BTreeMap<(u32, u64), u64> = BTreeMap::new();
    for e in &trace.events {
        end_of.insert((e.node, e.iid), e.end_ns);
    }
    for e in &trace.events {
        for d in deps(e.node, e.iid) {
            if let Some(dep_end) = end_of.get(&(e.node, d)) {
                if e.start_ns < *dep_end {
                    violations.push(format!(
                        "dependency violation: node {} I{} starts {} before dep I{} ends {}",
                        e.node, e.iid, e.start_ns, d, dep_end
                    ));
                }
            }
        }
    }
    violations
}
