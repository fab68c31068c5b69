//! Graphviz DOT emission for the three graph tiers.
//!
//! Edge colors: dataflow black, anti/output green, last-epoch violet,
//! execution-front/horizon-sync orange, allocation lifetime cyan. Output is
//! byte-deterministic for identical graphs.

use std::fmt::Write as _;

use crate::cdag::CommandRecord;
use crate::idag::{InstrDepKind, InstrKind, InstructionRecord};
use crate::tdag::{TaskDepKind, TaskRecord};

fn task_dep_color(kind: TaskDepKind) -> &'static str {
    match kind {
        TaskDepKind::Dataflow => "black",
        TaskDepKind::Anti | TaskDepKind::Output => "green3",
        TaskDepKind::LastEpoch => "violet",
        TaskDepKind::HorizonSync => "orange",
    }
}

fn instr_dep_color(kind: InstrDepKind) -> &'static str {
    match kind {
        InstrDepKind::Dataflow => "black",
        InstrDepKind::Anti => "green3",
        InstrDepKind::AllocationLifetime => "cyan3",
        InstrDepKind::LastEpoch => "violet",
        InstrDepKind::ExecutionFront => "orange",
    }
}

pub fn tdag_dot(tasks: &[TaskRecord]) -> String {
    let mut out = String::from("digraph tdag {\n  rankdir=TB;\n  node [shape=box];\n");
    for t in tasks {
        let _ = writeln!(out, "  {} [label=\"{} {}\"];", t.tid, t.tid, t.kind.label());
    }
    for t in tasks {
        for d in &t.deps {
            let _ = writeln!(
                out,
                "  {} -> {} [color={}];",
                d.on,
                t.tid,
                task_dep_color(d.kind)
            );
        }
    }
    out.push_str("}\n");
    out
}

pub fn cdag_dot(cmds: &[CommandRecord]) -> String {
    let node = cmds.first().map(|c| c.node.0).unwrap_or(0);
    let mut out = format!("digraph cdag_n{node} {{\n  rankdir=TB;\n  node [shape=box];\n");
    for c in cmds {
        let _ = writeln!(
            out,
            "  {} [label=\"{} {} ({})\"];",
            c.cid,
            c.cid,
            escape(&c.kind.label()),
            c.origin
        );
    }
    for c in cmds {
        for d in &c.deps {
            let _ = writeln!(
                out,
                "  {} -> {} [color={}];",
                d.on,
                c.cid,
                task_dep_color(d.kind)
            );
        }
    }
    out.push_str("}\n");
    out
}

fn instr_label(kind: &InstrKind) -> String {
    match kind {
        InstrKind::Alloc { alloc } => format!("alloc {alloc}"),
        InstrKind::Copy { src_memory, dst_memory, region, reason, .. } => {
            format!("copy {src_memory}->{dst_memory} {region:?} ({reason:?})")
        }
        InstrKind::Free { alloc } => format!("free {alloc}"),
        InstrKind::Send { to, message, region, .. } => {
            format!("send {region:?} to {to} ({message})")
        }
        InstrKind::Receive { transfer, region, .. } => {
            format!("receive {region:?} ({transfer})")
        }
        InstrKind::SplitReceive { transfer, region, .. } => {
            format!("split receive {region:?} ({transfer})")
        }
        InstrKind::AwaitReceive { transfer, region, .. } => {
            format!("await receive {region:?} ({transfer})")
        }
        InstrKind::DeviceKernel { device, spec, chunk, .. } => {
            format!("device kernel {} on {device} {chunk:?}", spec.name)
        }
        InstrKind::HostTask { spec, chunk, .. } => {
            format!("host task {} {chunk:?}", spec.name)
        }
        InstrKind::Horizon => "horizon".into(),
        InstrKind::Epoch { shutdown: false } => "epoch (init)".into(),
        InstrKind::Epoch { shutdown: true } => "epoch (shutdown)".into(),
    }
}

pub fn idag_dot(node: u32, instrs: &[&InstructionRecord]) -> String {
    let mut out = format!("digraph idag_n{node} {{\n  rankdir=TB;\n  node [shape=box];\n");
    for r in instrs {
        let _ = writeln!(out, "  {} [label=\"{} {}\"];", r.iid, r.iid, escape(&instr_label(&r.kind)));
    }
    for r in instrs {
        for d in &r.deps {
            let _ = writeln!(
                out,
                "  {} -> {} [color={}];",
                d.on,
                r.iid,
                instr_dep_color(d.kind)
            );
        }
    }
    out.push_str("}\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('"', "\\\"")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures as fx;
    use crate::pipeline::{build_schedule, RunOptions};

    #[test]
    fn dot_is_deterministic() {
        let p = fx::nbody(2, 64);
        let opts = RunOptions::default();
        let s1 = build_schedule(&p, &opts, |_, _, _| {}).unwrap();
        let s2 = build_schedule(&p, &opts, |_, _, _| {}).unwrap();
        assert_eq!(tdag_dot(&s1.tasks), tdag_dot(&s2.tasks));
        for (a, b) in s1.nodes.iter().zip(&s2.nodes) {
            assert_eq!(cdag_dot(&a.commands), cdag_dot(&b.commands));
            let ia: Vec<_> = a.instructions().collect();
            let ib: Vec<_> = b.instructions().collect();
            assert_eq!(idag_dot(a.node.0, &ia), idag_dot(b.node.0, &ib));
        }
    }

    #[test]
    fn dot_contains_edge_colors() {
        let p = fx::nbody(2, 64);
        let opts = RunOptions::default();
        let s = build_schedule(&p, &opts, |_, _, _| {}).unwrap();
        let t = tdag_dot(&s.tasks);
        assert!(t.contains("color=black"));
        assert!(t.contains("color=orange"));
        let ia: Vec<_> = s.nodes[0].instructions().collect();
        let i = idag_dot(0, &ia);
        assert!(i.contains("color=cyan3"));
        assert!(i.contains("color=violet") || i.contains("color=black"));
    }
}
