//! Compiles declarative data-parallel task programs into three graph
//! intermediate representations (task graph, per-node command graph,
//! node-local instruction graph) and executes the instruction graphs on a
//! simulated multi-GPU cluster, with a sequential reference interpreter for
//! correctness checking and concurrency/allocation/timing metrics.

pub mod arbiter;
pub mod cdag;
pub mod checks;
pub mod costmodel;
pub mod dot;
pub mod executor;
pub mod fixtures;
pub mod idag;
pub mod ids;
pub mod lookahead;
pub mod pipeline;
pub mod randprog;
pub mod trace;
pub mod interp;
pub mod oracle;
pub mod program;
pub mod region;
pub mod tdag;

pub use ids::*;
pub use program::{
    evaluate_range_mapper, AccessDecl, AccessMode, BodyItem, BufferDecl, ClusterTopology,
    ElemType, KernelArchetype, ProgramError, ProgramSpec, RangeMapper, TaskSpec, TaskTarget,
};
pub use region::{Coord, GridBox, Region, RegionMap};
