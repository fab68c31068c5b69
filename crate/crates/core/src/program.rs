//! Declarative description of the user program: buffers, tasks, accessors,
//! range mappers and interpretable kernel archetypes, plus the simulated
//! cluster topology.
//!
//! Programs are immutable after parsing. The JSON file format is documented
//! in the repository README; its top-level keys are `cluster`, `buffers` and
//! `body`.

use serde::{Deserialize, Serialize};

use crate::ids::{BufferId, DeviceId, MemoryId, NodeId};
use crate::region::{Coord, GridBox, Region};

#[derive(Debug, thiserror::Error)]
pub enum ProgramError {
    #[error("program parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("program error: {0}")]
    Invalid(String),
    #[error("one_to_one mapper: chunk {chunk:?} exceeds buffer extent {extent:?}")]
    ChunkExceedsBuffer { chunk: GridBox, extent: GridBox },
}

fn invalid(msg: impl Into<String>) -> ProgramError {
    ProgramError::Invalid(msg.into())
}

/// Shape of the simulated cluster. Memory ids per node are derived as `M0`
/// (user host), `M1` (staging host) and `M2..` (one per local device).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTopology {
    pub nodes: u32,
    pub devices_per_node: u32,
    #[serde(default = "default_true")]
    pub d2d_copy: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ClusterTopology {
    fn default() -> Self {
        Self { nodes: 1, devices_per_node: 1, d2d_copy: true }
    }
}

impl ClusterTopology {
    pub fn validate(&self) -> Result<(), ProgramError> {
        if self.nodes == 0 || self.devices_per_node == 0 {
            return Err(invalid("cluster needs at least one node and one device per node"));
        }
        if self.nodes > 64 {
            return Err(invalid("at most 64 nodes supported"));
        }
        Ok(())
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes).map(NodeId)
    }

    pub fn device_ids(&self) -> impl Iterator<Item = DeviceId> {
        (0..self.devices_per_node).map(DeviceId)
    }

    /// All memories of one node: `M0`, `M1`, one per device.
    pub fn memory_ids(&self) -> impl Iterator<Item = MemoryId> {
        (0..2 + self.devices_per_node as u8).map(MemoryId)
    }
}

/// Debug element type used by the interpretation layer. Allocation sizes and
/// transfer costs use `element_bytes` independently of this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElemType {
    Int,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BufferDecl {
    pub name: String,
    pub extent: GridBox,
    pub element_bytes: u64,
    #[serde(default)]
    pub host_initialized: bool,
    #[serde(default = "default_elem_type")]
    pub element_type: ElemType,
}

fn default_elem_type() -> ElemType {
    ElemType::F64
}

/// Maps a kernel chunk to the buffer region an accessor touches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMapper {
    /// Kernel and buffer index space are identical.
    OneToOne,
    /// Spans the entire buffer regardless of the chunk.
    All,
    /// A fixed buffer region regardless of the chunk.
    Fixed { region: Region },
    /// The chunk inflated by a per-dimension border, clamped to the buffer.
    Neighborhood { border: Vec<Coord> },
}

impl RangeMapper {
    /// True when the mapped region does not depend on the chunk.
    pub fn is_chunk_invariant(&self) -> bool {
        matches!(self, RangeMapper::All | RangeMapper::Fixed { .. })
    }
}

/// Evaluates a range mapper for one kernel chunk. Empty chunks always map to
/// the empty region (empty chunks never produce work).
pub fn evaluate_range_mapper(
    mapper: &RangeMapper,
    chunk: &GridBox,
    buffer_extent: &GridBox,
) -> Result<Region, ProgramError> {
    if chunk.is_empty() {
        return Ok(Region::empty(buffer_extent.dims()));
    }
    match mapper {
        RangeMapper::OneToOne => {
            if !buffer_extent.contains_box(chunk) {
                return Err(ProgramError::ChunkExceedsBuffer {
                    chunk: *chunk,
                    extent: *buffer_extent,
                });
            }
            Ok(Region::from_box(*chunk))
        }
        RangeMapper::All => Ok(Region::from_box(*buffer_extent)),
        RangeMapper::Fixed { region } => Ok(region.clone()),
        RangeMapper::Neighborhood { border } => {
            Ok(Region::from_box(chunk.inflate_clamped(border, buffer_extent)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    Read,
    Write,
    ReadWrite,
}

impl AccessMode {
    pub fn reads(&self) -> bool {
        matches!(self, AccessMode::Read | AccessMode::ReadWrite)
    }

    pub fn writes(&self) -> bool {
        matches!(self, AccessMode::Write | AccessMode::ReadWrite)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccessDecl {
    pub buffer: String,
    pub mode: AccessMode,
    pub mapper: RangeMapper,
}

/// Interpretable kernel bodies. Every archetype writes one value per chunk
/// index `i` into the task's single writing accessor; reads refer to the
/// task's reading accessors in declaration order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelArchetype {
    /// `out[i] = offset + dot(index_coeffs, i)`. No reads.
    Fill {
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        index_coeffs: Vec<f64>,
    },
    /// `out[i] = offset + sum_k coeffs[k] * read_k[i]`.
    Map {
        coeffs: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// `out[i] = sum_coeff * sum of read_0 over the radius-neighborhood of i
    /// (clamped to the buffer) + sum_k coeffs[k] * read_(k+1)[i] + offset`.
    StencilSum {
        radius: Coord,
        sum_coeff: f64,
        #[serde(default)]
        coeffs: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// `out[i] = gather_coeff * sum of read_0 over its mapped region
    /// (chunk-invariant) + sum_k coeffs[k] * read_(k+1)[i] + offset`.
    GatherSum {
        gather_coeff: f64,
        #[serde(default)]
        coeffs: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
}

impl KernelArchetype {
    pub fn name(&self) -> &'static str {
        match self {
            KernelArchetype::Fill { .. } => "fill",
            KernelArchetype::Map { .. } => "map",
            KernelArchetype::StencilSum { .. } => "stencil_sum",
            KernelArchetype::GatherSum { .. } => "gather_sum",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTarget {
    Device,
    Host,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub index_space: GridBox,
    pub accesses: Vec<AccessDecl>,
    pub kernel: KernelArchetype,
    #[serde(default = "default_target")]
    pub target: TaskTarget,
}

fn default_target() -> TaskTarget {
    TaskTarget::Device
}

impl TaskSpec {
    /// Reading accessors in declaration order (archetype read slots).
    pub fn reads(&self) -> impl Iterator<Item = (usize, &AccessDecl)> {
        self.accesses.iter().enumerate().filter(|(_, a)| a.mode.reads())
    }

    /// The single writing accessor.
    pub fn write_access(&self) -> &AccessDecl {
        self.accesses
            .iter()
            .find(|a| a.mode.writes())
            .expect("validated: one writing accessor per task")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyItem {
    Task(TaskSpec),
    Loop { count: u64, body: Vec<BodyItem> },
}

/// A whole program: buffer declarations plus a task sequence with loops.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProgramSpec {
    #[serde(default)]
    pub cluster: ClusterTopology,
    pub buffers: Vec<BufferDecl>,
    pub body: Vec<BodyItem>,
}

impl ProgramSpec {
    pub fn from_json(text: &str) -> Result<Self, ProgramError> {
        let spec: ProgramSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffers
            .iter()
            .position(|b| b.name == name)
            .map(|i| BufferId(i as u32))
    }

    pub fn buffer(&self, id: BufferId) -> &BufferDecl {
        &self.buffers[id.0 as usize]
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        self.cluster.validate()?;
        let mut names = std::collections::HashSet::new();
        for b in &self.buffers {
            if !names.insert(b.name.as_str()) {
                return Err(invalid(format!("duplicate buffer name {:?}", b.name)));
            }
            if b.extent.is_empty() {
                return Err(invalid(format!("buffer {:?} has an empty extent", b.name)));
            }
            if b.element_bytes == 0 {
                return Err(invalid(format!("buffer {:?} has element_bytes == 0", b.name)));
            }
        }
        for task in Unroller::new(&self.body) {
            self.validate_task(&task)?;
        }
        Ok(())
    }

    fn validate_task(&self, t: &TaskSpec) -> Result<(), ProgramError> {
        if t.index_space.is_empty() {
            return Err(invalid(format!("task {:?} has an empty index space", t.name)));
        }
        let mut writers = 0;
        for a in &t.accesses {
            let Some(bid) = self.buffer_id(&a.buffer) else {
                return Err(invalid(format!(
                    "task {:?} accesses undeclared buffer {:?}",
                    t.name, a.buffer
                )));
            };
            let decl = self.buffer(bid);
            if a.mode.writes() {
                writers += 1;
            }
            match &a.mapper {
                RangeMapper::OneToOne | RangeMapper::Neighborhood { .. } => {
                    if t.index_space.dims() != decl.extent.dims() {
                        return Err(invalid(format!(
                            "task {:?}: {} mapper on buffer {:?} needs matching dimensionality",
                            t.name,
                            if matches!(a.mapper, RangeMapper::OneToOne) {
                                "one_to_one"
                            } else {
                                "neighborhood"
                            },
                            a.buffer
                        )));
                    }
                }
                RangeMapper::Fixed { region } => {
                    if !region.is_empty() {
                        if region.dims() != decl.extent.dims() {
                            return Err(invalid(format!(
                                "task {:?}: fixed region dimensionality mismatch on {:?}",
                                t.name, a.buffer
                            )));
                        }
                        if !Region::from_box(decl.extent).contains_region(region) {
                            return Err(invalid(format!(
                                "task {:?}: fixed region outside buffer {:?}",
                                t.name, a.buffer
                            )));
                        }
                    }
                }
                RangeMapper::All => {}
            }
        }
        if writers != 1 {
            return Err(invalid(format!(
                "task {:?} must have exactly one writing accessor, found {}",
                t.name, writers
            )));
        }
        // Kernels evaluate in a single debug element type.
        let mut types = t.accesses.iter().map(|a| {
            self.buffer(self.buffer_id(&a.buffer).expect("checked above")).element_type
        });
        if let Some(first) = types.next() {
            if types.any(|ty| ty != first) {
                return Err(invalid(format!(
                    "task {:?} mixes integer and float buffers",
                    t.name
                )));
            }
        }
        let num_reads = t.reads().count();
        let check_coeffs = |expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(invalid(format!(
                    "task {:?}: kernel {} expects {} linear coefficients, found {}",
                    t.name,
                    t.kernel.name(),
                    expected,
                    got
                )))
            }
        };
        match &t.kernel {
            KernelArchetype::Fill { .. } => {
                if num_reads != 0 {
                    return Err(invalid(format!(
                        "task {:?}: fill kernels take no reading accessors",
                        t.name
                    )));
                }
            }
            KernelArchetype::Map { coeffs, .. } => {
                if num_reads == 0 {
                    return Err(invalid(format!(
                        "task {:?}: map kernels need at least one reading accessor",
                        t.name
                    )));
                }
                check_coeffs(num_reads, coeffs.len())?;
            }
            KernelArchetype::StencilSum { coeffs, .. }
            | KernelArchetype::GatherSum { coeffs, .. } => {
                if num_reads == 0 {
                    return Err(invalid(format!(
                        "task {:?}: {} kernels need at least one reading accessor",
                        t.name,
                        t.kernel.name()
                    )));
                }
                check_coeffs(num_reads - 1, coeffs.len())?;
            }
        }
        Ok(())
    }

    /// Flat task sequence in submission order, loops unrolled.
    pub fn unroll(&self) -> Vec<TaskSpec> {
        Unroller::new(&self.body).collect()
    }
}

struct Unroller<'a> {
    // Stack of (remaining repetitions of the current sequence, cursor, items).
    stack: Vec<(u64, usize, &'a [BodyItem])>,
}

impl<'a> Unroller<'a> {
    fn new(body: &'a [BodyItem]) -> Self {
        Self { stack: vec![(1, 0, body)] }
    }
}

impl<'a> Iterator for Unroller<'a> {
    type Item = TaskSpec;

    fn next(&mut self) -> Option<TaskSpec> {
        loop {
            let (reps, cursor, items) = self.stack.last_mut()?;
            if *cursor == items.len() {
                *reps -= 1;
                if *reps == 0 {
                    self.stack.pop();
                } else {
                    *cursor = 0;
                }
                continue;
            }
            let item = &items[*cursor];
            *cursor += 1;
            match item {
                BodyItem::Task(t) => return Some(t.clone()),
                BodyItem::Loop { count, body } => {
                    if *count > 0 {
                        self.stack.push((*count, 0, body));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(name: &str) -> BodyItem {
        BodyItem::Task(TaskSpec {
            name: name.into(),
            index_space: GridBox::d1(0, 4),
            accesses: vec![AccessDecl {
                buffer: "b".into(),
                mode: AccessMode::Write,
                mapper: RangeMapper::OneToOne,
            }],
            kernel: KernelArchetype::Fill { offset: 0.0, index_coeffs: vec![] },
            target: TaskTarget::Device,
        })
    }

    fn names(items: &[BodyItem]) -> Vec<String> {
        Unroller::new(items).map(|t| t.name).collect()
    }

    #[test]
    fn unroll_repeats_loop_bodies_in_order() {
        let body = vec![BodyItem::Loop { count: 2, body: vec![task("A"), task("B")] }];
        assert_eq!(names(&body), ["A", "B", "A", "B"]);
    }

    #[test]
    fn unroll_zero_count_loop_is_empty() {
        let body = vec![BodyItem::Loop { count: 0, body: vec![task("A")] }];
        assert!(names(&body).is_empty());
    }

    #[test]
    fn unroll_nested() {
        let body = vec![
            task("init"),
            BodyItem::Loop {
                count: 2,
                body: vec![task("X"), BodyItem::Loop { count: 2, body: vec![task("Y")] }],
            },
        ];
        assert_eq!(names(&body), ["init", "X", "Y", "Y", "X", "Y", "Y"]);
    }

    #[test]
    fn mapper_one_to_one_identity() {
        let r = evaluate_range_mapper(
            &RangeMapper::OneToOne,
            &GridBox::d1(0, 512),
            &GridBox::d1(0, 1024),
        )
        .unwrap();
        assert_eq!(r, Region::from_box(GridBox::d1(0, 512)));
    }

    #[test]
    fn mapper_all_spans_buffer() {
        let r = evaluate_range_mapper(
            &RangeMapper::All,
            &GridBox::d1(0, 512),
            &GridBox::d1(0, 1024),
        )
        .unwrap();
        assert_eq!(r, Region::from_box(GridBox::d1(0, 1024)));
    }

    #[test]
    fn mapper_neighborhood_inflates_and_clamps() {
        let r = evaluate_range_mapper(
            &RangeMapper::Neighborhood { border: vec![1] },
            &GridBox::d1(4, 8),
            &GridBox::d1(0, 16),
        )
        .unwrap();
        assert_eq!(r, Region::from_box(GridBox::d1(3, 9)));
        // Clamped at the buffer edge.
        let r = evaluate_range_mapper(
            &RangeMapper::Neighborhood { border: vec![1] },
            &GridBox::d1(0, 8),
            &GridBox::d1(0, 16),
        )
        .unwrap();
        assert_eq!(r, Region::from_box(GridBox::d1(0, 9)));
    }

    #[test]
    fn mapper_one_to_one_out_of_bounds_is_an_error() {
        let err = evaluate_range_mapper(
            &RangeMapper::OneToOne,
            &GridBox::d1(0, 2048),
            &GridBox::d1(0, 1024),
        );
        assert!(matches!(err, Err(ProgramError::ChunkExceedsBuffer { .. })));
    }

    #[test]
    fn mapper_monotonicity() {
        let extent = GridBox::d2([0, 0], [32, 32]);
        let small = GridBox::d2([4, 4], [8, 8]);
        let large = GridBox::d2([2, 2], [12, 16]);
        for mapper in [
            RangeMapper::OneToOne,
            RangeMapper::Neighborhood { border: vec![2, 1] },
            RangeMapper::All,
            RangeMapper::Fixed { region: Region::from_box(GridBox::d2([1, 1], [5, 5])) },
        ] {
            let a = evaluate_range_mapper(&mapper, &small, &extent).unwrap();
            let b = evaluate_range_mapper(&mapper, &large, &extent).unwrap();
            assert!(b.contains_region(&a), "{mapper:?} not monotone");
        }
    }

    #[test]
    fn parse_minimal_program() {
        let text = r#"{
            "cluster": { "nodes": 2, "devices_per_node": 2 },
            "buffers": [
                { "name": "p", "extent": { "min": [0], "max": [64] },
                  "element_bytes": 8, "host_initialized": true }
            ],
            "body": [
                { "loop": { "count": 2, "body": [
                    { "task": {
                        "name": "step",
                        "index_space": { "min": [0], "max": [64] },
                        "accesses": [
                            { "buffer": "p", "mode": "read_write", "mapper": "one_to_one" }
                        ],
                        "kernel": { "map": { "coeffs": [2.0], "offset": 1.0 } }
                    } }
                ] } }
            ]
        }"#;
        let p = ProgramSpec::from_json(text).unwrap();
        assert_eq!(p.unroll().len(), 2);
        assert_eq!(p.cluster.nodes, 2);
        assert!(p.cluster.d2d_copy);
    }

    #[test]
    fn reject_two_writers() {
        let text = r#"{
            "buffers": [
                { "name": "a", "extent": { "min": [0], "max": [8] }, "element_bytes": 8 },
                { "name": "b", "extent": { "min": [0], "max": [8] }, "element_bytes": 8 }
            ],
            "body": [ { "task": {
                "name": "t",
                "index_space": { "min": [0], "max": [8] },
                "accesses": [
                    { "buffer": "a", "mode": "write", "mapper": "one_to_one" },
                    { "buffer": "b", "mode": "write", "mapper": "one_to_one" }
                ],
                "kernel": { "fill": {} }
            } } ]
        }"#;
        assert!(ProgramSpec::from_json(text).is_err());
    }
}
