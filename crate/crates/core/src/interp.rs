//! Kernel archetype semantics.
//!
//! Both the sequential reference interpreter and the simulated executor
//! evaluate kernels through this module, so the archetype definition is the
//! single source of kernel meaning. The two sides differ only in how reads
//! and writes reach storage (full buffers vs. backing allocations).

use crate::program::{BufferDecl, ElemType, KernelArchetype, TaskSpec};
use crate::region::{Coord, GridBox, Region, MAX_DIMS};

/// Element value in interpretation mode: one 64-bit debug value per buffer
/// element, independent of the declared `element_bytes`.
pub trait DebugElem: Copy + PartialEq + std::fmt::Debug + 'static {
    fn zero() -> Self;
    fn add(self, other: Self) -> Self;
    /// Multiplication by an archetype coefficient. Integer buffers use the
    /// truncated integral coefficient so results stay bit-exact.
    fn scale(coeff: f64, v: Self) -> Self;
    fn constant(x: f64) -> Self;
    fn from_init(v: i64) -> Self;
}

impl DebugElem for i64 {
    fn zero() -> Self {
        0
    }
    fn add(self, other: Self) -> Self {
        self.wrapping_add(other)
    }
    fn scale(coeff: f64, v: Self) -> Self {
        (coeff as i64).wrapping_mul(v)
    }
    fn constant(x: f64) -> Self {
        x as i64
    }
    fn from_init(v: i64) -> Self {
        v
    }
}

impl DebugElem for f64 {
    fn zero() -> Self {
        0.0
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn scale(coeff: f64, v: Self) -> Self {
        coeff * v
    }
    fn constant(x: f64) -> Self {
        x
    }
    fn from_init(v: i64) -> Self {
        v as f64
    }
}

/// Deterministic initial contents of host-initialized buffers.
pub fn host_init_value(buffer_index: u32, p: [Coord; MAX_DIMS]) -> i64 {
    (p[0] * 131 + p[1] * 31 + p[2] * 7) as i64 + buffer_index as i64 * 1009 + 17
}

/// Full-buffer or allocation storage for interpretation.
#[derive(Clone, Debug, PartialEq)]
pub enum ValueVec {
    Int(Vec<i64>),
    F64(Vec<f64>),
}

impl ValueVec {
    pub fn zeros(ty: ElemType, len: usize) -> Self {
        match ty {
            ElemType::Int => ValueVec::Int(vec![0; len]),
            ElemType::F64 => ValueVec::F64(vec![0.0; len]),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ValueVec::Int(v) => v.len(),
            ValueVec::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn elem_type(&self) -> ElemType {
        match self {
            ValueVec::Int(_) => ElemType::Int,
            ValueVec::F64(_) => ElemType::F64,
        }
    }

    /// Copies `src_box`-shaped data at matching points between two storages
    /// laid out row-major over `src_alloc` / `dst_alloc`.
    pub fn copy_box(
        src: &ValueVec,
        src_alloc: &GridBox,
        dst: &mut ValueVec,
        dst_alloc: &GridBox,
        b: &GridBox,
    ) {
        match (src, dst) {
            (ValueVec::Int(s), ValueVec::Int(d)) => {
                for p in b.iter_points() {
                    d[dst_alloc.linear_index(p)] = s[src_alloc.linear_index(p)];
                }
            }
            (ValueVec::F64(s), ValueVec::F64(d)) => {
                for p in b.iter_points() {
                    d[dst_alloc.linear_index(p)] = s[src_alloc.linear_index(p)];
                }
            }
            _ => panic!("copy between mismatched element types"),
        }
    }
}

/// Everything needed to evaluate one kernel over one chunk, independent of
/// where the data lives.
pub struct KernelCtx<'a> {
    pub kernel: &'a KernelArchetype,
    pub chunk: GridBox,
    /// Extent of the first reading accessor's buffer (stencil clamping).
    pub read0_extent: Option<GridBox>,
    /// Chunk-invariant gather region (`gather_sum` only).
    pub gather_region: Option<&'a Region>,
}

/// Runs the kernel over `ctx.chunk`. Reads are `read(slot, point)` with slots
/// numbering the task's reading accessors in declaration order; every chunk
/// point is written exactly once via `write`. Parallel-for semantics: all
/// reads observe pre-kernel state, so callers stage writes until the kernel
/// is done.
pub fn execute_kernel<E: DebugElem>(
    ctx: &KernelCtx<'_>,
    mut read: impl FnMut(usize, [Coord; MAX_DIMS]) -> E,
    mut write: impl FnMut([Coord; MAX_DIMS], E),
) {
    match ctx.kernel {
        KernelArchetype::Fill { offset, index_coeffs } => {
            for p in ctx.chunk.iter_points() {
                let mut v = E::constant(*offset);
                for (d, c) in index_coeffs.iter().enumerate().take(MAX_DIMS) {
                    v = v.add(E::scale(*c, E::from_init(p[d] as i64)));
                }
                write(p, v);
            }
        }
        KernelArchetype::Map { coeffs, offset } => {
            for p in ctx.chunk.iter_points() {
                let mut v = E::constant(*offset);
                for (k, c) in coeffs.iter().enumerate() {
                    v = v.add(E::scale(*c, read(k, p)));
                }
                write(p, v);
            }
        }
        KernelArchetype::StencilSum { radius, sum_coeff, coeffs, offset } => {
            let extent = ctx.read0_extent.expect("stencil kernels have a first read");
            for p in ctx.chunk.iter_points() {
                let window = GridBox::new(
                    ctx.chunk.dims(),
                    &p[..ctx.chunk.dims()],
                    &std::array::from_fn::<_, MAX_DIMS, _>(|d| p[d] + 1)[..ctx.chunk.dims()],
                )
                .inflate_clamped(&[*radius; MAX_DIMS], &extent);
                let mut s = E::zero();
                for q in window.iter_points() {
                    s = s.add(read(0, q));
                }
                let mut v = E::constant(*offset).add(E::scale(*sum_coeff, s));
                for (k, c) in coeffs.iter().enumerate() {
                    v = v.add(E::scale(*c, read(k + 1, p)));
                }
                write(p, v);
            }
        }
        KernelArchetype::GatherSum { gather_coeff, coeffs, offset } => {
            let region = ctx.gather_region.expect("gather kernels have a gather region");
            let mut s = E::zero();
            for b in region.boxes() {
                for q in b.iter_points() {
                    s = s.add(read(0, q));
                }
            }
            let gathered = E::scale(*gather_coeff, s);
            for p in ctx.chunk.iter_points() {
                let mut v = E::constant(*offset).add(gathered);
                for (k, c) in coeffs.iter().enumerate() {
                    v = v.add(E::scale(*c, read(k + 1, p)));
                }
                write(p, v);
            }
        }
    }
}

/// The regions a kernel actually touches when run over `chunk`, as defined by
/// the archetype alone (not by the declared range mappers). Returned as
/// (per-read-slot regions, written region); used by bounds checking.
pub fn actual_access_regions(ctx: &KernelCtx<'_>, num_reads: usize) -> (Vec<Region>, Region) {
    let chunk_region = Region::from_box(ctx.chunk);
    let reads = match ctx.kernel {
        KernelArchetype::Fill { .. } => Vec::new(),
        KernelArchetype::Map { .. } => vec![chunk_region.clone(); num_reads],
        KernelArchetype::StencilSum { radius, .. } => {
            let extent = ctx.read0_extent.expect("stencil kernels have a first read");
            let inflated = ctx.chunk.inflate_clamped(&[*radius; MAX_DIMS], &extent);
            let mut v = vec![Region::from_box(inflated)];
            v.extend(std::iter::repeat(chunk_region.clone()).take(num_reads.saturating_sub(1)));
            v
        }
        KernelArchetype::GatherSum { .. } => {
            let gather = ctx.gather_region.expect("gather kernels have a gather region").clone();
            let mut v = vec![gather];
            v.extend(std::iter::repeat(chunk_region.clone()).take(num_reads.saturating_sub(1)));
            v
        }
    };
    (reads, chunk_region)
}

/// The gather region of a `gather_sum` task: its first reading accessor's
/// mapper evaluated over the full kernel index space, which makes it
/// identical for every chunk of the task.
pub fn gather_region_of(
    task: &TaskSpec,
    buffer_of: impl Fn(&str) -> GridBox,
) -> Result<Option<Region>, crate::program::ProgramError> {
    if !matches!(task.kernel, KernelArchetype::GatherSum { .. }) {
        return Ok(None);
    }
    let (_, first_read) = task.reads().next().expect("validated: gather has reads");
    let extent = buffer_of(&first_read.buffer);
    crate::program::evaluate_range_mapper(&first_read.mapper, &task.index_space, &extent)
        .map(Some)
}

/// Relative-tolerance comparison used for float archetypes; integers are
/// bit-exact.
pub fn values_match(a: &ValueVec, b: &ValueVec, rel_tol: f64) -> bool {
    match (a, b) {
        (ValueVec::Int(x), ValueVec::Int(y)) => x == y,
        (ValueVec::F64(x), ValueVec::F64(y)) => {
            x.len() == y.len()
                && x.iter().zip(y).all(|(u, v)| {
                    let scale = u.abs().max(v.abs()).max(1.0);
                    (u - v).abs() <= rel_tol * scale
                })
        }
        _ => false,
    }
}

/// First mismatching point between two full-extent buffer images, if any.
pub fn first_mismatch(
    decl: &BufferDecl,
    expected: &ValueVec,
    got: &ValueVec,
    rel_tol: f64,
) -> Option<String> {
    let describe = |p: [Coord; MAX_DIMS], e: String, g: String| {
        let d = decl.extent.dims();
        Some(format!(
            "buffer {:?} at {:?}: expected {}, got {}",
            decl.name,
            &p[..d],
            e,
            g
        ))
    };
    match (expected, got) {
        (ValueVec::Int(x), ValueVec::Int(y)) => {
            for p in decl.extent.iter_points() {
                let i = decl.extent.linear_index(p);
                if x[i] != y[i] {
                    return describe(p, x[i].to_string(), y[i].to_string());
                }
            }
            None
        }
        (ValueVec::F64(x), ValueVec::F64(y)) => {
            for p in decl.extent.iter_points() {
                let i = decl.extent.linear_index(p);
                let scale = x[i].abs().max(y[i].abs()).max(1.0);
                if (x[i] - y[i]).abs() > rel_tol * scale {
                    return describe(p, x[i].to_string(), y[i].to_string());
                }
            }
            None
        }
        _ => Some(format!("buffer {:?}: element type mismatch", decl.name)),
    }
}
