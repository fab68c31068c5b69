//! Programmatic builders for the bundled example programs and small helpers
//! for constructing programs in tests. The JSON files under `fixtures/` are
//! generated from these builders and kept in sync by a test.

use crate::program::{
    AccessDecl, AccessMode, BodyItem, BufferDecl, ClusterTopology, ElemType, KernelArchetype,
    ProgramSpec, RangeMapper, TaskSpec, TaskTarget,
};
use crate::region::{GridBox, Region};

pub fn program(
    nodes: u32,
    devices_per_node: u32,
    buffers: Vec<BufferDecl>,
    body: Vec<BodyItem>,
) -> ProgramSpec {
    ProgramSpec {
        cluster: ClusterTopology { nodes, devices_per_node, d2d_copy: true },
        buffers,
        body,
    }
}

pub fn int_buffer(name: &str, extent: GridBox, host_initialized: bool) -> BufferDecl {
    BufferDecl {
        name: name.into(),
        extent,
        element_bytes: 8,
        host_initialized,
        element_type: ElemType::Int,
    }
}

pub fn f64_buffer(name: &str, extent: GridBox, host_initialized: bool) -> BufferDecl {
    BufferDecl {
        name: name.into(),
        extent,
        element_bytes: 8,
        host_initialized,
        element_type: ElemType::F64,
    }
}

pub fn task(
    name: &str,
    index_space: GridBox,
    accesses: Vec<AccessDecl>,
    kernel: KernelArchetype,
) -> BodyItem {
    BodyItem::Task(TaskSpec {
        name: name.into(),
        index_space,
        accesses,
        kernel,
        target: TaskTarget::Device,
    })
}

pub fn access(buffer: &str, mode: AccessMode, mapper: RangeMapper) -> AccessDecl {
    AccessDecl { buffer: buffer.into(), mode, mapper }
}

/// `buffer[i] = i0` over `space`, written one-to-one.
pub fn fill_task(name: &str, space: GridBox, buffer: &str) -> BodyItem {
    task(
        name,
        space,
        vec![access(buffer, AccessMode::Write, RangeMapper::OneToOne)],
        KernelArchetype::Fill { offset: 0.0, index_coeffs: vec![1.0] },
    )
}

/// `buffer[i] = buffer[i]` (read-write one-to-one map), the steady-state
/// pattern used in horizon tests.
pub fn rw_map_task(name: &str, space: GridBox, buffer: &str) -> BodyItem {
    task(
        name,
        space,
        vec![access(buffer, AccessMode::ReadWrite, RangeMapper::OneToOne)],
        KernelArchetype::Map { coeffs: vec![1.0], offset: 1.0 },
    )
}

pub fn loop_body(count: u64, body: Vec<BodyItem>) -> BodyItem {
    BodyItem::Loop { count, body }
}

/// Direct n-body: each step integrates gathered interactions into the
/// velocities, then advances positions. An all-gather exchange of `P` per
/// step on multi-node runs.
pub fn nbody(steps: u64, n: u64) -> ProgramSpec {
    let extent = GridBox::d1(0, n);
    let timestep = task(
        "timestep",
        extent,
        vec![
            access("P", AccessMode::Read, RangeMapper::All),
            access("V", AccessMode::ReadWrite, RangeMapper::OneToOne),
        ],
        KernelArchetype::GatherSum { gather_coeff: 1e-3, coeffs: vec![1.0], offset: 0.0 },
    );
    let update = task(
        "update",
        extent,
        vec![
            access("V", AccessMode::Read, RangeMapper::OneToOne),
            access("P", AccessMode::ReadWrite, RangeMapper::OneToOne),
        ],
        KernelArchetype::Map { coeffs: vec![0.01, 1.0], offset: 0.0 },
    );
    let mut p = program(
        2,
        2,
        vec![
            BufferDecl {
                name: "P".into(),
                extent,
                element_bytes: 24,
                host_initialized: true,
                element_type: ElemType::F64,
            },
            BufferDecl {
                name: "V".into(),
                extent,
                element_bytes: 24,
                host_initialized: true,
                element_type: ElemType::F64,
            },
        ],
        vec![loop_body(steps, vec![timestep, update])],
    );
    p.cluster.d2d_copy = true;
    p
}

/// Radiosity-style growth: step `t` reads all previously produced rows and
/// appends row `t`, so the backing allocation must grow every step unless
/// the scheduler widens it ahead of time.
pub fn rsim(steps: u64, width: u64) -> ProgramSpec {
    assert!(steps >= 1);
    let extent = GridBox::d2([0, 0], [steps, width]);
    let mut body = vec![task(
        "emit0",
        GridBox::d2([0, 0], [1, width]),
        vec![access("R", AccessMode::Write, RangeMapper::OneToOne)],
        KernelArchetype::Fill { offset: 1.0, index_coeffs: vec![0.0, 1e-3, 0.0] },
    )];
    for t in 1..steps {
        body.push(task(
            &format!("radiosity{t}"),
            GridBox::d2([t, 0], [t + 1, width]),
            vec![
                access(
                    "R",
                    AccessMode::Read,
                    RangeMapper::Fixed {
                        region: Region::from_box(GridBox::d2([0, 0], [t, width])),
                    },
                ),
                access("R", AccessMode::Write, RangeMapper::OneToOne),
            ],
            KernelArchetype::GatherSum { gather_coeff: 1e-6, coeffs: vec![], offset: 1.0 },
        ));
    }
    program(1, 1, vec![f64_buffer("R", extent, false)], body)
}

/// Five-point wave propagation stencil with a two-buffer leapfrog: each step
/// overwrites the older field from the newer one, so roles alternate with a
/// period of two. Total steps = 2 * `half_steps`.
pub fn wavesim(n: u64, half_steps: u64) -> ProgramSpec {
    let extent = GridBox::d2([0, 0], [n, n]);
    let step = |name: &str, prev: &str, curr: &str| {
        task(
            name,
            extent,
            vec![
                access(curr, AccessMode::Read, RangeMapper::Neighborhood { border: vec![1, 1] }),
                access(curr, AccessMode::Read, RangeMapper::OneToOne),
                access(prev, AccessMode::ReadWrite, RangeMapper::OneToOne),
            ],
            KernelArchetype::StencilSum {
                radius: 1,
                sum_coeff: 0.1,
                coeffs: vec![1.5, -1.0],
                offset: 0.0,
            },
        )
    };
    program(
        1,
        2,
        vec![f64_buffer("u0", extent, true), f64_buffer("u1", extent, true)],
        vec![loop_body(half_steps, vec![step("step_a", "u0", "u1"), step("step_b", "u1", "u0")])],
    )
}

/// A one-to-one write followed by a one-neighborhood read of the same
/// region: compiled naively the second task forces an allocation resize.
pub fn listing5(n: u64) -> ProgramSpec {
    let a_extent = GridBox::d1(0, 2 * n);
    let space = GridBox::d1(0, n);
    program(
        1,
        1,
        vec![f64_buffer("a", a_extent, true), f64_buffer("b", space, false)],
        vec![
            fill_task("produce", space, "a"),
            task(
                "consume",
                space,
                vec![
                    access("a", AccessMode::Read, RangeMapper::Neighborhood { border: vec![1] }),
                    access("b", AccessMode::Write, RangeMapper::OneToOne),
                ],
                KernelArchetype::StencilSum {
                    radius: 1,
                    sum_coeff: 1.0,
                    coeffs: vec![],
                    offset: 0.0,
                },
            ),
        ],
    )
}

/// Reads a buffer nothing ever wrote: triggers exactly one
/// uninitialized-read warning.
pub fn diag_uninit() -> ProgramSpec {
    let extent = GridBox::d1(0, 64);
    program(
        1,
        1,
        vec![f64_buffer("x", extent, false), f64_buffer("y", extent, false)],
        vec![task(
            "consume",
            extent,
            vec![
                access("x", AccessMode::Read, RangeMapper::OneToOne),
                access("y", AccessMode::Write, RangeMapper::OneToOne),
            ],
            KernelArchetype::Map { coeffs: vec![1.0], offset: 0.0 },
        )],
    )
}

/// Writes through an `all` range mapper on a two-device split: the declared
/// write regions of the chunks overlap, triggering exactly one
/// overlapping-write error.
pub fn diag_overlap() -> ProgramSpec {
    let extent = GridBox::d1(0, 64);
    program(
        1,
        2,
        vec![f64_buffer("z", extent, false)],
        vec![task(
            "broadcast",
            extent,
            vec![access("z", AccessMode::Write, RangeMapper::All)],
            KernelArchetype::Fill { offset: 2.0, index_coeffs: vec![] },
        )],
    )
}

/// A radius-1 stencil declared with a one-to-one read mapper on an interior
/// sub-space: the kernel touches one element beyond the declared region on
/// each side, triggering exactly one out-of-bounds error.
pub fn diag_oob() -> ProgramSpec {
    let extent = GridBox::d1(0, 64);
    let space = GridBox::d1(8, 56);
    program(
        1,
        1,
        vec![f64_buffer("w", extent, true), f64_buffer("o", extent, false)],
        vec![task(
            "stencil",
            space,
            vec![
                access("w", AccessMode::Read, RangeMapper::OneToOne),
                access("o", AccessMode::Write, RangeMapper::OneToOne),
            ],
            KernelArchetype::StencilSum { radius: 1, sum_coeff: 1.0, coeffs: vec![], offset: 0.0 },
        )],
    )
}

/// Small random 1-D programs for dependency-oracle tests: integer buffers,
/// consistent mapper/archetype pairs, no loops.
pub fn random_1d_program(
    rng: &mut impl rand::Rng,
    max_extent: u64,
    max_tasks: usize,
) -> ProgramSpec {
    let num_buffers = rng.gen_range(1..=3);
    let buffers: Vec<BufferDecl> = (0..num_buffers)
        .map(|i| {
            int_buffer(
                &format!("b{i}"),
                GridBox::d1(0, rng.gen_range(4..=max_extent)),
                rng.gen_bool(0.5),
            )
        })
        .collect();
    let mut body = Vec::new();
    let num_tasks = rng.gen_range(1..=max_tasks);
    for t in 0..num_tasks {
        let wb = rng.gen_range(0..num_buffers);
        let w_extent = buffers[wb].extent;
        let hi = w_extent.upper()[0];
        let lo = rng.gen_range(0..hi);
        let space = GridBox::d1(lo, rng.gen_range(lo + 1..=hi));
        let kind = rng.gen_range(0..3);
        let item = match kind {
            0 => task(
                &format!("t{t}_fill"),
                space,
                vec![access(&buffers[wb].name, AccessMode::Write, RangeMapper::OneToOne)],
                KernelArchetype::Fill { offset: t as f64, index_coeffs: vec![1.0] },
            ),
            1 => {
                let rb = rng.gen_range(0..num_buffers);
                task(
                    &format!("t{t}_gather"),
                    space,
                    vec![
                        access(&buffers[rb].name, AccessMode::Read, RangeMapper::All),
                        access(&buffers[wb].name, AccessMode::Write, RangeMapper::OneToOne),
                    ],
                    KernelArchetype::GatherSum {
                        gather_coeff: 1.0,
                        coeffs: vec![],
                        offset: 0.0,
                    },
                )
            }
            _ => {
                let rb = rng.gen_range(0..num_buffers);
                if buffers[rb].extent.contains_box(&space) {
                    task(
                        &format!("t{t}_map"),
                        space,
                        vec![
                            access(&buffers[rb].name, AccessMode::Read, RangeMapper::OneToOne),
                            access(&buffers[wb].name, AccessMode::Write, RangeMapper::OneToOne),
                        ],
                        KernelArchetype::Map { coeffs: vec![2.0], offset: 0.0 },
                    )
                } else {
                    task(
                        &format!("t{t}_fill"),
                        space,
                        vec![access(&buffers[wb].name, AccessMode::Write, RangeMapper::OneToOne)],
                        KernelArchetype::Fill { offset: t as f64, index_coeffs: vec![1.0] },
                    )
                }
            }
        };
        body.push(item);
    }
    program(1, 1, buffers, body)
}
