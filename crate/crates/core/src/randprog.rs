//! Seeded random program generation for oracle-equivalence testing.
//!
//! Generated programs are diagnostic-clean by construction: reads only touch
//! host-initialized or fully written buffers, writes are one-to-one, and
//! every archetype matches its declared range mappers. Buffer volumes are
//! capped so interpreted runs stay fast; extents per dimension still range
//! up to the configured maximum.

use rand::Rng;

use crate::program::{
    AccessDecl, AccessMode, BodyItem, BufferDecl, ClusterTopology, ElemType, KernelArchetype,
    ProgramSpec, RangeMapper, TaskSpec, TaskTarget,
};
use crate::region::{Coord, GridBox, Region};

#[derive(Clone, Debug)]
pub struct RandProgConfig {
    pub max_buffers: usize,
    pub max_tasks: usize,
    pub max_extent: Coord,
    pub max_volume: u64,
    pub max_nodes: u32,
    pub max_devices: u32,
}

impl Default for RandProgConfig {
    fn default() -> Self {
        Self {
            max_buffers: 3,
            max_tasks: 12,
            max_extent: 256,
            max_volume: 4096,
            max_nodes: 4,
            max_devices: 4,
        }
    }
}

fn random_extent(rng: &mut impl Rng, cfg: &RandProgConfig) -> GridBox {
    let dims = rng.gen_range(1..=3usize);
    loop {
        let sizes: Vec<Coord> =
            (0..dims).map(|_| rng.gen_range(1..=cfg.max_extent)).collect();
        let volume: u64 = sizes.iter().product();
        if volume <= cfg.max_volume {
            let min = vec![0; dims];
            return GridBox::new(dims, &min, &sizes);
        }
    }
}

fn sub_box(rng: &mut impl Rng, extent: &GridBox) -> GridBox {
    if rng.gen_bool(0.7) {
        return *extent;
    }
    let dims = extent.dims();
    let mut lo = Vec::with_capacity(dims);
    let mut hi = Vec::with_capacity(dims);
    for d in 0..dims {
        let a = rng.gen_range(extent.lower()[d]..extent.upper()[d]);
        let b = rng.gen_range(a + 1..=extent.upper()[d]);
        lo.push(a);
        hi.push(b);
    }
    GridBox::new(dims, &lo, &hi)
}

/// Generates one random program. The cluster topology is randomized within
/// the configured limits (callers may still override it per run).
pub fn random_program(rng: &mut impl Rng, cfg: &RandProgConfig) -> ProgramSpec {
    let num_buffers = rng.gen_range(1..=cfg.max_buffers);
    let buffers: Vec<BufferDecl> = (0..num_buffers)
        .map(|i| {
            let element_type = if rng.gen_bool(0.5) { ElemType::Int } else { ElemType::F64 };
            BufferDecl {
                name: format!("b{i}"),
                extent: random_extent(rng, cfg),
                element_bytes: *[4u64, 8, 16, 24].get(rng.gen_range(0..4)).unwrap(),
                host_initialized: rng.gen_bool(0.5),
                element_type,
            }
        })
        .collect();
    // Fully-written-or-initialized state per buffer.
    let mut readable: Vec<bool> = buffers.iter().map(|b| b.host_initialized).collect();
    let mut written: Vec<Region> = buffers
        .iter()
        .map(|b| {
            if b.host_initialized {
                Region::from_box(b.extent)
            } else {
                Region::empty(b.extent.dims())
            }
        })
        .collect();

    let num_tasks = rng.gen_range(1..=cfg.max_tasks);
    let mut tasks: Vec<TaskSpec> = Vec::new();
    for t in 0..num_tasks {
        let wb = rng.gen_range(0..num_buffers);
        let w_extent = buffers[wb].extent;
        let ty = buffers[wb].element_type;
        let space = sub_box(rng, &w_extent);
        let dims = space.dims();

        // Candidate read buffers: fully written or host-initialized, same
        // element type.
        let same_dims: Vec<usize> = (0..num_buffers)
            .filter(|i| {
                readable[*i]
                    && buffers[*i].element_type == ty
                    && buffers[*i].extent.dims() == dims
                    && buffers[*i].extent.contains_box(&space)
            })
            .collect();
        let any_readable: Vec<usize> = (0..num_buffers)
            .filter(|i| readable[*i] && buffers[*i].element_type == ty)
            .collect();

        let coeff = |rng: &mut dyn rand::RngCore, ty: ElemType| -> f64 {
            match ty {
                ElemType::Int => [1.0, 2.0, -1.0, 3.0][rng.gen_range(0..4)] as f64,
                ElemType::F64 => [0.5, 1.25, -0.75, 2.0][rng.gen_range(0..4)],
            }
        };

        let mut accesses = Vec::new();
        let kernel;
        let kind = rng.gen_range(0..4);
        match kind {
            1 if !same_dims.is_empty() => {
                // Element-wise map over one or two inputs.
                let n_reads = if same_dims.len() > 1 && rng.gen_bool(0.4) { 2 } else { 1 };
                let mut coeffs = Vec::new();
                for k in 0..n_reads {
                    let rb = same_dims[(t + k) % same_dims.len()];
                    accesses.push(AccessDecl {
                        buffer: buffers[rb].name.clone(),
                        mode: AccessMode::Read,
                        mapper: RangeMapper::OneToOne,
                    });
                    coeffs.push(coeff(rng, ty));
                }
                kernel = KernelArchetype::Map { coeffs, offset: coeff(rng, ty) };
            }
            2 if !same_dims.is_empty() => {
                let rb = same_dims[t % same_dims.len()];
                let radius = rng.gen_range(1..=2u64);
                accesses.push(AccessDecl {
                    buffer: buffers[rb].name.clone(),
                    mode: AccessMode::Read,
                    mapper: RangeMapper::Neighborhood { border: vec![radius; dims] },
                });
                let sum_coeff = match ty {
                    ElemType::Int => 1.0,
                    ElemType::F64 => 0.05,
                };
                kernel = KernelArchetype::StencilSum {
                    radius,
                    sum_coeff,
                    coeffs: vec![],
                    offset: coeff(rng, ty),
                };
            }
            3 if !any_readable.is_empty() => {
                let rb = any_readable[t % any_readable.len()];
                let mapper = if rng.gen_bool(0.7) {
                    RangeMapper::All
                } else {
                    RangeMapper::Fixed {
                        region: Region::from_box(sub_box(rng, &buffers[rb].extent)),
                    }
                };
                accesses.push(AccessDecl {
                    buffer: buffers[rb].name.clone(),
                    mode: AccessMode::Read,
                    mapper,
                });
                let gather_coeff = match ty {
                    ElemType::Int => 1.0,
                    ElemType::F64 => 1.0 / cfg.max_volume as f64,
                };
                kernel = KernelArchetype::GatherSum {
                    gather_coeff,
                    coeffs: vec![],
                    offset: coeff(rng, ty),
                };
            }
            _ => {
                let coeffs: Vec<f64> =
                    (0..dims).map(|_| coeff(rng, ty)).collect();
                kernel = KernelArchetype::Fill { offset: t as f64 + 1.0, index_coeffs: coeffs };
            }
        }
        accesses.push(AccessDecl {
            buffer: buffers[wb].name.clone(),
            mode: AccessMode::Write,
            mapper: RangeMapper::OneToOne,
        });
        let target =
            if rng.gen_bool(0.15) { TaskTarget::Host } else { TaskTarget::Device };
        tasks.push(TaskSpec {
            name: format!("t{t}"),
            index_space: space,
            accesses,
            kernel,
            target,
        });
        written[wb] = written[wb].union(&Region::from_box(space));
        if written[wb].contains_box(&buffers[wb].extent) {
            readable[wb] = true;
        }
    }

    // Occasionally wrap a suffix in a loop, keeping the unrolled length
    // within the task budget.
    let mut body: Vec<BodyItem> = tasks.into_iter().map(BodyItem::Task).collect();
    if body.len() >= 2 && rng.gen_bool(0.4) {
        let tail_max = (cfg.max_tasks - body.len()).min(body.len() / 2);
        if tail_max >= 1 {
            let tail = rng.gen_range(1..=tail_max);
            let looped: Vec<BodyItem> = body.split_off(body.len() - tail);
            body.push(BodyItem::Loop { count: 2, body: looped });
        }
    }

    let cluster = ClusterTopology {
        nodes: rng.gen_range(1..=cfg.max_nodes),
        devices_per_node: rng.gen_range(1..=cfg.max_devices),
        d2d_copy: rng.gen_bool(0.5),
    };
    let p = ProgramSpec { cluster, buffers, body };
    p.validate().expect("generated programs are valid");
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::SchedulerChecks;
    use crate::tdag::TaskKind;
    use rand::SeedableRng;

    #[test]
    fn generated_programs_are_diagnostic_clean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let cfg = RandProgConfig::default();
        for round in 0..50 {
            let p = random_program(&mut rng, &cfg);
            let tasks = crate::tdag::build_tdag(&p, Some(2)).unwrap();
            let mut checks = SchedulerChecks::new(&p, true);
            for t in &tasks {
                if let TaskKind::Kernel { spec } | TaskKind::HostTask { spec } = &t.kind {
                    checks
                        .on_task(&p, p.cluster.nodes, p.cluster.devices_per_node, t.tid, spec)
                        .unwrap();
                }
            }
            assert!(
                checks.diagnostics.is_empty(),
                "round {round}: {:?}",
                checks.diagnostics
            );
        }
    }
}
