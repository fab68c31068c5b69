//! Sequential reference interpreter.
//!
//! Executes the unrolled task sequence one task at a time on full buffers,
//! ignoring the cluster topology entirely. The simulated distributed
//! execution must reproduce these buffer contents for any topology, split,
//! lookahead mode and timing.

use crate::interp::{execute_kernel, host_init_value, DebugElem, KernelCtx, ValueVec};
use crate::program::{ElemType, ProgramError, ProgramSpec, TaskSpec};
use crate::region::GridBox;

/// Final buffer images, indexed like `ProgramSpec::buffers`, row-major over
/// each buffer's extent.
pub struct SequentialResult {
    pub buffers: Vec<ValueVec>,
}

impl SequentialResult {
    pub fn buffer(&self, program: &ProgramSpec, name: &str) -> Option<&ValueVec> {
        program.buffer_id(name).map(|id| &self.buffers[id.0 as usize])
    }
}

/// Initial image of one buffer (host-initialized pattern or zeros).
pub fn initial_contents(program: &ProgramSpec, index: u32) -> ValueVec {
    let decl = &program.buffers[index as usize];
    let n = decl.extent.volume() as usize;
    if !decl.host_initialized {
        return ValueVec::zeros(decl.element_type, n);
    }
    match decl.element_type {
        ElemType::Int => {
            let mut v = vec![0i64; n];
            for p in decl.extent.iter_points() {
                v[decl.extent.linear_index(p)] = host_init_value(index, p);
            }
            ValueVec::Int(v)
        }
        ElemType::F64 => {
            let mut v = vec![0f64; n];
            for p in decl.extent.iter_points() {
                v[decl.extent.linear_index(p)] = host_init_value(index, p) as f64;
            }
            ValueVec::F64(v)
        }
    }
}

pub fn run_sequential(program: &ProgramSpec) -> Result<SequentialResult, ProgramError> {
    let mut buffers: Vec<ValueVec> =
        (0..program.buffers.len()).map(|i| initial_contents(program, i as u32)).collect();
    for task in program.unroll() {
        run_task(program, &task, &mut buffers)?;
    }
    Ok(SequentialResult { buffers })
}

fn run_task(
    program: &ProgramSpec,
    task: &TaskSpec,
    buffers: &mut [ValueVec],
) -> Result<(), ProgramError> {
    let mut read_ids = Vec::new();
    let mut read_extents = Vec::new();
    for (_, a) in task.reads() {
        let id = program.buffer_id(&a.buffer).expect("validated");
        read_ids.push(id.0 as usize);
        read_extents.push(program.buffer(id).extent);
    }
    let write_access = task.write_access();
    let write_id = program.buffer_id(&write_access.buffer).expect("validated").0 as usize;
    let write_extent = program.buffers[write_id].extent;

    let gather = crate::interp::gather_region_of(task, |name| {
        program.buffer(program.buffer_id(name).expect("validated")).extent
    })?;
    let ctx = KernelCtx {
        kernel: &task.kernel,
        chunk: task.index_space,
        read0_extent: read_extents.first().copied(),
        gather_region: gather.as_ref(),
    };

    // Writes are staged so every read observes pre-task state.
    match program.buffers[write_id].element_type {
        ElemType::Int => {
            let staged =
                eval_staged::<i64>(&ctx, buffers, &read_ids, &read_extents, write_extent);
            let ValueVec::Int(out) = &mut buffers[write_id] else { unreachable!() };
            for (i, v) in staged {
                out[i] = v;
            }
        }
        ElemType::F64 => {
            let staged =
                eval_staged::<f64>(&ctx, buffers, &read_ids, &read_extents, write_extent);
            let ValueVec::F64(out) = &mut buffers[write_id] else { unreachable!() };
            for (i, v) in staged {
                out[i] = v;
            }
        }
    }
    Ok(())
}

fn eval_staged<E: DebugElem + ReadFrom>(
    ctx: &KernelCtx<'_>,
    buffers: &[ValueVec],
    read_ids: &[usize],
    read_extents: &[GridBox],
    write_extent: GridBox,
) -> Vec<(usize, E)> {
    let mut staged = Vec::new();
    execute_kernel::<E>(
        ctx,
        |slot, p| E::read_from(&buffers[read_ids[slot]], read_extents[slot].linear_index(p)),
        |p, v| {
            if write_extent.contains_point(p) {
                staged.push((write_extent.linear_index(p), v));
            }
        },
    );
    staged
}

trait ReadFrom: Sized {
    fn read_from(v: &ValueVec, idx: usize) -> Self;
}

impl ReadFrom for i64 {
    fn read_from(v: &ValueVec, idx: usize) -> Self {
        match v {
            ValueVec::Int(x) => x[idx],
            ValueVec::F64(_) => panic!("read of float buffer from integer kernel"),
        }
    }
}

impl ReadFrom for f64 {
    fn read_from(v: &ValueVec, idx: usize) -> Self {
        match v {
            ValueVec::F64(x) => x[idx],
            ValueVec::Int(_) => panic!("read of integer buffer from float kernel"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{
        AccessDecl, AccessMode, BodyItem, BufferDecl, KernelArchetype, RangeMapper, TaskTarget,
    };
    use crate::region::Region;

    fn one_buffer_program(kernel: KernelArchetype, accesses: Vec<AccessDecl>) -> ProgramSpec {
        ProgramSpec {
            cluster: Default::default(),
            buffers: vec![
                BufferDecl {
                    name: "a".into(),
                    extent: GridBox::d1(0, 8),
                    element_bytes: 8,
                    host_initialized: true,
                    element_type: ElemType::Int,
                },
                BufferDecl {
                    name: "out".into(),
                    extent: GridBox::d1(0, 8),
                    element_bytes: 8,
                    host_initialized: false,
                    element_type: ElemType::Int,
                },
            ],
            body: vec![BodyItem::Task(TaskSpec {
                name: "t".into(),
                index_space: GridBox::d1(0, 8),
                accesses,
                kernel,
                target: TaskTarget::Device,
            })],
        }
    }

    #[test]
    fn map_doubles_initial_values() {
        let p = one_buffer_program(
            KernelArchetype::Map { coeffs: vec![2.0], offset: 1.0 },
            vec![
                AccessDecl {
                    buffer: "a".into(),
                    mode: AccessMode::Read,
                    mapper: RangeMapper::OneToOne,
                },
                AccessDecl {
                    buffer: "out".into(),
                    mode: AccessMode::Write,
                    mapper: RangeMapper::OneToOne,
                },
            ],
        );
        p.validate().unwrap();
        let r = run_sequential(&p).unwrap();
        let ValueVec::Int(out) = r.buffer(&p, "out").unwrap() else { panic!() };
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, 2 * host_init_value(0, [i as u64, 0, 0]) + 1);
        }
    }

    #[test]
    fn gather_sum_is_chunk_invariant_total() {
        let p = one_buffer_program(
            KernelArchetype::GatherSum { gather_coeff: 1.0, coeffs: vec![], offset: 0.0 },
            vec![
                AccessDecl { buffer: "a".into(), mode: AccessMode::Read, mapper: RangeMapper::All },
                AccessDecl {
                    buffer: "out".into(),
                    mode: AccessMode::Write,
                    mapper: RangeMapper::OneToOne,
                },
            ],
        );
        p.validate().unwrap();
        let r = run_sequential(&p).unwrap();
        let expected: i64 = (0..8).map(|i| host_init_value(0, [i, 0, 0])).sum();
        let ValueVec::Int(out) = r.buffer(&p, "out").unwrap() else { panic!() };
        assert!(out.iter().all(|v| *v == expected));
    }

    #[test]
    fn stencil_sums_clamped_neighborhood() {
        let p = one_buffer_program(
            KernelArchetype::StencilSum { radius: 1, sum_coeff: 1.0, coeffs: vec![], offset: 0.0 },
            vec![
                AccessDecl {
                    buffer: "a".into(),
                    mode: AccessMode::Read,
                    mapper: RangeMapper::Neighborhood { border: vec![1] },
                },
                AccessDecl {
                    buffer: "out".into(),
                    mode: AccessMode::Write,
                    mapper: RangeMapper::OneToOne,
                },
            ],
        );
        p.validate().unwrap();
        let r = run_sequential(&p).unwrap();
        let at = |i: u64| host_init_value(0, [i, 0, 0]);
        let ValueVec::Int(out) = r.buffer(&p, "out").unwrap() else { panic!() };
        assert_eq!(out[0], at(0) + at(1));
        assert_eq!(out[3], at(2) + at(3) + at(4));
        assert_eq!(out[7], at(6) + at(7));
    }

    #[test]
    fn read_write_sees_pre_task_state() {
        // out[i] = a[i] + rev[i] where rev reads the buffer being written:
        // a map task whose write target is also one of its reads.
        let p = ProgramSpec {
            cluster: Default::default(),
            buffers: vec![BufferDecl {
                name: "a".into(),
                extent: GridBox::d1(0, 4),
                element_bytes: 8,
                host_initialized: true,
                element_type: ElemType::Int,
            }],
            body: vec![BodyItem::Task(TaskSpec {
                name: "t".into(),
                index_space: GridBox::d1(0, 4),
                accesses: vec![AccessDecl {
                    buffer: "a".into(),
                    mode: AccessMode::ReadWrite,
                    mapper: RangeMapper::OneToOne,
                }],
                kernel: KernelArchetype::Map { coeffs: vec![3.0], offset: 0.0 },
                target: TaskTarget::Device,
            })],
        };
        p.validate().unwrap();
        let r = run_sequential(&p).unwrap();
        let ValueVec::Int(out) = r.buffer(&p, "a").unwrap() else { panic!() };
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, 3 * host_init_value(0, [i as u64, 0, 0]));
        }
    }

    #[test]
    fn fixed_region_gather() {
        let mut p = one_buffer_program(
            KernelArchetype::GatherSum { gather_coeff: 1.0, coeffs: vec![], offset: 5.0 },
            vec![
                AccessDecl {
                    buffer: "a".into(),
                    mode: AccessMode::Read,
                    mapper: RangeMapper::Fixed {
                        region: Region::from_box(GridBox::d1(2, 5)),
                    },
                },
                AccessDecl {
                    buffer: "out".into(),
                    mode: AccessMode::Write,
                    mapper: RangeMapper::OneToOne,
                },
            ],
        );
        p.validate().unwrap();
        let r = run_sequential(&p).unwrap();
        let expected: i64 = (2..5).map(|i| host_init_value(0, [i, 0, 0])).sum::<i64>() + 5;
        let ValueVec::Int(out) = r.buffer(&mut p, "out").unwrap() else { panic!() };
        assert!(out.iter().all(|v| *v == expected));
    }
}
