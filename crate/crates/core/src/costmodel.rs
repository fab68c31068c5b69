//! Configurable cost model for the discrete-event simulation. All constants
//! are nanoseconds (or nanoseconds per element/byte); timing never affects
//! computed buffer contents, only the trace.

use serde::{Deserialize, Serialize};

use crate::ids::MemoryId;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub kernel_base_ns: u64,
    pub kernel_per_element_ns: f64,
    pub host_task_base_ns: u64,
    pub host_task_per_element_ns: f64,
    pub copy_base_ns: u64,
    pub copy_per_byte_h2h_ns: f64,
    pub copy_per_byte_h2d_ns: f64,
    pub copy_per_byte_d2h_ns: f64,
    pub copy_per_byte_d2d_ns: f64,
    pub alloc_ns: u64,
    pub free_ns: u64,
    pub epoch_ns: u64,
    pub horizon_ns: u64,
    pub send_latency_ns: u64,
    pub send_per_byte_ns: f64,
    /// Scheduler-stage costs, used to timestamp when graph generation makes
    /// each instruction available to the executor.
    pub sched_task_ns: u64,
    pub sched_command_ns: u64,
    pub sched_instruction_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            kernel_base_ns: 2_000,
            kernel_per_element_ns: 1.0,
            host_task_base_ns: 5_000,
            host_task_per_element_ns: 4.0,
            copy_base_ns: 800,
            copy_per_byte_h2h_ns: 0.02,
            copy_per_byte_h2d_ns: 0.08,
            copy_per_byte_d2h_ns: 0.08,
            copy_per_byte_d2d_ns: 0.04,
            alloc_ns: 4_000,
            free_ns: 1_500,
            epoch_ns: 300,
            horizon_ns: 200,
            send_latency_ns: 3_000,
            send_per_byte_ns: 0.25,
            sched_task_ns: 400,
            sched_command_ns: 200,
            sched_instruction_ns: 120,
        }
    }
}

impl CostModel {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn kernel_cost(&self, elements: u64) -> u64 {
        self.kernel_base_ns + (elements as f64 * self.kernel_per_element_ns) as u64
    }

    pub fn host_task_cost(&self, elements: u64) -> u64 {
        self.host_task_base_ns + (elements as f64 * self.host_task_per_element_ns) as u64
    }

    pub fn copy_cost(&self, src: MemoryId, dst: MemoryId, bytes: u64) -> u64 {
        let per_byte = match (src.is_device(), dst.is_device()) {
            (false, false) => self.copy_per_byte_h2h_ns,
            (false, true) => self.copy_per_byte_h2d_ns,
            (true, false) => self.copy_per_byte_d2h_ns,
            (true, true) => self.copy_per_byte_d2d_ns,
        };
        self.copy_base_ns + (bytes as f64 * per_byte) as u64
    }

    pub fn send_cost(&self, bytes: u64) -> u64 {
        self.send_latency_ns + (bytes as f64 * self.send_per_byte_ns) as u64
    }

    /// Random non-negative constants; used to verify that timing never
    /// changes results.
    pub fn randomized(rng: &mut impl rand::Rng) -> Self {
        Self {
            kernel_base_ns: rng.gen_range(0..10_000),
            kernel_per_element_ns: rng.gen_range(0.0..8.0),
            host_task_base_ns: rng.gen_range(0..10_000),
            host_task_per_element_ns: rng.gen_range(0.0..8.0),
            copy_base_ns: rng.gen_range(0..5_000),
            copy_per_byte_h2h_ns: rng.gen_range(0.0..1.0),
            copy_per_byte_h2d_ns: rng.gen_range(0.0..1.0),
            copy_per_byte_d2h_ns: rng.gen_range(0.0..1.0),
            copy_per_byte_d2d_ns: rng.gen_range(0.0..1.0),
            alloc_ns: rng.gen_range(0..20_000),
            free_ns: rng.gen_range(0..5_000),
            epoch_ns: rng.gen_range(0..2_000),
            horizon_ns: rng.gen_range(0..2_000),
            send_latency_ns: rng.gen_range(0..20_000),
            send_per_byte_ns: rng.gen_range(0.0..2.0),
            sched_task_ns: rng.gen_range(0..2_000),
            sched_command_ns: rng.gen_range(0..2_000),
            sched_instruction_ns: rng.gen_range(0..2_000),
        }
    }
}
