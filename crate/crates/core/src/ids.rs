//! Newtype ids shared by all three graph tiers.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident($inner:ty), $prefix:literal) => {
        $(#[$doc])*
        #[derive(
            Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(self, f)
            }
        }
    };
}

id_type!(
    /// Task graph node id; monotonically increasing in submission order.
    TaskId(u64),
    "T"
);
id_type!(
    /// Command graph node id; node-local, monotonically increasing.
    CommandId(u64),
    "C"
);
id_type!(
    /// Instruction graph node id; node-local, monotonically increasing.
    InstructionId(u64),
    "I"
);
id_type!(
    /// Cluster node (MPI rank equivalent).
    NodeId(u32),
    "N"
);
id_type!(
    /// Device local to one node.
    DeviceId(u32),
    "D"
);
id_type!(
    /// Index into the program's buffer declaration list.
    BufferId(u32),
    "B"
);
id_type!(
    /// Backing or scratch allocation id; node-local.
    AllocationId(u64),
    "A"
);
id_type!(
    /// Node-locally unique id tagging one send and its pilot message.
    MessageId(u64),
    "MSG"
);

/// Memory space id: `M0` is user-controlled host memory, `M1` is the
/// staging (DMA-capable) host memory, `M2` and up are device memories.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemoryId(pub u8);

impl MemoryId {
    pub const USER: MemoryId = MemoryId(0);
    pub const STAGING: MemoryId = MemoryId(1);

    pub fn device(d: DeviceId) -> MemoryId {
        MemoryId(2 + d.0 as u8)
    }

    pub fn is_device(&self) -> bool {
        self.0 >= 2
    }

    /// The device whose native memory this is, if any.
    pub fn as_device(&self) -> Option<DeviceId> {
        self.is_device().then(|| DeviceId(self.0 as u32 - 2))
    }
}

impl fmt::Display for MemoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.0)
    }
}

impl fmt::Debug for MemoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Identifies one task-and-buffer data exchange. All pushes and await-pushes
/// belonging to the same exchange share it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransferId {
    pub task: TaskId,
    pub buffer: BufferId,
}

impl fmt::Display for TransferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TR{}.{}", self.task.0, self.buffer.0)
    }
}

impl fmt::Debug for TransferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}
