//! Receive arbitration: matching inbound pilot messages and bulk transfers
//! to receive / split-receive / await-receive instructions.
//!
//! The arbiter is a pure state machine. Pilots, receive postings and wire
//! completions may arrive in any relative order; the emitted effects (data
//! landings and instruction completions) are the same set for every
//! interleaving, which the executor relies on and tests verify by
//! permutation.

use std::collections::BTreeMap;

use crate::idag::PilotMessage;
use crate::ids::{AllocationId, InstructionId, MessageId, NodeId, TransferId};
use crate::region::{GridBox, Region};

#[derive(Clone, Debug, PartialEq)]
pub enum ArbiterInput {
    /// Out-of-band transfer metadata from a sender.
    Pilot(PilotMessage),
    /// A receive or split-receive instruction was dispatched.
    OpenReceive {
        iid: InstructionId,
        transfer: TransferId,
        dst: AllocationId,
        region: Region,
        /// Split receives complete only through their await-receives'
        /// coverage but still complete themselves at full coverage.
        split: bool,
    },
    /// An await-receive instruction was dispatched.
    OpenAwait { iid: InstructionId, transfer: TransferId, region: Region },
    /// The sender-side bulk transfer finished arriving.
    Wire { sender: NodeId, message: MessageId, transfer: TransferId },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArbiterEffect {
    /// Place the payload of (sender, message) into `dst` at `region`.
    Land { sender: NodeId, message: MessageId, dst: AllocationId, region: GridBox },
    /// A receive-family instruction is complete.
    Complete { iid: InstructionId },
    /// A pilot's region does not fit the posted receive region: the sender
    /// and receiver disagree about the transfer.
    ProtocolError { transfer: TransferId, message: MessageId, region: GridBox },
}

#[derive(Debug, Default)]
struct TransferState {
    pilots: Vec<PilotMessage>,
    wires: Vec<(NodeId, MessageId)>,
    landed: Vec<(NodeId, MessageId)>,
    open: Option<OpenGroup>,
    awaits: Vec<(InstructionId, Region, bool)>,
    covered: Option<Region>,
}

#[derive(Debug)]
struct OpenGroup {
    iid: InstructionId,
    dst: AllocationId,
    region: Region,
    complete: bool,
}

/// Per-node arbiter state over all inbound transfers.
#[derive(Debug, Default)]
pub struct ReceiveArbiter {
    transfers: BTreeMap<TransferId, TransferState>,
}

impl ReceiveArbiter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ingest(&mut self, input: ArbiterInput) -> Vec<ArbiterEffect> {
        let mut effects = Vec::new();
        match input {
            ArbiterInput::Pilot(p) => {
                let st = self.transfers.entry(p.transfer).or_default();
                st.pilots.push(p);
            }
            ArbiterInput::OpenReceive { iid, transfer, dst, region, split } => {
                let st = self.transfers.entry(transfer).or_default();
                debug_assert!(st.open.is_none(), "one receive group per transfer");
                st.open = Some(OpenGroup { iid, dst, region, complete: false });
                let _ = split;
                if st.covered.is_none() {
                    st.covered = Some(Region::empty(
                        st.open.as_ref().unwrap().region.dims(),
                    ));
                }
            }
            ArbiterInput::OpenAwait { iid, transfer, region } => {
                let st = self.transfers.entry(transfer).or_default();
                st.awaits.push((iid, region, false));
            }
            ArbiterInput::Wire { sender, message, transfer } => {
                let st = self.transfers.entry(transfer).or_default();
                st.wires.push((sender, message));
            }
        }
        self.step(&mut effects);
        effects
    }

    /// Fires every landing and completion whose prerequisites are now met.
    fn step(&mut self, effects: &mut Vec<ArbiterEffect>) {
        for (transfer, st) in self.transfers.iter_mut() {
            let Some(open) = st.open.as_mut() else { continue };
            // Land transfers whose pilot and wire data are both present.
            for pilot in &st.pilots {
                let key = (pilot.sender, pilot.message);
                if st.landed.contains(&key) || !st.wires.contains(&key) {
                    continue;
                }
                if !open.region.contains_box(&pilot.region) {
                    if !st.landed.contains(&key) {
                        effects.push(ArbiterEffect::ProtocolError {
                            transfer: *transfer,
                            message: pilot.message,
                            region: pilot.region,
                        });
                        st.landed.push(key);
                    }
                    continue;
                }
                st.landed.push(key);
                effects.push(ArbiterEffect::Land {
                    sender: pilot.sender,
                    message: pilot.message,
                    dst: open.dst,
                    region: pilot.region,
                });
                let covered = st.covered.as_mut().expect("set with open");
                *covered = covered.union(&Region::from_box(pilot.region));
            }
            // Complete instructions whose region is fully covered.
            let covered = st.covered.clone().expect("set with open");
            if !open.complete && covered.contains_region(&open.region) {
                open.complete = true;
                effects.push(ArbiterEffect::Complete { iid: open.iid });
            }
            for (iid, region, done) in st.awaits.iter_mut() {
                if !*done && covered.contains_region(region) {
                    *done = true;
                    effects.push(ArbiterEffect::Complete { iid: *iid });
                }
            }
        }
    }

    /// Pilots that never matched a receive; a non-empty result at shutdown
    /// means sender and receiver disagreed about a transfer.
    pub fn unmatched_pilots(&self) -> Vec<&PilotMessage> {
        self.transfers
            .values()
            .flat_map(|st| {
                st.pilots
                    .iter()
                    .filter(|p| !st.landed.contains(&(p.sender, p.message)))
            })
            .collect()
    }

    /// Receive-family instructions that never completed.
    pub fn incomplete(&self) -> Vec<InstructionId> {
        let mut out = Vec::new();
        for st in self.transfers.values() {
            if let Some(open) = &st.open {
                if !open.complete {
                    out.push(open.iid);
                }
            }
            for (iid, _, done) in &st.awaits {
                if !done {
                    out.push(*iid);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{BufferId, TaskId};

    fn pilot(msg: u64, sender: u32, lo: u64, hi: u64) -> PilotMessage {
        PilotMessage {
            message: MessageId(msg),
            sender: NodeId(sender),
            receiver: NodeId(0),
            transfer: TransferId { task: TaskId(3), buffer: BufferId(0) },
            buffer: BufferId(0),
            region: GridBox::d1(lo, hi),
        }
    }

    fn transfer() -> TransferId {
        TransferId { task: TaskId(3), buffer: BufferId(0) }
    }

    fn completions(effects: &[ArbiterEffect]) -> Vec<InstructionId> {
        effects
            .iter()
            .filter_map(|e| match e {
                ArbiterEffect::Complete { iid } => Some(*iid),
                _ => None,
            })
            .collect()
    }

    /// Case (a): two senders transmit exactly the consumer geometry; each
    /// await-receive completes independently.
    #[test]
    fn consumer_geometry_completes_awaits_independently() {
        let mut arb = ReceiveArbiter::new();
        let mut all = Vec::new();
        all.extend(arb.ingest(ArbiterInput::OpenReceive {
            iid: InstructionId(10),
            transfer: transfer(),
            dst: AllocationId(1),
            region: Region::from_box(GridBox::d1(0, 8)),
            split: true,
        }));
        all.extend(arb.ingest(ArbiterInput::OpenAwait {
            iid: InstructionId(11),
            transfer: transfer(),
            region: Region::from_box(GridBox::d1(0, 4)),
        }));
        all.extend(arb.ingest(ArbiterInput::OpenAwait {
            iid: InstructionId(12),
            transfer: transfer(),
            region: Region::from_box(GridBox::d1(4, 8)),
        }));
        all.extend(arb.ingest(ArbiterInput::Pilot(pilot(0, 1, 0, 4))));
        all.extend(arb.ingest(ArbiterInput::Wire {
            sender: NodeId(1),
            message: MessageId(0),
            transfer: transfer(),
        }));
        // First half landed: only the matching await completes.
        assert_eq!(completions(&all), vec![InstructionId(11)]);
        let rest = arb.ingest(ArbiterInput::Pilot(pilot(1, 2, 4, 8)));
        assert!(completions(&rest).is_empty());
        let rest = arb.ingest(ArbiterInput::Wire {
            sender: NodeId(2),
            message: MessageId(1),
            transfer: transfer(),
        });
        assert_eq!(completions(&rest), vec![InstructionId(10), InstructionId(12)]);
        assert!(arb.incomplete().is_empty());
    }

    /// Case (b): one sender satisfies the whole region at once; both awaits
    /// complete simultaneously.
    #[test]
    fn single_full_region_sender_completes_everything() {
        let mut arb = ReceiveArbiter::new();
        arb.ingest(ArbiterInput::OpenReceive {
            iid: InstructionId(10),
            transfer: transfer(),
            dst: AllocationId(1),
            region: Region::from_box(GridBox::d1(0, 8)),
            split: true,
        });
        arb.ingest(ArbiterInput::OpenAwait {
            iid: InstructionId(11),
            transfer: transfer(),
            region: Region::from_box(GridBox::d1(0, 4)),
        });
        arb.ingest(ArbiterInput::OpenAwait {
            iid: InstructionId(12),
            transfer: transfer(),
            region: Region::from_box(GridBox::d1(4, 8)),
        });
        arb.ingest(ArbiterInput::Pilot(pilot(0, 1, 0, 8)));
        let fx = arb.ingest(ArbiterInput::Wire {
            sender: NodeId(1),
            message: MessageId(0),
            transfer: transfer(),
        });
        let mut done = completions(&fx);
        done.sort();
        assert_eq!(done, vec![InstructionId(10), InstructionId(11), InstructionId(12)]);
    }

    #[test]
    fn pilot_outside_receive_region_is_a_protocol_error() {
        let mut arb = ReceiveArbiter::new();
        arb.ingest(ArbiterInput::OpenReceive {
            iid: InstructionId(10),
            transfer: transfer(),
            dst: AllocationId(1),
            region: Region::from_box(GridBox::d1(0, 8)),
            split: false,
        });
        arb.ingest(ArbiterInput::Pilot(pilot(0, 1, 6, 12)));
        let fx = arb.ingest(ArbiterInput::Wire {
            sender: NodeId(1),
            message: MessageId(0),
            transfer: transfer(),
        });
        assert!(fx.iter().any(|e| matches!(e, ArbiterEffect::ProtocolError { .. })));
    }

    /// Every permutation of event arrival produces the same landings and
    /// completion set, for all three inbound geometries.
    #[test]
    fn arrival_order_does_not_change_outcomes() {
        // Geometries: (a) exact consumer split, (b) one full-region sender,
        // (c) senders orthogonal to the consumer split.
        let geometries: Vec<Vec<PilotMessage>> = vec![
            vec![pilot(0, 1, 0, 4), pilot(1, 2, 4, 8)],
            vec![pilot(0, 1, 0, 8)],
            vec![pilot(0, 1, 0, 3), pilot(1, 2, 3, 8)],
        ];
        for pilots in geometries {
            let mut events: Vec<ArbiterInput> = vec![
                ArbiterInput::OpenReceive {
                    iid: InstructionId(10),
                    transfer: transfer(),
                    dst: AllocationId(1),
                    region: Region::from_box(GridBox::d1(0, 8)),
                    split: true,
                },
                ArbiterInput::OpenAwait {
                    iid: InstructionId(11),
                    transfer: transfer(),
                    region: Region::from_box(GridBox::d1(0, 4)),
                },
                ArbiterInput::OpenAwait {
                    iid: InstructionId(12),
                    transfer: transfer(),
                    region: Region::from_box(GridBox::d1(4, 8)),
                },
            ];
            for p in &pilots {
                events.push(ArbiterInput::Pilot(p.clone()));
                events.push(ArbiterInput::Wire {
                    sender: p.sender,
                    message: p.message,
                    transfer: p.transfer,
                });
            }
            let reference = run_order(&events, &(0..events.len()).collect::<Vec<_>>());
            permute(events.len(), &mut |order| {
                let got = run_order(&events, order);
                assert_eq!(got, reference, "order {order:?} diverged");
            });
        }
    }

    /// Sorted (landings, completions) outcome of one arrival order.
    fn run_order(
        events: &[ArbiterInput],
        order: &[usize],
    ) -> (Vec<(NodeId, MessageId)>, Vec<InstructionId>) {
        let mut arb = ReceiveArbiter::new();
        let mut lands = Vec::new();
        let mut done = Vec::new();
        for &i in order {
            for e in arb.ingest(events[i].clone()) {
                match e {
                    ArbiterEffect::Land { sender, message, .. } => lands.push((sender, message)),
                    ArbiterEffect::Complete { iid } => done.push(iid),
                    ArbiterEffect::ProtocolError { .. } => panic!("unexpected protocol error"),
                }
            }
        }
        assert!(arb.incomplete().is_empty(), "incomplete receives");
        lands.sort();
        done.sort();
        (lands, done)
    }

    fn permute(n: usize, f: &mut impl FnMut(&[usize])) {
        let mut idx: Vec<usize> = (0..n).collect();
        heap_permute(&mut idx, n, f);
    }

    fn heap_permute(idx: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k <= 1 {
            f(idx);
            return;
        }
        for i in 0..k {
            heap_permute(idx, k - 1, f);
            if k % 2 == 0 {
                idx.swap(i, k - 1);
            } else {
                idx.swap(0, k - 1);
            }
        }
    }
}
