//! Last-branch-record model: a 32-entry FIFO of retired branches with a
//! per-record prediction flag.
//!
//! Two hardware quirks matter for the attack and are reproduced here.
//! First, protected-context branches are recorded but filtered out when the
//! buffer is read from outside, so a reader only sees its own branches.
//! Second, the prediction flag of an unconditional branch is always reported
//! as "predicted", masking any target mispredict it actually suffered;
//! unconditional branches must therefore be probed through timing instead.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::ir::{BranchKind, VirtualAddress};

pub const LBR_CAPACITY: usize = 32;

/// Which protection domain a branch retired in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LbrContext {
    /// The attacker-controlled context; records are visible to readers.
    Open,
    /// The protected context; records are stored but hidden from readers.
    Protected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LbrRecord {
    pub from: VirtualAddress,
    pub to: VirtualAddress,
    pub kind: BranchKind,
    /// As reported, i.e. already masked for unconditional branches.
    pub predicted: bool,
    pub context: LbrContext,
}

#[derive(Clone, Default)]
pub struct Lbr {
    records: VecDeque<LbrRecord>,
}

impl Lbr {
    pub fn new() -> Lbr {
        Lbr::default()
    }

    /// Records one retired, taken branch. Not-taken branches do not enter
    /// the buffer.
    pub fn record(
        &mut self,
        from: VirtualAddress,
        to: VirtualAddress,
        kind: BranchKind,
        predicted_correctly: bool,
        context: LbrContext,
    ) {
        let predicted = match kind {
            BranchKind::Unconditional => true,
            _ => predicted_correctly,
        };
        if self.records.len() == LBR_CAPACITY {
            self.records.pop_front();
        }
        self.records.push_back(LbrRecord {
            from,
            to,
            kind,
            predicted,
            context,
        });
    }

    /// The buffer as visible to an open-context reader: protected records
    /// are filtered out at read time, oldest first.
    pub fn read(&self) -> Vec<LbrRecord> {
        self.records
            .iter()
            .filter(|r| r.context == LbrContext::Open)
            .copied()
            .collect()
    }

    /// Most recent visible record whose source is `from`.
    pub fn last_from(&self, from: VirtualAddress) -> Option<LbrRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| r.context == LbrContext::Open && r.from == from)
            .copied()
    }

    /// Raw occupancy including hidden records.
    pub fn occupancy(&self) -> usize {
        self.records.len()
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }
}
