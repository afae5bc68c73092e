//! The shared branch-prediction microarchitecture: BTB with partial tags,
//! direction prediction (BTB-presence rule or gshare), the 32-entry LBR,
//! and the measured timing channels.
//!
//! Address handling follows two principles measured on real hardware: the
//! set index depends only on the low 16 address bits, and tags (and target
//! comparisons) use bits below bit 31 only. Two branches whose addresses
//! agree in the lower 31 bits therefore share a BTB entry, which is exactly
//! the aliasing a shadowing attacker exploits.

mod btb;
mod lbr;
mod timing;

pub use btb::{Btb, BtbConfig};
pub use lbr::{Lbr, LbrContext, LbrRecord, LBR_CAPACITY};
pub use timing::{default_params, Channel, ChannelParams, TimingModel};

use serde::{Deserialize, Serialize};

use crate::ir::{BranchKind, VirtualAddress, STRIDE};

/// Mask selecting the address bits that participate in prediction.
pub const ALIAS_MASK: u64 = (1 << 31) - 1;

/// True when two addresses share a BTB entry (equal lower 31 bits is
/// sufficient; equality of index and tag is what is actually required).
pub fn aliases(a: VirtualAddress, b: VirtualAddress) -> bool {
    btb::BtbConfig::default().index(a) == btb::BtbConfig::default().index(b)
        && btb::BtbConfig::default().tag(a) == btb::BtbConfig::default().tag(b)
}

/// Direction predictor selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorMode {
    /// Conditional direction comes from BTB presence: hit predicts taken,
    /// miss predicts not-taken (the static rule).
    BtbOnly,
    /// Conditional direction comes from a gshare predictor; targets still
    /// come from the BTB.
    Gshare,
}

/// gshare history length in bits.
pub const GSHARE_HISTORY_BITS: u32 = 16;
const PHT_SIZE: usize = 1 << GSHARE_HISTORY_BITS;

/// Two-bit-counter direction predictor state (used in gshare mode only).
#[derive(Clone)]
pub struct DirectionPredictor {
    history: u16,
    pht: Vec<u8>,
}

impl Default for DirectionPredictor {
    fn default() -> Self {
        DirectionPredictor {
            history: 0,
            pht: vec![1; PHT_SIZE],
        }
    }
}

impl DirectionPredictor {
    fn index(&self, addr: VirtualAddress) -> usize {
        let pc_bits = (addr.0 / STRIDE) as u16;
        (pc_bits ^ self.history) as usize
    }

    pub fn predict(&self, addr: VirtualAddress) -> bool {
        self.pht[self.index(addr)] >= 2
    }

    pub fn counter(&self, addr: VirtualAddress) -> u8 {
        self.pht[self.index(addr)]
    }

    pub fn train(&mut self, addr: VirtualAddress, taken: bool) {
        let idx = self.index(addr);
        let c = &mut self.pht[idx];
        if taken {
            *c = (*c + 1).min(3);
        } else {
            *c = c.saturating_sub(1);
        }
        self.history = (self.history << 1) | u16::from(taken);
    }

    pub fn flush(&mut self) {
        self.history = 0;
        self.pht.iter_mut().for_each(|c| *c = 1);
    }
}

/// What the front end guessed for one branch instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictionResult {
    pub predicted_taken: bool,
    /// Predicted destination; `None` means "fall through".
    pub predicted_target: Option<VirtualAddress>,
    pub correct: bool,
    pub mispredict: MispredictKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MispredictKind {
    None,
    Direction,
    Target,
}

/// Misprediction penalty in cycles. The pipeline itself is not modeled;
/// this scalar is its entire cost signature.
pub const DEFAULT_MISPREDICT_PENALTY: u64 = 20;

/// The complete predictor state one simulation mutates.
#[derive(Clone)]
pub struct Uarch {
    pub btb: Btb,
    pub direction: DirectionPredictor,
    pub mode: PredictorMode,
    pub mispredict_penalty: u64,
}

impl Uarch {
    pub fn new(mode: PredictorMode) -> Uarch {
        Uarch {
            btb: Btb::new(BtbConfig::default()),
            direction: DirectionPredictor::default(),
            mode,
            mispredict_penalty: DEFAULT_MISPREDICT_PENALTY,
        }
    }

    /// Front-end prediction for a branch at `addr`.
    ///
    /// BTB-only mode: a conditional predicts taken (to the stored target)
    /// exactly on a BTB hit; an unconditional predicts taken, to the stored
    /// target on hit or its static target otherwise; an indirect predicts
    /// the stored target on hit and the next instruction otherwise.
    pub fn predict(
        &mut self,
        kind: BranchKind,
        addr: VirtualAddress,
        static_target: Option<VirtualAddress>,
    ) -> (bool, Option<VirtualAddress>) {
        let stored = self.btb.lookup(addr);
        let fall = VirtualAddress(addr.0 + STRIDE);
        match kind {
            BranchKind::Conditional => {
                let taken = match self.mode {
                    PredictorMode::BtbOnly => stored.is_some(),
                    PredictorMode::Gshare => self.direction.predict(addr),
                };
                if taken {
                    (true, stored.or(static_target))
                } else {
                    (false, None)
                }
            }
            BranchKind::Unconditional => (true, stored.or(static_target)),
            BranchKind::Indirect => (true, Some(stored.unwrap_or(fall))),
        }
    }

    /// Resolves a prediction against the actual outcome, trains the
    /// predictor state, and returns the filled-in result plus the cycle
    /// penalty (0 when correct).
    pub fn resolve(
        &mut self,
        kind: BranchKind,
        addr: VirtualAddress,
        predicted: (bool, Option<VirtualAddress>),
        actual_taken: bool,
        actual_target: VirtualAddress,
    ) -> (PredictionResult, u64) {
        let (predicted_taken, predicted_target) = predicted;
        let fall = VirtualAddress(addr.0 + STRIDE);
        let mispredict = if predicted_taken != actual_taken {
            MispredictKind::Direction
        } else if actual_taken {
            let predicted_dest = predicted_target.unwrap_or(fall);
            if predicted_dest.0 & ALIAS_MASK != actual_target.0 & ALIAS_MASK {
                MispredictKind::Target
            } else {
                MispredictKind::None
            }
        } else {
            MispredictKind::None
        };
        let correct = mispredict == MispredictKind::None;

        // Training: taken branches (re)install their target; a not-taken
        // conditional deletes its stale entry.
        if actual_taken {
            self.btb.insert(addr, actual_target);
        } else if kind == BranchKind::Conditional {
            self.btb.invalidate(addr);
        }
        if self.mode == PredictorMode::Gshare && kind == BranchKind::Conditional {
            self.direction.train(addr, actual_taken);
        }

        let penalty = if correct { 0 } else { self.mispredict_penalty };
        (
            PredictionResult {
                predicted_taken,
                predicted_target,
                correct,
                mispredict,
            },
            penalty,
        )
    }

    /// Clears all branch state: BTB entries invalid, gshare history zero,
    /// counters weakly-not-taken. Idempotent.
    pub fn flush(&mut self) {
        self.btb.flush();
        self.direction.flush();
    }
}
