//! Shadow-code synthesis: small programs placed exactly 2^31 bytes above
//! the victim branch they probe, so both map to the same BTB entry.

use std::collections::BTreeMap;

use thiserror::Error;

use super::ProbeKind;
use crate::ir::{BranchKind, Expr, Instruction, Operand, Program, Reg, VirtualAddress, STRIDE};
use crate::uarch::Uarch;

/// Displacement between a victim branch and its shadow: addresses equal in
/// the lower 31 bits collide in the predictor.
pub const SHADOW_OFFSET: u64 = 1 << 31;

/// The victim branch a shadow is built against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchDescriptor {
    pub addr: VirtualAddress,
    pub kind: BranchKind,
    /// Taken target for direct branches; `None` for indirect ones.
    pub target: Option<VirtualAddress>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ShadowError {
    #[error("branch kind {kind:?} does not support probe kind {probe:?}")]
    KindMismatch { kind: BranchKind, probe: ProbeKind },
    #[error("direct branch descriptor at {0} is missing its target")]
    MissingTarget(VirtualAddress),
    #[error(
        "shadow layout conflict: target slot {target} collides with the probe scaffold at {at}"
    )]
    LayoutConflict {
        at: VirtualAddress,
        target: VirtualAddress,
    },
    #[error("internal: shadow assembly failed: {0}")]
    Assembly(String),
}

/// An assembled probe: a shadow program whose probe branch sits at
/// `victim_branch + 2^31`.
#[derive(Clone, Debug)]
pub struct ShadowProbe {
    pub kind: ProbeKind,
    pub target: BranchDescriptor,
    pub shadow: Program,
    /// Address of the probe branch inside the shadow image.
    pub shadow_branch: VirtualAddress,
    pub entry: VirtualAddress,
}

impl ShadowProbe {
    /// True when the shadow image overlaps another image's address range.
    pub fn overlaps(&self, other: &Program) -> bool {
        self.shadow.base() < other.end() && other.base() < self.shadow.end()
    }
}

/// Builds a dense shadow image covering the victim-space slots `lo..=hi`
/// (shifted by the aliasing offset), with `slots` overriding individual
/// positions and `compute 1` filling the rest.
fn build_image(
    lo: VirtualAddress,
    hi: VirtualAddress,
    slots: &[(VirtualAddress, Instruction)],
) -> Result<Program, ShadowError> {
    debug_assert!(lo <= hi);
    let n = ((hi.0 - lo.0) / STRIDE + 1) as usize;
    let mut instructions = vec![Instruction::Compute { cost: 1 }; n];
    for (addr, instr) in slots {
        let idx = ((addr.0 - lo.0) / STRIDE) as usize;
        instructions[idx] = instr.clone();
    }
    let base = VirtualAddress(lo.0 + SHADOW_OFFSET);
    Program::new(base, instructions, BTreeMap::new())
        .map_err(|e| ShadowError::Assembly(e.to_string()))
}

fn shifted(a: VirtualAddress) -> VirtualAddress {
    VirtualAddress(a.0 + SHADOW_OFFSET)
}

/// Synthesizes the shadow program for one victim branch.
pub fn make_shadow(target: BranchDescriptor, probe: ProbeKind) -> Result<ShadowProbe, ShadowError> {
    match (target.kind, probe) {
        (BranchKind::Conditional, ProbeKind::Conditional) => make_conditional(target),
        (BranchKind::Unconditional, ProbeKind::Unconditional) => make_unconditional(target),
        (BranchKind::Indirect, ProbeKind::Indirect) => make_indirect(target),
        (kind, probe) => Err(ShadowError::KindMismatch { kind, probe }),
    }
}

/// Conditional shadow: an always-taken branch aligned with the victim's,
/// jumping to the alias of the victim's taken target. With the victim's
/// entry in the BTB the jump predicts correctly; without it, the static
/// not-taken rule mispredicts.
fn make_conditional(target: BranchDescriptor) -> Result<ShadowProbe, ShadowError> {
    let a = target.addr;
    let t = target.target.ok_or(ShadowError::MissingTarget(a))?;
    let setup = VirtualAddress(a.0 - STRIDE);
    if t == setup || t == a {
        return Err(ShadowError::LayoutConflict { at: a, target: t });
    }
    let lo = setup.min(t);
    let hi = a.max(t);
    let shadow = build_image(
        lo,
        hi,
        &[
            (
                setup,
                Instruction::SetReg {
                    dst: Reg(0),
                    expr: Expr::Val(Operand::Imm(1)),
                },
            ),
            (
                a,
                Instruction::CondBranch {
                    pred: Reg(0),
                    target: shifted(t),
                },
            ),
            (t, Instruction::Halt),
        ],
    )?;
    Ok(ShadowProbe {
        kind: ProbeKind::Conditional,
        target,
        shadow,
        shadow_branch: shifted(a),
        entry: shifted(setup),
    })
}

/// Unconditional shadow: a jump whose static target deliberately differs
/// from the victim's, so a stored victim entry forces a target mispredict.
fn make_unconditional(target: BranchDescriptor) -> Result<ShadowProbe, ShadowError> {
    let a = target.addr;
    let victim_target = target.target.ok_or(ShadowError::MissingTarget(a))?;
    // Pick a nearby landing slot that cannot be confused with the victim's
    // target modulo the aliasing mask.
    let landing = [2, 3]
        .into_iter()
        .map(|k| VirtualAddress(a.0 + k * STRIDE))
        .find(|s| s.0 & (SHADOW_OFFSET - 1) != victim_target.0 & (SHADOW_OFFSET - 1))
        .expect("two consecutive slots cannot both equal one target");
    let shadow = build_image(
        a,
        landing,
        &[
            (
                a,
                Instruction::Jump {
                    target: shifted(landing),
                },
            ),
            (landing, Instruction::Halt),
        ],
    )?;
    Ok(ShadowProbe {
        kind: ProbeKind::Unconditional,
        target,
        shadow,
        shadow_branch: shifted(a),
        entry: shifted(a),
    })
}

/// Indirect shadow: an indirect jump whose register holds its own next
/// instruction. A stored victim target makes it mispredict; an empty BTB
/// predicts exactly that fall-through.
fn make_indirect(target: BranchDescriptor) -> Result<ShadowProbe, ShadowError> {
    let a = target.addr;
    let setup = VirtualAddress(a.0 - STRIDE);
    let next = VirtualAddress(a.0 + STRIDE);
    let shadow = build_image(
        setup,
        next,
        &[
            (
                setup,
                Instruction::SetReg {
                    dst: Reg(0),
                    expr: Expr::Val(Operand::Addr(shifted(next))),
                },
            ),
            (a, Instruction::IndirectJump { reg: Reg(0) }),
            (next, Instruction::Halt),
        ],
    )?;
    Ok(ShadowProbe {
        kind: ProbeKind::Indirect,
        target,
        shadow,
        shadow_branch: shifted(a),
        entry: shifted(setup),
    })
}

/// Indirect shadow variant for target recovery: the register holds the
/// alias of `candidate`, so the probe predicts correctly exactly when the
/// stored victim target is `candidate`.
pub fn make_indirect_target_shadow(
    branch_addr: VirtualAddress,
    candidate: VirtualAddress,
) -> Result<ShadowProbe, ShadowError> {
    let a = branch_addr;
    let setup = VirtualAddress(a.0 - STRIDE);
    if candidate == setup || candidate == a {
        return Err(ShadowError::LayoutConflict {
            at: a,
            target: candidate,
        });
    }
    let lo = setup.min(candidate);
    let hi = a.max(candidate);
    let shadow = build_image(
        lo,
        hi,
        &[
            (
                setup,
                Instruction::SetReg {
                    dst: Reg(0),
                    expr: Expr::Val(Operand::Addr(shifted(candidate))),
                },
            ),
            (a, Instruction::IndirectJump { reg: Reg(0) }),
            (candidate, Instruction::Halt),
        ],
    )?;
    Ok(ShadowProbe {
        kind: ProbeKind::Indirect,
        target: BranchDescriptor {
            addr: a,
            kind: BranchKind::Indirect,
            target: None,
        },
        shadow,
        shadow_branch: shifted(a),
        entry: shifted(setup),
    })
}

/// Occupies one BTB set with four attacker entries and reports evictions:
/// a victim branch whose address shares the set's low 16 bits displaces one
/// of them.
#[derive(Clone, Copy, Debug)]
pub struct EvictionMonitor {
    addrs: [VirtualAddress; 4],
}

impl EvictionMonitor {
    /// Builds a monitor for the set `watched` maps to, using tags distinct
    /// from the watched address's own.
    pub fn for_address(watched: VirtualAddress) -> EvictionMonitor {
        let low = watched.0 & 0xffff;
        let vtag = (watched.0 >> 16) & 0x7fff;
        let addrs = std::array::from_fn(|i| {
            let tag = (vtag + 1 + i as u64) & 0x7fff;
            VirtualAddress((tag << 16) | low)
        });
        let cfg = crate::uarch::BtbConfig::default();
        debug_assert!(addrs.iter().all(|a| cfg.index(*a) == cfg.index(watched)));
        debug_assert!(addrs.iter().all(|a| cfg.tag(*a) != cfg.tag(watched)));
        EvictionMonitor { addrs }
    }

    pub fn addresses(&self) -> [VirtualAddress; 4] {
        self.addrs
    }

    /// Fills all four ways of the monitored set.
    pub fn prime(&self, uarch: &mut Uarch) {
        for a in self.addrs {
            uarch.btb.insert(a, VirtualAddress(a.0 + STRIDE));
        }
    }

    /// True when any primed entry has been displaced since the last call;
    /// re-primes whatever is missing.
    pub fn check(&self, uarch: &mut Uarch) -> bool {
        let mut evicted = false;
        for a in self.addrs {
            if uarch.btb.lookup(a).is_none() {
                evicted = true;
            }
        }
        if evicted {
            self.prime(uarch);
        }
        evicted
    }
}
