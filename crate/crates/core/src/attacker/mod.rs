//! Branch shadowing: synthesizing aliased probe code, reading out victim
//! branch state through the LBR and timing channels, and reassembling the
//! victim's control flow from the observations.

mod shadow;

pub use shadow::{
    make_indirect_target_shadow, make_shadow, BranchDescriptor, EvictionMonitor, ShadowError,
    ShadowProbe, SHADOW_OFFSET,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::Session;
use crate::ir::{InputMap, Instruction, Program, VirtualAddress, STRIDE};
use crate::uarch::{ChannelParams, Lbr, LbrContext, MispredictKind, TimingModel, Uarch};

/// Which probe procedure a shadow implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    Conditional,
    Unconditional,
    Indirect,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Conditional => "conditional",
            ProbeKind::Unconditional => "unconditional",
            ProbeKind::Indirect => "indirect",
        }
    }
}

/// What a probe can conclude about the victim branch it shadows.
///
/// A not-taken conditional branch and one that never executed leave the same
/// predictor state, hence the merged label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Inference {
    Taken,
    NotTakenOrNotExecuted,
    Executed,
    NotExecuted,
}

impl Inference {
    pub fn name(self) -> &'static str {
        match self {
            Inference::Taken => "taken",
            Inference::NotTakenOrNotExecuted => "not-taken-or-not-executed",
            Inference::Executed => "executed",
            Inference::NotExecuted => "not-executed",
        }
    }

    /// True for the labels that indicate the victim branch did run (and, for
    /// conditionals, was taken).
    pub fn positive(self) -> bool {
        matches!(self, Inference::Taken | Inference::Executed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub label: Inference,
    pub confidence: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("no visible LBR record for shadow branch at {addr}")]
    LbrMiss { addr: VirtualAddress },
    #[error("shadow run produced no branch record at {addr}")]
    NoBranchRecord { addr: VirtualAddress },
    #[error("shadow execution failed: {0}")]
    Exec(String),
    #[error("probe kind {got:?} does not match operation {want:?}")]
    KindMismatch { want: ProbeKind, got: ProbeKind },
    #[error("repeats must be >= 1")]
    ZeroRepeats,
}

/// A per-channel decision boundary between the "predicted correctly" and
/// "mispredicted" latency populations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub boundary: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("class means are equal ({0}); no boundary exists")]
    Degenerate(f64),
}

/// Decision boundary between the two latency populations: the point where
/// the two bell curves cross, i.e. equal standardized distance to both
/// class means, `(t - m1)/s1 = (m2 - t)/s2`.
///
/// This always lies strictly between the means (midpoint for equal sigmas)
/// and equalizes the two per-class error rates, which is what keeps the
/// narrow-sigma channels ahead of the wide ones.
pub fn derive_threshold(params: &ChannelParams) -> Result<Threshold, ThresholdError> {
    let (m1, s1) = (params.mean_correct, params.sd_correct);
    let (m2, s2) = (params.mean_mispredict, params.sd_mispredict);
    if m1 == m2 {
        return Err(ThresholdError::Degenerate(m1));
    }
    let boundary = if s1 + s2 == 0.0 {
        (m1 + m2) / 2.0
    } else {
        (m1 * s2 + m2 * s1) / (s1 + s2)
    };
    Ok(Threshold { boundary })
}

impl Threshold {
    /// True when a latency reading classifies as "mispredicted".
    pub fn classifies_mispredict(&self, reading: f64) -> bool {
        reading > self.boundary
    }
}

/// Runs a shadow program in the open context against the shared predictor
/// state and returns the verdict on its probe branch.
fn run_shadow(
    probe: &ShadowProbe,
    uarch: &mut Uarch,
    lbr: &mut Lbr,
) -> Result<crate::harness::BranchRecord, ProbeError> {
    let mut session = Session::new(
        &probe.shadow,
        probe.entry,
        InputMap::new(),
        LbrContext::Open,
    );
    session
        .run(uarch, lbr, probe.shadow.len() as u64 + 8)
        .map_err(|e| ProbeError::Exec(e.to_string()))?;
    session
        .branch_records()
        .iter()
        .find(|r| r.addr == probe.shadow_branch)
        .copied()
        .ok_or(ProbeError::NoBranchRecord {
            addr: probe.shadow_branch,
        })
}

/// Conditional-branch probe over the LBR prediction flag.
///
/// The shadow branch is always taken; it reads as correctly predicted
/// exactly when the BTB still holds the victim's (aliased) taken entry.
pub fn probe_conditional(
    probe: &ShadowProbe,
    uarch: &mut Uarch,
    lbr: &mut Lbr,
) -> Result<InferenceResult, ProbeError> {
    if probe.kind != ProbeKind::Conditional {
        return Err(ProbeError::KindMismatch {
            want: ProbeKind::Conditional,
            got: probe.kind,
        });
    }
    run_shadow(probe, uarch, lbr)?;
    let rec = lbr
        .last_from(probe.shadow_branch)
        .ok_or(ProbeError::LbrMiss {
            addr: probe.shadow_branch,
        })?;
    let label = if rec.predicted {
        Inference::Taken
    } else {
        Inference::NotTakenOrNotExecuted
    };
    Ok(InferenceResult {
        label,
        confidence: 1.0,
    })
}

/// Indirect-branch probe over the LBR prediction flag.
///
/// The shadow jumps to its own next instruction; a stored victim target
/// makes that jump mispredict, so `predicted=false` means the victim ran.
pub fn probe_indirect(
    probe: &ShadowProbe,
    uarch: &mut Uarch,
    lbr: &mut Lbr,
) -> Result<InferenceResult, ProbeError> {
    if probe.kind != ProbeKind::Indirect {
        return Err(ProbeError::KindMismatch {
            want: ProbeKind::Indirect,
            got: probe.kind,
        });
    }
    run_shadow(probe, uarch, lbr)?;
    let rec = lbr
        .last_from(probe.shadow_branch)
        .ok_or(ProbeError::LbrMiss {
            addr: probe.shadow_branch,
        })?;
    let label = if rec.predicted {
        Inference::NotExecuted
    } else {
        Inference::Executed
    };
    Ok(InferenceResult {
        label,
        confidence: 1.0,
    })
}

/// Unconditional-branch probe over a timing channel.
///
/// The LBR masks mispredict flags on unconditional branches, so the verdict
/// comes from elapsed-cycle measurements instead: the shadow's target is
/// made to differ from the victim's, so a stored victim entry forces a
/// target mispredict and a slow measurement. `repeats` measurements are
/// majority-voted against the channel threshold.
#[allow(clippy::too_many_arguments)]
pub fn probe_unconditional<R: rand::Rng + ?Sized>(
    probe: &ShadowProbe,
    uarch: &mut Uarch,
    lbr: &mut Lbr,
    rng: &mut R,
    model: &TimingModel,
    threshold: &Threshold,
    repeats: u32,
) -> Result<InferenceResult, ProbeError> {
    if probe.kind != ProbeKind::Unconditional {
        return Err(ProbeError::KindMismatch {
            want: ProbeKind::Unconditional,
            got: probe.kind,
        });
    }
    if repeats == 0 {
        return Err(ProbeError::ZeroRepeats);
    }
    let rec = run_shadow(probe, uarch, lbr)?;
    let mispredicted = rec.prediction.mispredict != MispredictKind::None;
    let votes = (0..repeats)
        .filter(|_| threshold.classifies_mispredict(model.sample(rng, mispredicted)))
        .count() as u32;
    let executed = 2 * votes > repeats;
    let label = if executed {
        Inference::Executed
    } else {
        Inference::NotExecuted
    };
    let confidence = if executed {
        f64::from(votes) / f64::from(repeats)
    } else {
        f64::from(repeats - votes) / f64::from(repeats)
    };
    Ok(InferenceResult { label, confidence })
}

/// Recovers an indirect branch's runtime target from a candidate list.
///
/// `rerun_victim` must re-execute the victim on identical input (re-priming
/// the BTB entry); after each rerun one candidate is tested with a shadow
/// register target of `candidate + 2^31`, which predicts correctly exactly
/// when it matches the stored victim target.
pub fn infer_indirect_target(
    branch_addr: VirtualAddress,
    candidates: &[VirtualAddress],
    uarch: &mut Uarch,
    lbr: &mut Lbr,
    mut rerun_victim: impl FnMut(&mut Uarch, &mut Lbr),
) -> Result<Option<VirtualAddress>, ProbeError> {
    for &candidate in candidates {
        rerun_victim(uarch, lbr);
        let probe = make_indirect_target_shadow(branch_addr, candidate)
            .map_err(|e| ProbeError::Exec(e.to_string()))?;
        run_shadow(&probe, uarch, lbr)?;
        let rec = lbr
            .last_from(probe.shadow_branch)
            .ok_or(ProbeError::LbrMiss {
                addr: probe.shadow_branch,
            })?;
        if rec.predicted {
            return Ok(Some(candidate));
        }
    }
    Ok(None)
}

/// Probes one always-reachable prologue branch per registered function and
/// reports which function ran; ambiguous or empty readings give `None`.
pub fn locate_active_function(
    prologues: &[(String, ShadowProbe)],
    uarch: &mut Uarch,
    lbr: &mut Lbr,
) -> Result<Option<String>, ProbeError> {
    let mut hits = Vec::new();
    for (name, probe) in prologues {
        let result = match probe.kind {
            ProbeKind::Conditional => probe_conditional(probe, uarch, lbr)?,
            ProbeKind::Indirect => probe_indirect(probe, uarch, lbr)?,
            ProbeKind::Unconditional => {
                return Err(ProbeError::KindMismatch {
                    want: ProbeKind::Conditional,
                    got: ProbeKind::Unconditional,
                })
            }
        };
        if result.label.positive() {
            hits.push(name.clone());
        }
    }
    Ok(if hits.len() == 1 { hits.pop() } else { None })
}

/// One probed branch, in observation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchObservation {
    pub addr: VirtualAddress,
    pub label: Inference,
}

/// A control-flow path recovered from probe observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// Every instruction address on the recovered path, in order.
    pub path: Vec<VirtualAddress>,
    /// Conditional branch decisions along the path: `(addr, taken)`. This is
    /// the secret-bearing stream the victims' decoders consume.
    pub decisions: Vec<(VirtualAddress, bool)>,
    /// Observations left over after the walk reached `halt`.
    pub unused_observations: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ReconstructError {
    #[error("walk reached conditional at {at} but observation {index} probes {observed}")]
    WrongBranch {
        at: VirtualAddress,
        observed: VirtualAddress,
        index: usize,
    },
    #[error("walk reached conditional at {at} with no observations left")]
    MissingObservation { at: VirtualAddress },
    #[error("observation {index} at {at} has non-conditional label {label:?}")]
    BadLabel {
        at: VirtualAddress,
        label: Inference,
        index: usize,
    },
    #[error("walk reached indirect jump at {at}, which observations cannot resolve")]
    IndirectOnPath { at: VirtualAddress },
    #[error("walk left the program image at {at}")]
    OffImage { at: VirtualAddress },
    #[error("walk exceeded {0} steps without halting")]
    NoHalt(u64),
}

/// Walks the victim program, consuming one observation per conditional
/// branch reached, and returns the unique consistent path.
///
/// In context, `NotTakenOrNotExecuted` at a branch the walk has provably
/// reached disambiguates to "not taken".
pub fn reconstruct_control_flow(
    program: &Program,
    entry: VirtualAddress,
    observations: &[BranchObservation],
    fuel: u64,
) -> Result<Reconstruction, ReconstructError> {
    let mut pc = entry;
    let mut path = Vec::new();
    let mut decisions = Vec::new();
    let mut next_obs = 0usize;

    for _ in 0..fuel {
        let Some(instr) = program.instruction_at(pc) else {
            return Err(ReconstructError::OffImage { at: pc });
        };
        path.push(pc);
        match instr {
            Instruction::Halt => {
                return Ok(Reconstruction {
                    path,
                    decisions,
                    unused_observations: observations.len() - next_obs,
                })
            }
            Instruction::CondBranch { target, .. } => {
                let obs = observations
                    .get(next_obs)
                    .ok_or(ReconstructError::MissingObservation { at: pc })?;
                if obs.addr != pc {
                    return Err(ReconstructError::WrongBranch {
                        at: pc,
                        observed: obs.addr,
                        index: next_obs,
                    });
                }
                let taken = match obs.label {
                    Inference::Taken => true,
                    Inference::NotTakenOrNotExecuted => false,
                    other => {
                        return Err(ReconstructError::BadLabel {
                            at: pc,
                            label: other,
                            index: next_obs,
                        })
                    }
                };
                next_obs += 1;
                decisions.push((pc, taken));
                pc = if taken {
                    *target
                } else {
                    VirtualAddress(pc.0 + STRIDE)
                };
            }
            Instruction::Jump { target } => pc = *target,
            Instruction::IndirectJump { .. } => {
                return Err(ReconstructError::IndirectOnPath { at: pc })
            }
            _ => pc = VirtualAddress(pc.0 + STRIDE),
        }
    }
    Err(ReconstructError::NoHalt(fuel))
}

#[cfg(test)]
mod tests;
