//! The architectural interpreter: exact, deterministic IR semantics with no
//! microarchitectural state. Attack scoring treats its traces as ground
//! truth.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{Expr, Instruction, Operand, Program, Reg, VirtualAddress, NUM_REGS, STRIDE};

/// Named run inputs, bound to `$name` operands.
pub type InputMap = BTreeMap<String, u64>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error(
        "indirect jump at {at} through {reg:?} holding {value:#x}, not a valid instruction address"
    )]
    BadIndirectTarget {
        at: VirtualAddress,
        reg: Reg,
        value: u64,
    },
    #[error("unbound input `{name}` read at {at}")]
    UnboundInput { at: VirtualAddress, name: String },
    #[error("fuel must be positive")]
    ZeroFuel,
}

/// The outcome of one executed branch instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchOutcome {
    pub taken: bool,
    /// Where control actually went (the fall-through address when not taken).
    pub target: VirtualAddress,
}

/// One executed instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub addr: VirtualAddress,
    pub branch: Option<BranchOutcome>,
}

/// Full record of one architectural run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchTrace {
    pub events: Vec<TraceEvent>,
    pub final_regs: [u64; NUM_REGS],
    /// Sum of per-instruction cycle costs (no prediction penalties).
    pub cycles: u64,
    /// Set when the run stopped because fuel ran out rather than at `halt`.
    pub fuel_exhausted: bool,
}

impl ArchTrace {
    /// Outcomes of conditional branches in execution order, as
    /// `(branch address, taken)` pairs. This is the secret-bearing view the
    /// victims' leak decoders consume.
    pub fn conditional_outcomes(&self, program: &Program) -> Vec<(VirtualAddress, bool)> {
        self.events
            .iter()
            .filter(|e| {
                matches!(
                    program.instruction_at(e.addr),
                    Some(Instruction::CondBranch { .. })
                )
            })
            .map(|e| (e.addr, e.branch.expect("conditional records outcome").taken))
            .collect()
    }

    /// Source addresses of executed direct branches (conditional and
    /// unconditional), in order. Indirect jumps are excluded: this is the
    /// event stream a shadowing attacker can probe by address.
    pub fn direct_branch_sources(&self, program: &Program) -> Vec<VirtualAddress> {
        self.events
            .iter()
            .filter(|e| {
                matches!(
                    program.instruction_at(e.addr),
                    Some(Instruction::CondBranch { .. } | Instruction::Jump { .. })
                )
            })
            .map(|e| e.addr)
            .collect()
    }
}

/// Runs `program` from `entry` with the given inputs, stopping at `halt`,
/// on error, or after `fuel` instructions (flagged, not an error).
pub fn interpret(
    program: &Program,
    entry: VirtualAddress,
    input: &InputMap,
    fuel: u64,
) -> Result<ArchTrace, ExecError> {
    if fuel == 0 {
        return Err(ExecError::ZeroFuel);
    }
    let mut machine = Machine::new(input.clone());
    let mut pc = entry;
    let mut events = Vec::new();
    let mut cycles = 0u64;

    for _ in 0..fuel {
        let Some(instr) = program.instruction_at(pc) else {
            // Direct targets are validated at assembly time, so control only
            // leaves the image through `ijmp` or by falling off the end.
            return Err(ExecError::BadIndirectTarget {
                at: pc,
                reg: Reg(0),
                value: pc.0,
            });
        };
        cycles += instr.cost();
        let step = machine.step(instr, pc)?;
        events.push(TraceEvent {
            addr: pc,
            branch: step.branch,
        });
        if let Instruction::IndirectJump { reg } = instr {
            let dest = step.next.expect("ijmp always continues");
            if program.instruction_at(dest).is_none() {
                return Err(ExecError::BadIndirectTarget {
                    at: pc,
                    reg: *reg,
                    value: dest.0,
                });
            }
        }
        match step.next {
            Some(next) => pc = next,
            None => {
                return Ok(ArchTrace {
                    events,
                    final_regs: machine.regs,
                    cycles,
                    fuel_exhausted: false,
                })
            }
        }
    }
    Ok(ArchTrace {
        events,
        final_regs: machine.regs,
        cycles,
        fuel_exhausted: true,
    })
}

pub(crate) struct StepResult {
    /// Next pc, or `None` at `halt`.
    pub(crate) next: Option<VirtualAddress>,
    pub(crate) branch: Option<BranchOutcome>,
}

pub(crate) struct Machine {
    pub regs: [u64; NUM_REGS],
    input: InputMap,
}

impl Machine {
    pub(crate) fn new(input: InputMap) -> Machine {
        Machine {
            regs: [0; NUM_REGS],
            input,
        }
    }

    fn operand(&self, op: &Operand, at: VirtualAddress) -> Result<u64, ExecError> {
        Ok(match op {
            Operand::Reg(r) => self.regs[r.0 as usize],
            Operand::Imm(v) => *v as u64,
            Operand::Input(name) => {
                *self
                    .input
                    .get(name)
                    .ok_or_else(|| ExecError::UnboundInput {
                        at,
                        name: name.clone(),
                    })?
            }
            Operand::Addr(a) => a.0,
        })
    }

    fn eval(&self, expr: &Expr, at: VirtualAddress) -> Result<u64, ExecError> {
        let v = |op| self.operand(op, at);
        Ok(match expr {
            Expr::Val(a) => v(a)?,
            Expr::Add(a, b) => v(a)?.wrapping_add(v(b)?),
            Expr::Sub(a, b) => v(a)?.wrapping_sub(v(b)?),
            Expr::And(a, b) => v(a)? & v(b)?,
            Expr::Shl(a, b) => v(a)?.wrapping_shl(v(b)? as u32),
            Expr::Shr(a, b) => v(a)?.wrapping_shr(v(b)? as u32),
            Expr::Eq(a, b) => u64::from(v(a)? == v(b)?),
            Expr::Lt(a, b) => u64::from((v(a)? as i64) < (v(b)? as i64)),
        })
    }

    pub(crate) fn step(
        &mut self,
        instr: &Instruction,
        pc: VirtualAddress,
    ) -> Result<StepResult, ExecError> {
        let fall = VirtualAddress(pc.0 + STRIDE);
        let mut next = Some(fall);
        let mut branch = None;
        match instr {
            Instruction::Compute { .. } => {}
            Instruction::SetReg { dst, expr } => {
                self.regs[dst.0 as usize] = self.eval(expr, pc)?;
            }
            Instruction::CondBranch { pred, target } => {
                let taken = self.regs[pred.0 as usize] != 0;
                let dest = if taken { *target } else { fall };
                branch = Some(BranchOutcome {
                    taken,
                    target: dest,
                });
                next = Some(dest);
            }
            Instruction::Jump { target } => {
                branch = Some(BranchOutcome {
                    taken: true,
                    target: *target,
                });
                next = Some(*target);
            }
            Instruction::IndirectJump { reg } => {
                let value = self.regs[reg.0 as usize];
                let dest = VirtualAddress(value);
                branch = Some(BranchOutcome {
                    taken: true,
                    target: dest,
                });
                next = Some(dest);
            }
            Instruction::CondMove { pred, dst, value } => {
                if self.regs[pred.0 as usize] == 0 {
                    self.regs[dst.0 as usize] = value.0;
                }
            }
            Instruction::Halt => next = None,
        }
        Ok(StepResult { next, branch })
    }
}
