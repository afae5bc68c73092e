//! Incremental program execution against shared predictor state.

use crate::ir::{
    ArchTrace, BranchKind, ExecError, InputMap, Instruction, Machine, Program, TraceEvent,
    VirtualAddress, NUM_REGS,
};
use crate::uarch::{Lbr, LbrContext, PredictionResult, Uarch};

/// One executed branch with its prediction verdict.
#[derive(Clone, Copy, Debug)]
pub struct BranchRecord {
    pub addr: VirtualAddress,
    pub kind: BranchKind,
    pub taken: bool,
    pub target: VirtualAddress,
    pub prediction: PredictionResult,
}

/// A program being stepped one instruction at a time, feeding every branch
/// through the predictor and the LBR under a fixed context tag.
pub struct Session<'a> {
    program: &'a Program,
    machine: Machine,
    pc: Option<VirtualAddress>,
    context: LbrContext,
    events: Vec<TraceEvent>,
    branch_records: Vec<BranchRecord>,
    instructions: u64,
    base_cycles: u64,
    penalty_cycles: u64,
    mispredicts: u64,
}

impl<'a> Session<'a> {
    pub fn new(
        program: &'a Program,
        entry: VirtualAddress,
        input: InputMap,
        context: LbrContext,
    ) -> Session<'a> {
        Session {
            program,
            machine: Machine::new(input),
            pc: Some(entry),
            context,
            events: Vec::new(),
            branch_records: Vec::new(),
            instructions: 0,
            base_cycles: 0,
            penalty_cycles: 0,
            mispredicts: 0,
        }
    }

    pub fn running(&self) -> bool {
        self.pc.is_some()
    }

    pub fn instructions(&self) -> u64 {
        self.instructions
    }

    /// Cycles from instruction costs alone.
    pub fn base_cycles(&self) -> u64 {
        self.base_cycles
    }

    pub fn penalty_cycles(&self) -> u64 {
        self.penalty_cycles
    }

    /// Base cycles plus misprediction penalties.
    pub fn cycles(&self) -> u64 {
        self.base_cycles + self.penalty_cycles
    }

    pub fn mispredicts(&self) -> u64 {
        self.mispredicts
    }

    pub fn branch_records(&self) -> &[BranchRecord] {
        &self.branch_records
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    /// Executes one instruction. Returns `false` once halted (and on every
    /// later call).
    pub fn step(&mut self, uarch: &mut Uarch, lbr: &mut Lbr) -> Result<bool, ExecError> {
        let Some(pc) = self.pc else { return Ok(false) };
        let Some(instr) = self.program.instruction_at(pc) else {
            return Err(ExecError::BadIndirectTarget {
                at: pc,
                reg: crate::ir::Reg(0),
                value: pc.0,
            });
        };

        // Prediction happens at fetch, before the outcome is known.
        let predicted = instr.branch_kind().map(|kind| {
            let static_target = match instr {
                Instruction::CondBranch { target, .. } | Instruction::Jump { target } => {
                    Some(*target)
                }
                _ => None,
            };
            (kind, uarch.predict(kind, pc, static_target))
        });

        let step = self.machine.step(instr, pc)?;
        self.events.push(TraceEvent {
            addr: pc,
            branch: step.branch,
        });
        self.instructions += 1;
        self.base_cycles += instr.cost();

        if let Instruction::IndirectJump { reg } = instr {
            let dest = step.next.expect("ijmp always continues");
            if self.program.instruction_at(dest).is_none() {
                return Err(ExecError::BadIndirectTarget {
                    at: pc,
                    reg: *reg,
                    value: dest.0,
                });
            }
        }

        if let (Some((kind, guess)), Some(outcome)) = (predicted, step.branch) {
            let (result, penalty) = uarch.resolve(kind, pc, guess, outcome.taken, outcome.target);
            self.penalty_cycles += penalty;
            if !result.correct {
                self.mispredicts += 1;
            }
            if outcome.taken {
                lbr.record(pc, outcome.target, kind, result.correct, self.context);
            }
            self.branch_records.push(BranchRecord {
                addr: pc,
                kind,
                taken: outcome.taken,
                target: outcome.target,
                prediction: result,
            });
        }

        self.pc = step.next;
        Ok(self.pc.is_some())
    }

    /// Runs until halt or `fuel` instructions, whichever comes first.
    pub fn run(&mut self, uarch: &mut Uarch, lbr: &mut Lbr, fuel: u64) -> Result<(), ExecError> {
        while self.instructions < fuel && self.step(uarch, lbr)? {}
        Ok(())
    }

    pub fn final_regs(&self) -> [u64; NUM_REGS] {
        self.machine.regs
    }

    pub fn into_trace(self, fuel_exhausted: bool) -> ArchTrace {
        ArchTrace {
            events: self.events,
            final_regs: self.machine.regs,
            cycles: self.base_cycles,
            fuel_exhausted,
        }
    }
}
