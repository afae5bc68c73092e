//! The toy branch-centric instruction set and its architectural semantics.
//!
//! Programs are sequences of instructions at 4-byte-strided virtual
//! addresses. The only state is a small register file; straight-line work is
//! abstracted as `compute` instructions with an explicit cycle cost. The
//! architectural interpreter in [`interp`] is side-channel-free and serves as
//! ground truth for attack scoring.

mod asm;
mod interp;
#[cfg(test)]
mod tests;

pub use asm::{assemble, AsmError};
pub(crate) use interp::Machine;
pub use interp::{interpret, ArchTrace, BranchOutcome, ExecError, InputMap, TraceEvent};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Byte distance between consecutive instructions.
pub const STRIDE: u64 = 4;

/// Number of general-purpose registers (`r0`..`r15`).
pub const NUM_GP_REGS: u8 = 16;

/// The register reserved for trampoline dispatch (`tr`). Source programs
/// must not touch it; the Zigzagger pass owns it.
pub const TRAMPOLINE_REG: Reg = Reg(NUM_GP_REGS);

/// Total register file size, including the reserved register.
pub const NUM_REGS: usize = NUM_GP_REGS as usize + 1;

/// A byte-granular code address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct VirtualAddress(pub u64);

impl VirtualAddress {
    pub fn offset(self, delta: i64) -> VirtualAddress {
        VirtualAddress(self.0.wrapping_add(delta as u64))
    }
}

impl fmt::Debug for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A register id: `r0`..`r15` plus the reserved `tr`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Reg(pub u8);

impl Reg {
    pub fn is_reserved(self) -> bool {
        self == TRAMPOLINE_REG
    }
}

impl fmt::Debug for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_reserved() {
            write!(f, "tr")
        } else {
            write!(f, "r{}", self.0)
        }
    }
}

/// A value source for [`Expr`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
    /// Named run input, bound when the interpreter starts.
    Input(String),
    /// A code address. Distinguished from `Imm` so relocation and the
    /// Zigzagger pass can rewrite it.
    Addr(VirtualAddress),
}

/// Register-file arithmetic, all wrapping on u64. `Eq` and `Lt` (signed)
/// produce 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expr {
    Val(Operand),
    Add(Operand, Operand),
    Sub(Operand, Operand),
    And(Operand, Operand),
    Shl(Operand, Operand),
    Shr(Operand, Operand),
    Eq(Operand, Operand),
    Lt(Operand, Operand),
}

/// One instruction.
///
/// Branch conventions mirror the x86 idioms the corpus is lowered from:
/// `CondBranch` is taken when the predicate register is nonzero (`jnz`),
/// while `CondMove` writes its destination when the predicate is zero
/// (`cmovz`). `CondMove` never alters control flow by itself.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instruction {
    /// Opaque straight-line work costing `cost` cycles.
    Compute {
        cost: u32,
    },
    SetReg {
        dst: Reg,
        expr: Expr,
    },
    CondBranch {
        pred: Reg,
        target: VirtualAddress,
    },
    Jump {
        target: VirtualAddress,
    },
    IndirectJump {
        reg: Reg,
    },
    CondMove {
        pred: Reg,
        dst: Reg,
        value: VirtualAddress,
    },
    Halt,
}

impl Instruction {
    /// Cycle cost charged by the architectural interpreter.
    pub fn cost(&self) -> u64 {
        match self {
            Instruction::Compute { cost } => u64::from(*cost),
            _ => 1,
        }
    }

    pub fn branch_kind(&self) -> Option<BranchKind> {
        match self {
            Instruction::CondBranch { .. } => Some(BranchKind::Conditional),
            Instruction::Jump { .. } => Some(BranchKind::Unconditional),
            Instruction::IndirectJump { .. } => Some(BranchKind::Indirect),
            _ => None,
        }
    }
}

/// Branch classification used by predictors and probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchKind {
    Conditional,
    Unconditional,
    Indirect,
}

/// An assembled program image: a dense run of instructions starting at
/// `base`, with 4-byte stride, plus the label map used for printing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    base: VirtualAddress,
    instructions: Vec<Instruction>,
    /// Label name -> address; kept sorted for deterministic printing.
    labels: BTreeMap<String, VirtualAddress>,
}

impl Program {
    /// Builds a program from raw parts, validating that every branch target
    /// lies inside the image.
    pub fn new(
        base: VirtualAddress,
        instructions: Vec<Instruction>,
        labels: BTreeMap<String, VirtualAddress>,
    ) -> Result<Program, AsmError> {
        let p = Program {
            base,
            instructions,
            labels,
        };
        for (addr, instr) in p.iter() {
            let check = |t: VirtualAddress| {
                if p.instruction_at(t).is_none() {
                    Err(AsmError::TargetOutsideImage {
                        at: addr,
                        target: t,
                    })
                } else {
                    Ok(())
                }
            };
            match instr {
                Instruction::CondBranch { target, .. }
                | Instruction::Jump { target }
                | Instruction::CondMove { value: target, .. } => check(*target)?,
                _ => {}
            }
        }
        for (name, addr) in &p.labels {
            if p.instruction_at(*addr).is_none() && *addr != p.end() {
                return Err(AsmError::TargetOutsideImage {
                    at: *addr,
                    target: *addr,
                });
            }
            let _ = name;
        }
        Ok(p)
    }

    pub fn base(&self) -> VirtualAddress {
        self.base
    }

    /// First address past the image.
    pub fn end(&self) -> VirtualAddress {
        VirtualAddress(self.base.0 + self.instructions.len() as u64 * STRIDE)
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn address_of_index(&self, idx: usize) -> VirtualAddress {
        VirtualAddress(self.base.0 + idx as u64 * STRIDE)
    }

    pub fn instruction_at(&self, addr: VirtualAddress) -> Option<&Instruction> {
        let off = addr.0.checked_sub(self.base.0)?;
        if off % STRIDE != 0 {
            return None;
        }
        self.instructions.get((off / STRIDE) as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = (VirtualAddress, &Instruction)> {
        self.instructions
            .iter()
            .enumerate()
            .map(|(i, ins)| (self.address_of_index(i), ins))
    }

    pub fn labels(&self) -> &BTreeMap<String, VirtualAddress> {
        &self.labels
    }

    pub fn label(&self, name: &str) -> Option<VirtualAddress> {
        self.labels.get(name).copied()
    }

    /// Addresses and kinds of every branch instruction, in program order.
    pub fn branches(&self) -> Vec<(VirtualAddress, BranchKind)> {
        self.iter()
            .filter_map(|(a, ins)| ins.branch_kind().map(|k| (a, k)))
            .collect()
    }

    /// True if any instruction reads or writes the reserved trampoline
    /// register.
    pub fn uses_reserved_reg(&self) -> bool {
        fn op_uses(op: &Operand) -> bool {
            matches!(op, Operand::Reg(r) if r.is_reserved())
        }
        fn expr_uses(e: &Expr) -> bool {
            match e {
                Expr::Val(a) => op_uses(a),
                Expr::Add(a, b)
                | Expr::Sub(a, b)
                | Expr::And(a, b)
                | Expr::Shl(a, b)
                | Expr::Shr(a, b)
                | Expr::Eq(a, b)
                | Expr::Lt(a, b) => op_uses(a) || op_uses(b),
            }
        }
        self.instructions.iter().any(|ins| match ins {
            Instruction::SetReg { dst, expr } => dst.is_reserved() || expr_uses(expr),
            Instruction::CondBranch { pred, .. } => pred.is_reserved(),
            Instruction::IndirectJump { reg } => reg.is_reserved(),
            Instruction::CondMove { pred, dst, .. } => pred.is_reserved() || dst.is_reserved(),
            _ => false,
        })
    }

    /// Moves the image to a new base, shifting every instruction address and
    /// every embedded code address by the same delta. Architectural behavior
    /// is unchanged.
    pub fn relocate(&self, new_base: VirtualAddress) -> Program {
        let delta = new_base.0.wrapping_sub(self.base.0);
        let shift = |a: VirtualAddress| VirtualAddress(a.0.wrapping_add(delta));
        let shift_op = |op: &Operand| match op {
            Operand::Addr(a) => Operand::Addr(shift(*a)),
            other => other.clone(),
        };
        let shift_expr = |e: &Expr| match e {
            Expr::Val(a) => Expr::Val(shift_op(a)),
            Expr::Add(a, b) => Expr::Add(shift_op(a), shift_op(b)),
            Expr::Sub(a, b) => Expr::Sub(shift_op(a), shift_op(b)),
            Expr::And(a, b) => Expr::And(shift_op(a), shift_op(b)),
            Expr::Shl(a, b) => Expr::Shl(shift_op(a), shift_op(b)),
            Expr::Shr(a, b) => Expr::Shr(shift_op(a), shift_op(b)),
            Expr::Eq(a, b) => Expr::Eq(shift_op(a), shift_op(b)),
            Expr::Lt(a, b) => Expr::Lt(shift_op(a), shift_op(b)),
        };
        let instructions = self
            .instructions
            .iter()
            .map(|ins| match ins {
                Instruction::SetReg { dst, expr } => Instruction::SetReg {
                    dst: *dst,
                    expr: shift_expr(expr),
                },
                Instruction::CondBranch { pred, target } => Instruction::CondBranch {
                    pred: *pred,
                    target: shift(*target),
                },
                Instruction::Jump { target } => Instruction::Jump {
                    target: shift(*target),
                },
                Instruction::CondMove { pred, dst, value } => Instruction::CondMove {
                    pred: *pred,
                    dst: *dst,
                    value: shift(*value),
                },
                other => other.clone(),
            })
            .collect();
        let labels = self
            .labels
            .iter()
            .map(|(n, a)| (n.clone(), shift(*a)))
            .collect();
        Program {
            base: new_base,
            instructions,
            labels,
        }
    }

    /// Renders the program in the IR text format. `assemble(print(p))`
    /// reproduces `p` exactly.
    pub fn print(&self) -> String {
        asm::print(self)
    }
}
