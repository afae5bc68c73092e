//! Text format for the IR: one instruction per line, `label:` prefixes,
//! `#` comments, an optional `.base` directive. `parse` and `print` are
//! exact inverses (modulo whitespace and comments).

use std::collections::BTreeMap;

use thiserror::Error;

use super::{Expr, Instruction, Operand, Program, Reg, VirtualAddress, NUM_GP_REGS, STRIDE};

/// Default image base when a source omits `.base`.
pub const DEFAULT_BASE: VirtualAddress = VirtualAddress(0x0001_0000);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate label `{name}`")]
    DuplicateLabel { line: usize, name: String },
    #[error("line {line}: unresolved label `{name}`")]
    UnresolvedLabel { line: usize, name: String },
    #[error("branch at {at} targets {target}, outside the program image")]
    TargetOutsideImage {
        at: VirtualAddress,
        target: VirtualAddress,
    },
}

/// An unresolved branch target as written in the source.
#[derive(Clone, Debug)]
enum TargetRef {
    Label(String),
    Absolute(VirtualAddress),
}

#[derive(Clone, Debug)]
enum RawOperand {
    Reg(Reg),
    Imm(i64),
    Input(String),
    AddrOf(TargetRef),
}

#[derive(Clone, Debug)]
enum RawInstr {
    Compute(u32),
    SetReg(Reg, RawExpr),
    CondBranch(Reg, TargetRef),
    Jump(TargetRef),
    IndirectJump(Reg),
    CondMove(Reg, Reg, TargetRef),
    Halt,
}

#[derive(Clone, Debug)]
struct RawExpr {
    op: Option<&'static str>,
    a: RawOperand,
    b: Option<RawOperand>,
}

/// Assembles IR source text into a [`Program`].
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut base = DEFAULT_BASE;
    let mut labels: BTreeMap<String, VirtualAddress> = BTreeMap::new();
    let mut raw: Vec<(usize, RawInstr)> = Vec::new();

    for (lineno, full_line) in source.lines().enumerate() {
        let lineno = lineno + 1;
        let mut line = full_line;
        if let Some(pos) = line.find('#') {
            line = &line[..pos];
        }
        let mut line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(".base") {
            base = VirtualAddress(parse_int(rest.trim(), lineno)? as u64);
            continue;
        }
        // Leading labels, possibly several, possibly followed by an
        // instruction on the same line.
        while let Some(colon) = line.find(':') {
            let (name, rest) = line.split_at(colon);
            let name = name.trim();
            if !is_ident(name) {
                break;
            }
            // Store the instruction index for now; converted to an address
            // once the full instruction count and base are known.
            let placeholder = VirtualAddress(raw.len() as u64);
            if labels.insert(name.to_string(), placeholder).is_some() {
                return Err(AsmError::DuplicateLabel {
                    line: lineno,
                    name: name.to_string(),
                });
            }
            line = rest[1..].trim();
        }
        if line.is_empty() {
            continue;
        }
        raw.push((lineno, parse_instr(line, lineno)?));
    }

    // Labels currently hold instruction indices; turn them into addresses.
    let labels: BTreeMap<String, VirtualAddress> = labels
        .into_iter()
        .map(|(n, idx)| (n, VirtualAddress(base.0 + idx.0 * STRIDE)))
        .collect();

    let resolve = |t: &TargetRef, line: usize| -> Result<VirtualAddress, AsmError> {
        match t {
            TargetRef::Absolute(a) => Ok(*a),
            TargetRef::Label(name) => {
                labels
                    .get(name)
                    .copied()
                    .ok_or_else(|| AsmError::UnresolvedLabel {
                        line,
                        name: name.clone(),
                    })
            }
        }
    };
    let resolve_op = |op: &RawOperand, line: usize| -> Result<Operand, AsmError> {
        Ok(match op {
            RawOperand::Reg(r) => Operand::Reg(*r),
            RawOperand::Imm(v) => Operand::Imm(*v),
            RawOperand::Input(n) => Operand::Input(n.clone()),
            RawOperand::AddrOf(t) => Operand::Addr(resolve(t, line)?),
        })
    };

    let mut instructions = Vec::with_capacity(raw.len());
    for (line, ri) in raw {
        let ins = match ri {
            RawInstr::Compute(cost) => Instruction::Compute { cost },
            RawInstr::SetReg(dst, e) => {
                let a = resolve_op(&e.a, line)?;
                let expr = match (e.op, e.b) {
                    (None, None) => Expr::Val(a),
                    (Some(op), Some(b)) => {
                        let b = resolve_op(&b, line)?;
                        match op {
                            "add" => Expr::Add(a, b),
                            "sub" => Expr::Sub(a, b),
                            "and" => Expr::And(a, b),
                            "shl" => Expr::Shl(a, b),
                            "shr" => Expr::Shr(a, b),
                            "eq" => Expr::Eq(a, b),
                            "lt" => Expr::Lt(a, b),
                            _ => unreachable!(),
                        }
                    }
                    _ => unreachable!(),
                };
                Instruction::SetReg { dst, expr }
            }
            RawInstr::CondBranch(pred, t) => Instruction::CondBranch {
                pred,
                target: resolve(&t, line)?,
            },
            RawInstr::Jump(t) => Instruction::Jump {
                target: resolve(&t, line)?,
            },
            RawInstr::IndirectJump(reg) => Instruction::IndirectJump { reg },
            RawInstr::CondMove(pred, dst, t) => Instruction::CondMove {
                pred,
                dst,
                value: resolve(&t, line)?,
            },
            RawInstr::Halt => Instruction::Halt,
        };
        instructions.push(ins);
    }

    Program::new(base, instructions, labels)
}

fn parse_instr(line: &str, lineno: usize) -> Result<RawInstr, AsmError> {
    let syntax = |msg: &str| AsmError::Syntax {
        line: lineno,
        msg: msg.to_string(),
    };
    let (mnemonic, rest) = match line.split_once(char::is_whitespace) {
        Some((m, r)) => (m, r.trim()),
        None => (line, ""),
    };
    let args: Vec<&str> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(str::trim).collect()
    };
    match mnemonic {
        "compute" => {
            let [c] = args[..] else {
                return Err(syntax("compute takes one argument"));
            };
            Ok(RawInstr::Compute(parse_int(c, lineno)? as u32))
        }
        "set" => {
            if args.len() < 2 || args.len() > 3 {
                return Err(syntax("set takes `set rD, rvalue`"));
            }
            let dst = parse_reg(args[0], lineno)?;
            // rvalue: either a bare operand, or `op a, b` (comma split put
            // `op a` into args[1] and `b` into args[2]).
            if args.len() == 2 {
                let a = parse_operand(args[1], lineno)?;
                Ok(RawInstr::SetReg(
                    dst,
                    RawExpr {
                        op: None,
                        a,
                        b: None,
                    },
                ))
            } else {
                let (op, a_txt) = args[1]
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| syntax("expected `op a, b`"))?;
                let op = match op {
                    "add" => "add",
                    "sub" => "sub",
                    "and" => "and",
                    "shl" => "shl",
                    "shr" => "shr",
                    "eq" => "eq",
                    "lt" => "lt",
                    other => return Err(syntax(&format!("unknown operation `{other}`"))),
                };
                let a = parse_operand(a_txt.trim(), lineno)?;
                let b = parse_operand(args[2], lineno)?;
                Ok(RawInstr::SetReg(
                    dst,
                    RawExpr {
                        op: Some(op),
                        a,
                        b: Some(b),
                    },
                ))
            }
        }
        "cbr" => {
            let [p, t] = args[..] else {
                return Err(syntax("cbr takes `cbr rP, target`"));
            };
            Ok(RawInstr::CondBranch(
                parse_reg(p, lineno)?,
                parse_target(t, lineno)?,
            ))
        }
        "jmp" => {
            let [t] = args[..] else {
                return Err(syntax("jmp takes one target"));
            };
            Ok(RawInstr::Jump(parse_target(t, lineno)?))
        }
        "ijmp" => {
            let [r] = args[..] else {
                return Err(syntax("ijmp takes one register"));
            };
            Ok(RawInstr::IndirectJump(parse_reg(r, lineno)?))
        }
        "cmov" => {
            let [p, d, t] = args[..] else {
                return Err(syntax("cmov takes `cmov rP, rD, target`"));
            };
            Ok(RawInstr::CondMove(
                parse_reg(p, lineno)?,
                parse_reg(d, lineno)?,
                parse_target(t, lineno)?,
            ))
        }
        "halt" => {
            if !args.is_empty() {
                return Err(syntax("halt takes no arguments"));
            }
            Ok(RawInstr::Halt)
        }
        other => Err(syntax(&format!("unknown mnemonic `{other}`"))),
    }
}

fn parse_reg(s: &str, line: usize) -> Result<Reg, AsmError> {
    if s == "tr" {
        return Ok(super::TRAMPOLINE_REG);
    }
    let err = || AsmError::Syntax {
        line,
        msg: format!("bad register `{s}`"),
    };
    let n: u8 = s
        .strip_prefix('r')
        .ok_or_else(err)?
        .parse()
        .map_err(|_| err())?;
    if n >= NUM_GP_REGS {
        return Err(err());
    }
    Ok(Reg(n))
}

fn parse_int(s: &str, line: usize) -> Result<i64, AsmError> {
    let err = || AsmError::Syntax {
        line,
        msg: format!("bad integer `{s}`"),
    };
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).map_err(|_| err())? as i64
    } else {
        body.parse::<i64>().map_err(|_| err())?
    };
    Ok(if neg { -v } else { v })
}

fn parse_target(s: &str, line: usize) -> Result<TargetRef, AsmError> {
    if s.starts_with(|c: char| c.is_ascii_digit()) {
        Ok(TargetRef::Absolute(VirtualAddress(
            parse_int(s, line)? as u64
        )))
    } else if is_ident(s) {
        Ok(TargetRef::Label(s.to_string()))
    } else {
        Err(AsmError::Syntax {
            line,
            msg: format!("bad target `{s}`"),
        })
    }
}

fn parse_operand(s: &str, line: usize) -> Result<RawOperand, AsmError> {
    if let Some(name) = s.strip_prefix('$') {
        if !is_ident(name) {
            return Err(AsmError::Syntax {
                line,
                msg: format!("bad input name `{s}`"),
            });
        }
        return Ok(RawOperand::Input(name.to_string()));
    }
    if let Some(t) = s.strip_prefix('&') {
        return Ok(RawOperand::AddrOf(parse_target(t, line)?));
    }
    if s == "tr" || (s.starts_with('r') && s[1..].chars().all(|c| c.is_ascii_digit())) {
        return Ok(RawOperand::Reg(parse_reg(s, line)?));
    }
    Ok(RawOperand::Imm(parse_int(s, line)?))
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_' || c == '.')
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Renders a program back to source text.
pub fn print(program: &Program) -> String {
    use std::fmt::Write;

    // Invert the label map for per-address emission.
    let mut by_addr: BTreeMap<VirtualAddress, Vec<&str>> = BTreeMap::new();
    for (name, addr) in program.labels() {
        by_addr.entry(*addr).or_default().push(name);
    }
    let target_txt = |t: VirtualAddress| -> String {
        by_addr
            .get(&t)
            .map(|names| names[0].to_string())
            .unwrap_or_else(|| format!("{:#x}", t.0))
    };
    let op_txt = |op: &Operand| -> String {
        match op {
            Operand::Reg(r) => format!("{r:?}"),
            Operand::Imm(v) => format!("{v}"),
            Operand::Input(n) => format!("${n}"),
            Operand::Addr(a) => format!("&{}", target_txt(*a)),
        }
    };

    let mut out = String::new();
    writeln!(out, ".base {:#x}", program.base().0).unwrap();
    for (addr, instr) in program.iter() {
        if let Some(names) = by_addr.get(&addr) {
            for name in names {
                writeln!(out, "{name}:").unwrap();
            }
        }
        let line = match instr {
            Instruction::Compute { cost } => format!("compute {cost}"),
            Instruction::SetReg { dst, expr } => {
                let rv = match expr {
                    Expr::Val(a) => op_txt(a),
                    Expr::Add(a, b) => format!("add {}, {}", op_txt(a), op_txt(b)),
                    Expr::Sub(a, b) => format!("sub {}, {}", op_txt(a), op_txt(b)),
                    Expr::And(a, b) => format!("and {}, {}", op_txt(a), op_txt(b)),
                    Expr::Shl(a, b) => format!("shl {}, {}", op_txt(a), op_txt(b)),
                    Expr::Shr(a, b) => format!("shr {}, {}", op_txt(a), op_txt(b)),
                    Expr::Eq(a, b) => format!("eq {}, {}", op_txt(a), op_txt(b)),
                    Expr::Lt(a, b) => format!("lt {}, {}", op_txt(a), op_txt(b)),
                };
                format!("set {dst:?}, {rv}")
            }
            Instruction::CondBranch { pred, target } => {
                format!("cbr {pred:?}, {}", target_txt(*target))
            }
            Instruction::Jump { target } => format!("jmp {}", target_txt(*target)),
            Instruction::IndirectJump { reg } => format!("ijmp {reg:?}"),
            Instruction::CondMove { pred, dst, value } => {
                format!("cmov {pred:?}, {dst:?}, {}", target_txt(*value))
            }
            Instruction::Halt => "halt".to_string(),
        };
        writeln!(out, "    {line}").unwrap();
    }
    // Labels that sit one past the last instruction (e.g. `end:`).
    if let Some(names) = by_addr.get(&program.end()) {
        for name in names {
            writeln!(out, "{name}:").unwrap();
        }
    }
    out
}
