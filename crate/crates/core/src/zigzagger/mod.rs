//! The branch-obfuscation countermeasure: direct branches are rewritten so
//! the real successor is computed into a reserved register with conditional
//! moves and reached through indirect jumps, with conditional sites threaded
//! through shared trampolines.
//!
//! Shapes emitted:
//! - conditional site: `set tr, taken'` / `cmov p, tr, fall'` / `jmp hop`
//! - unconditional site: `set tr, target'` / `ijmp tr`
//! - trampoline: one `jmp` hop per member site chaining into one `ijmp tr`
//!
//! Conditional sites go through trampoline hops because every execution of
//! the surrounding region reaches them, so the extra direct jumps are
//! input-independent. Unconditional branches usually sit on secret-dependent
//! arms; giving them any direct jump would leak which arm ran, so they
//! dispatch through the reserved register alone.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    interpret, ExecError, Expr, InputMap, Instruction, Operand, Program, VirtualAddress, STRIDE,
    TRAMPOLINE_REG,
};

/// How many conditional branches each trampoline manages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchesPerTrampoline {
    All,
    Count(usize),
}

impl BranchesPerTrampoline {
    pub fn parse(s: &str) -> Option<BranchesPerTrampoline> {
        if s == "all" {
            Some(BranchesPerTrampoline::All)
        } else {
            s.parse().ok().map(BranchesPerTrampoline::Count)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZigzaggerConfig {
    pub branches_per_trampoline: BranchesPerTrampoline,
    /// Seed for the random assignment of branches to trampolines.
    pub seed: u64,
}

impl ZigzaggerConfig {
    pub fn all(seed: u64) -> ZigzaggerConfig {
        ZigzaggerConfig {
            branches_per_trampoline: BranchesPerTrampoline::All,
            seed,
        }
    }

    pub fn grouped(k: usize, seed: u64) -> ZigzaggerConfig {
        ZigzaggerConfig {
            branches_per_trampoline: BranchesPerTrampoline::Count(k),
            seed,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("program already uses the reserved trampoline register")]
    ReservedRegisterInUse,
    #[error("branches per trampoline must be >= 2 when grouping")]
    GroupTooSmall,
}

/// One trampoline's summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrampolineReport {
    /// Addresses (in the transformed image) of this trampoline's hop slots.
    pub hops: Vec<VirtualAddress>,
    /// Address of the trampoline's indirect jump.
    pub dispatch: VirtualAddress,
    /// Number of distinct successor addresses the group's indirect
    /// dispatches can produce (trampoline dispatch plus the group's
    /// register-only unconditional sites).
    pub fan_out: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformReport {
    pub trampolines: Vec<TrampolineReport>,
    pub converted_conditionals: usize,
    pub converted_unconditionals: usize,
    /// Indirect source branches are not converted, only counted.
    pub passthrough_indirects: usize,
    /// Converted conditionals whose original taken target was backwards
    /// (loop back-edges); transformed like any other site, flagged here.
    pub back_edges: Vec<VirtualAddress>,
    pub reserved_register: u8,
    pub seed: u64,
}

struct SiteInfo {
    /// Index of the original branch instruction.
    orig_idx: usize,
    conditional: bool,
    /// Distinct successor addresses (transformed space) this site can
    /// dispatch to.
    targets: Vec<VirtualAddress>,
    /// Index (transformed space) of the site's trailing `jmp hop` slot,
    /// for conditional sites.
    jump_idx: Option<usize>,
}

/// Rewrites every direct branch of `program` into the register-dispatch
/// form and appends the trampolines. Architectural behavior is preserved
/// for all inputs; the direct branches that remain are the conditional
/// sites' trampoline jumps and the hops themselves.
pub fn transform(
    program: &Program,
    config: &ZigzaggerConfig,
) -> Result<(Program, TransformReport), TransformError> {
    if program.uses_reserved_reg() {
        return Err(TransformError::ReservedRegisterInUse);
    }
    if let BranchesPerTrampoline::Count(k) = config.branches_per_trampoline {
        if k < 2 {
            return Err(TransformError::GroupTooSmall);
        }
    }

    // Pass 1: size of each original instruction's replacement, giving the
    // old-address -> new-address map.
    let size_of = |ins: &Instruction| -> usize {
        match ins {
            Instruction::CondBranch { .. } => 3, // set / cmov / jmp hop
            Instruction::Jump { .. } => 2,       // set / ijmp tr
            _ => 1,
        }
    };
    let new_base = program.base();
    let mut new_index = Vec::with_capacity(program.len());
    let mut cursor = 0usize;
    for (_, ins) in program.iter() {
        new_index.push(cursor);
        cursor += size_of(ins);
    }
    let body_len = cursor;
    let map_addr = |old: VirtualAddress| -> VirtualAddress {
        let idx = ((old.0 - program.base().0) / STRIDE) as usize;
        let new_idx = new_index.get(idx).copied().unwrap_or(body_len);
        VirtualAddress(new_base.0 + new_idx as u64 * STRIDE)
    };
    let new_addr_of = |idx: usize| VirtualAddress(new_base.0 + idx as u64 * STRIDE);

    // Pass 2: emit rewritten instructions; branch sites leave a placeholder
    // for the hop target, fixed up once trampolines are laid out.
    let remap_op = |op: &Operand| match op {
        Operand::Addr(a) => Operand::Addr(map_addr(*a)),
        other => other.clone(),
    };
    let remap_expr = |e: &Expr| match e {
        Expr::Val(a) => Expr::Val(remap_op(a)),
        Expr::Add(a, b) => Expr::Add(remap_op(a), remap_op(b)),
        Expr::Sub(a, b) => Expr::Sub(remap_op(a), remap_op(b)),
        Expr::And(a, b) => Expr::And(remap_op(a), remap_op(b)),
        Expr::Shl(a, b) => Expr::Shl(remap_op(a), remap_op(b)),
        Expr::Shr(a, b) => Expr::Shr(remap_op(a), remap_op(b)),
        Expr::Eq(a, b) => Expr::Eq(remap_op(a), remap_op(b)),
        Expr::Lt(a, b) => Expr::Lt(remap_op(a), remap_op(b)),
    };

    let mut out: Vec<Instruction> = Vec::with_capacity(body_len);
    let mut sites: Vec<SiteInfo> = Vec::new();
    let mut back_edges = Vec::new();
    let mut passthrough_indirects = 0usize;
    for (orig_idx, (addr, ins)) in program.iter().enumerate() {
        debug_assert_eq!(out.len(), new_index[orig_idx]);
        match ins {
            Instruction::CondBranch { pred, target } => {
                let taken = map_addr(*target);
                let fall = map_addr(VirtualAddress(addr.0 + STRIDE));
                out.push(Instruction::SetReg {
                    dst: TRAMPOLINE_REG,
                    expr: Expr::Val(Operand::Addr(taken)),
                });
                out.push(Instruction::CondMove {
                    pred: *pred,
                    dst: TRAMPOLINE_REG,
                    value: fall,
                });
                let jump_idx = out.len();
                out.push(Instruction::Jump {
                    target: VirtualAddress(0),
                }); // fixed up below
                if *target < addr {
                    back_edges.push(addr);
                }
                sites.push(SiteInfo {
                    orig_idx,
                    conditional: true,
                    targets: vec![taken, fall],
                    jump_idx: Some(jump_idx),
                });
            }
            Instruction::Jump { target } => {
                let dest = map_addr(*target);
                out.push(Instruction::SetReg {
                    dst: TRAMPOLINE_REG,
                    expr: Expr::Val(Operand::Addr(dest)),
                });
                out.push(Instruction::IndirectJump {
                    reg: TRAMPOLINE_REG,
                });
                if *target < addr {
                    back_edges.push(addr);
                }
                sites.push(SiteInfo {
                    orig_idx,
                    conditional: false,
                    targets: vec![dest],
                    jump_idx: None,
                });
            }
            Instruction::IndirectJump { .. } => {
                passthrough_indirects += 1;
                out.push(ins.clone());
            }
            Instruction::SetReg { dst, expr } => {
                out.push(Instruction::SetReg {
                    dst: *dst,
                    expr: remap_expr(expr),
                });
            }
            Instruction::CondMove { pred, dst, value } => {
                out.push(Instruction::CondMove {
                    pred: *pred,
                    dst: *dst,
                    value: map_addr(*value),
                });
            }
            other => out.push(other.clone()),
        }
    }

    // Group conditional sites into trampolines, randomly but seeded.
    let mut cond_site_idx: Vec<usize> =
        (0..sites.len()).filter(|i| sites[*i].conditional).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    cond_site_idx.shuffle(&mut rng);
    let group_size = match config.branches_per_trampoline {
        BranchesPerTrampoline::All => cond_site_idx.len().max(1),
        BranchesPerTrampoline::Count(k) => k,
    };
    let groups: Vec<Vec<usize>> = cond_site_idx
        .chunks(group_size)
        .map(|c| {
            let mut g = c.to_vec();
            // Lexical order inside a trampoline, for reproducible hop
            // wiring.
            g.sort();
            g
        })
        .collect();

    // Lay out trampolines after the body and fix up the site jumps.
    let mut trampolines = Vec::new();
    for group in &groups {
        let first_hop = out.len();
        let dispatch_idx = first_hop + group.len();
        for (pos, &site) in group.iter().enumerate() {
            let hop_idx = first_hop + pos;
            let jump_idx = sites[site].jump_idx.expect("grouped sites are conditional");
            out[jump_idx] = Instruction::Jump {
                target: new_addr_of(hop_idx),
            };
            // Hop chain: each hop jumps to the next, the last one falls
            // into the dispatch below it.
            let next = new_addr_of(hop_idx + 1);
            out.push(Instruction::Jump { target: next });
        }
        out.push(Instruction::IndirectJump {
            reg: TRAMPOLINE_REG,
        });
        trampolines.push((first_hop, dispatch_idx, group.clone()));
    }

    // Unconditional sites attach to the nearest trampoline group for
    // fan-out accounting (their dispatch is register-only).
    let mut fan_targets: Vec<Vec<VirtualAddress>> =
        trampolines.iter().map(|_| Vec::new()).collect();
    for (g, (_, _, group)) in trampolines.iter().enumerate() {
        for &s in group {
            fan_targets[g].extend(sites[s].targets.iter().copied());
        }
    }
    if !trampolines.is_empty() {
        for site in sites.iter().filter(|s| !s.conditional) {
            // Nearest group by original program position.
            let g = trampolines
                .iter()
                .enumerate()
                .min_by_key(|(_, (_, _, group))| {
                    group
                        .iter()
                        .map(|&s| sites[s].orig_idx.abs_diff(site.orig_idx))
                        .min()
                        .unwrap_or(usize::MAX)
                })
                .map(|(g, _)| g)
                .expect("trampoline list is nonempty");
            fan_targets[g].extend(site.targets.iter().copied());
        }
    }

    let labels: BTreeMap<String, VirtualAddress> = program
        .labels()
        .iter()
        .map(|(n, a)| {
            let mapped = if *a == program.end() {
                new_addr_of(body_len)
            } else {
                map_addr(*a)
            };
            (n.clone(), mapped)
        })
        .collect();
    let transformed =
        Program::new(new_base, out, labels).expect("transform emits only in-image targets");

    let trampoline_reports = trampolines
        .iter()
        .zip(&fan_targets)
        .map(|((first_hop, dispatch_idx, group), targets)| {
            let mut distinct = targets.clone();
            distinct.sort();
            distinct.dedup();
            TrampolineReport {
                hops: (0..group.len())
                    .map(|i| new_addr_of(first_hop + i))
                    .collect(),
                dispatch: new_addr_of(*dispatch_idx),
                fan_out: distinct.len(),
            }
        })
        .collect();

    let report = TransformReport {
        trampolines: trampoline_reports,
        converted_conditionals: sites.iter().filter(|s| s.conditional).count(),
        converted_unconditionals: sites.iter().filter(|s| !s.conditional).count(),
        passthrough_indirects,
        back_edges,
        reserved_register: TRAMPOLINE_REG.0,
        seed: config.seed,
    };
    Ok((transformed, report))
}

/// Dynamic-cost comparison of an original/transformed pair over a set of
/// inputs.
#[derive(Clone, Debug, Serialize)]
pub struct OverheadReport {
    /// Per input: (instruction-count ratio, cycle ratio).
    pub per_input: Vec<(f64, f64)>,
    pub geomean_instructions: f64,
    pub geomean_cycles: f64,
}

fn geomean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0u32), |(s, n), v| (s + v.ln(), n + 1));
    if n == 0 {
        1.0
    } else {
        (sum / f64::from(n)).exp()
    }
}

/// Runs both programs on each input and reports dynamic instruction and
/// cycle ratios (transformed / original), aggregated by geometric mean.
pub fn measure_overhead(
    original: &Program,
    transformed: &Program,
    inputs: &[InputMap],
    fuel: u64,
) -> Result<OverheadReport, ExecError> {
    let mut per_input = Vec::with_capacity(inputs.len());
    for input in inputs {
        let a = interpret(original, original.base(), input, fuel)?;
        let b = interpret(transformed, transformed.base(), input, fuel)?;
        per_input.push((
            b.events.len() as f64 / a.events.len() as f64,
            b.cycles as f64 / a.cycles as f64,
        ));
    }
    Ok(OverheadReport {
        geomean_instructions: geomean(per_input.iter().map(|(i, _)| *i)),
        geomean_cycles: geomean(per_input.iter().map(|(_, c)| *c)),
        per_input,
    })
}

/// True when two runs of `program` produce identical executed
/// direct-branch source-address sequences — the events a shadowing
/// attacker can observe by address.
pub fn leakage_check(
    program: &Program,
    input_a: &InputMap,
    input_b: &InputMap,
    fuel: u64,
) -> Result<bool, ExecError> {
    let a = interpret(program, program.base(), input_a, fuel)?;
    let b = interpret(program, program.base(), input_b, fuel)?;
    Ok(a.direct_branch_sources(program) == b.direct_branch_sources(program))
}
