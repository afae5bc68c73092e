use proptest::prelude::*;

use super::*;

fn inputs(pairs: &[(&str, u64)]) -> InputMap {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

const DIAMOND: &str = r#"
# if (bit) r1 = 7; else r1 = 9
.base 0x10000
entry:
    set r0, $bit
    cbr r0, then
    set r1, 9
    jmp join
then:
    set r1, 7
join:
    halt
"#;

#[test]
fn assemble_diamond_and_run_both_arms() {
    let p = assemble(DIAMOND).unwrap();
    assert_eq!(p.base(), VirtualAddress(0x10000));
    assert_eq!(p.len(), 6);
    assert_eq!(p.label("then"), Some(VirtualAddress(0x10010)));

    let t = interpret(&p, p.base(), &inputs(&[("bit", 1)]), 100).unwrap();
    assert_eq!(t.final_regs[1], 7);
    assert!(!t.fuel_exhausted);
    assert_eq!(
        t.conditional_outcomes(&p),
        vec![(VirtualAddress(0x10004), true)]
    );

    let t = interpret(&p, p.base(), &inputs(&[("bit", 0)]), 100).unwrap();
    assert_eq!(t.final_regs[1], 9);
    assert_eq!(
        t.conditional_outcomes(&p),
        vec![(VirtualAddress(0x10004), false)]
    );
    // The not-taken arm executes the join jump too.
    assert_eq!(
        t.direct_branch_sources(&p),
        vec![VirtualAddress(0x10004), VirtualAddress(0x1000c)]
    );
}

#[test]
fn print_assemble_round_trip() {
    let src = r#"
.base 0x20000
loop:
    compute 12
    set r2, add r2, 1
    set r3, lt r2, $n
    set r4, and r3, -1
    set r5, &loop
    cmov r3, r5, done
    ijmp r5
done:
    set r6, eq r2, $n
    set r7, shl r6, 3
    set r8, shr r7, 0x2
    set r9, sub r8, r7
    cbr r3, loop
    halt
end:
"#;
    let p = assemble(src).unwrap();
    let printed = p.print();
    let p2 = assemble(&printed).unwrap();
    assert_eq!(p, p2);
    // And printing is a fixed point.
    assert_eq!(printed, p2.print());
}

#[test]
fn assemble_errors() {
    let dup = "a:\n halt\na:\n halt\n";
    assert!(matches!(
        assemble(dup),
        Err(AsmError::DuplicateLabel { .. })
    ));

    let unresolved = "jmp nowhere\n";
    assert!(matches!(
        assemble(unresolved),
        Err(AsmError::UnresolvedLabel { .. })
    ));

    let outside = ".base 0x1000\njmp 0x9000\n";
    assert!(matches!(
        assemble(outside),
        Err(AsmError::TargetOutsideImage { .. })
    ));

    let syntax = "frobnicate r1\n";
    assert!(matches!(assemble(syntax), Err(AsmError::Syntax { .. })));

    let badreg = "set r16, 0\n";
    assert!(matches!(assemble(badreg), Err(AsmError::Syntax { .. })));
}

#[test]
fn reserved_register_detection() {
    let clean = assemble(DIAMOND).unwrap();
    assert!(!clean.uses_reserved_reg());
    let dirty = assemble("set tr, 5\nhalt\n").unwrap();
    assert!(dirty.uses_reserved_reg());
    let dirty = assemble("a: ijmp tr\n").unwrap();
    assert!(dirty.uses_reserved_reg());
}

#[test]
fn interpreter_is_deterministic() {
    let p = assemble(DIAMOND).unwrap();
    let i = inputs(&[("bit", 1)]);
    let a = interpret(&p, p.base(), &i, 100).unwrap();
    let b = interpret(&p, p.base(), &i, 100).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cycle_accounting_sums_costs() {
    let src = "compute 10\ncompute 3\nhalt\n";
    let p = assemble(src).unwrap();
    let t = interpret(&p, p.base(), &InputMap::new(), 100).unwrap();
    assert_eq!(t.cycles, 10 + 3 + 1);
}

#[test]
fn fuel_exhaustion_is_flagged_not_fatal() {
    let src = "spin: jmp spin\n";
    let p = assemble(src).unwrap();
    let t = interpret(&p, p.base(), &InputMap::new(), 25).unwrap();
    assert!(t.fuel_exhausted);
    assert_eq!(t.events.len(), 25);
    assert_eq!(
        interpret(&p, p.base(), &InputMap::new(), 0),
        Err(ExecError::ZeroFuel)
    );
}

#[test]
fn unbound_input_errors() {
    let p = assemble("set r0, $missing\nhalt\n").unwrap();
    let err = interpret(&p, p.base(), &InputMap::new(), 10).unwrap_err();
    assert!(matches!(err, ExecError::UnboundInput { name, .. } if name == "missing"));
}

#[test]
fn wild_indirect_jump_errors() {
    let p = assemble("set r0, 0xdead0000\nijmp r0\n").unwrap();
    let err = interpret(&p, p.base(), &InputMap::new(), 10).unwrap_err();
    assert!(matches!(
        err,
        ExecError::BadIndirectTarget {
            reg: Reg(0),
            value: 0xdead_0000,
            ..
        }
    ));
}

#[test]
fn cmov_writes_only_on_zero_predicate() {
    // cmov is the cmovz idiom: the move happens when the predicate is zero.
    let src = r#"
t0:
    set r0, $p
    set r1, &t0
    cmov r0, r1, other
other:
    halt
"#;
    let p = assemble(src).unwrap();
    let t = interpret(&p, p.base(), &inputs(&[("p", 0)]), 10).unwrap();
    assert_eq!(t.final_regs[1], p.label("other").unwrap().0);
    let t = interpret(&p, p.base(), &inputs(&[("p", 1)]), 10).unwrap();
    assert_eq!(t.final_regs[1], p.base().0);
    // cmov never emits a branch event.
    assert!(t.events.iter().all(|e| e.branch.is_none()
        || !matches!(p.instruction_at(e.addr), Some(Instruction::CondMove { .. }))));
}

#[test]
fn indirect_dispatch_follows_register() {
    let src = r#"
.base 0x10000
    set r0, $sel
    set r1, &a
    cmov r0, r1, b     # r1 = &b when sel == 0
    ijmp r1
a:
    set r2, 1
    halt
b:
    set r2, 2
    halt
"#;
    let p = assemble(src).unwrap();
    let t = interpret(&p, p.base(), &inputs(&[("sel", 1)]), 20).unwrap();
    assert_eq!(t.final_regs[2], 1);
    let t = interpret(&p, p.base(), &inputs(&[("sel", 0)]), 20).unwrap();
    assert_eq!(t.final_regs[2], 2);
    // The indirect jump records its resolved destination.
    let ij = t
        .events
        .iter()
        .find(|e| {
            matches!(
                p.instruction_at(e.addr),
                Some(Instruction::IndirectJump { .. })
            )
        })
        .unwrap();
    assert_eq!(ij.branch.unwrap().target, p.label("b").unwrap());
}

proptest! {
    /// Relocation shifts every event address by the base delta and changes
    /// nothing else observable (register effects, cycle counts, outcomes).
    #[test]
    fn relocation_preserves_behavior(new_page in 1u64..0x7000, bit in 0u64..2) {
        let p = assemble(DIAMOND).unwrap();
        let new_base = VirtualAddress(new_page << 16);
        let q = p.relocate(new_base);
        prop_assert_eq!(q.base(), new_base);
        let i = inputs(&[("bit", bit)]);
        let tp = interpret(&p, p.base(), &i, 100).unwrap();
        let tq = interpret(&q, q.base(), &i, 100).unwrap();
        let delta = new_base.0.wrapping_sub(p.base().0);
        prop_assert_eq!(tp.events.len(), tq.events.len());
        for (ep, eq) in tp.events.iter().zip(&tq.events) {
            prop_assert_eq!(ep.addr.0.wrapping_add(delta), eq.addr.0);
            match (ep.branch, eq.branch) {
                (Some(bp), Some(bq)) => {
                    prop_assert_eq!(bp.taken, bq.taken);
                    prop_assert_eq!(bp.target.0.wrapping_add(delta), bq.target.0);
                }
                (None, None) => {}
                _ => prop_assert!(false, "branch shape changed"),
            }
        }
        prop_assert_eq!(tp.cycles, tq.cycles);
        prop_assert_eq!(tp.final_regs[1], tq.final_regs[1]);
    }

    /// Round trip through text for programs with absolute (label-free)
    /// targets.
    #[test]
    fn hex_targets_round_trip(n in 1usize..6) {
        let mut src = String::from(".base 0x30000\n");
        for i in 0..n {
            src.push_str(&format!("cbr r{i}, {:#x}\n", 0x30000 + 4 * (n - 1)));
        }
        src.push_str("halt\n");
        let p = assemble(&src).unwrap();
        prop_assert_eq!(assemble(&p.print()).unwrap(), p);
    }
}
