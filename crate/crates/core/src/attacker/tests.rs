use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::harness::Session;
use crate::ir::{assemble, BranchKind, InputMap, Program, VirtualAddress};
use crate::uarch::{aliases, Channel, Lbr, LbrContext, PredictorMode, TimingModel, Uarch};

fn inputs(pairs: &[(&str, u64)]) -> InputMap {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn run_victim(src: &str, input: &InputMap, uarch: &mut Uarch, lbr: &mut Lbr) -> Program {
    let p = assemble(src).unwrap();
    let mut s = Session::new(&p, p.base(), input.clone(), LbrContext::Protected);
    s.run(uarch, lbr, 10_000).unwrap();
    p
}

const COND_VICTIM: &str = r#"
.base 0x40000
    set r0, $p
    cbr r0, tgt
    halt
tgt:
    halt
"#;

fn cond_descriptor() -> BranchDescriptor {
    BranchDescriptor {
        addr: VirtualAddress(0x40004),
        kind: BranchKind::Conditional,
        target: Some(VirtualAddress(0x4000c)),
    }
}

#[test]
fn shadow_branch_aliases_target() {
    // Forward and backward taken targets both produce aliased layouts.
    for (a, t) in [
        (0x40004u64, 0x4000cu64),
        (0x4000c, 0x40004),
        (0x7_0010, 0x6_fff0),
    ] {
        let d = BranchDescriptor {
            addr: VirtualAddress(a),
            kind: BranchKind::Conditional,
            target: Some(VirtualAddress(t)),
        };
        let probe = make_shadow(d, ProbeKind::Conditional).unwrap();
        assert!(aliases(probe.shadow_branch, d.addr));
        assert_eq!(probe.shadow_branch.0, a + SHADOW_OFFSET);
        assert!(probe.shadow.instruction_at(probe.entry).is_some());
    }
    let d = BranchDescriptor {
        addr: VirtualAddress(0x40004),
        kind: BranchKind::Indirect,
        target: None,
    };
    let probe = make_shadow(d, ProbeKind::Indirect).unwrap();
    assert!(aliases(probe.shadow_branch, d.addr));
}

#[test]
fn make_shadow_rejects_mismatches() {
    let d = cond_descriptor();
    assert!(matches!(
        make_shadow(d, ProbeKind::Unconditional),
        Err(ShadowError::KindMismatch { .. })
    ));
    let no_target = BranchDescriptor { target: None, ..d };
    assert!(matches!(
        make_shadow(no_target, ProbeKind::Conditional),
        Err(ShadowError::MissingTarget(_))
    ));
    // Taken target on the setup slot directly before the branch.
    let clash = BranchDescriptor {
        target: Some(VirtualAddress(0x40000)),
        ..d
    };
    assert!(matches!(
        make_shadow(clash, ProbeKind::Conditional),
        Err(ShadowError::LayoutConflict { .. })
    ));
}

#[test]
fn conditional_probe_reads_taken_state() {
    // Case 1: the victim branch was taken.
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    run_victim(COND_VICTIM, &inputs(&[("p", 1)]), &mut uarch, &mut lbr);
    let probe = make_shadow(cond_descriptor(), ProbeKind::Conditional).unwrap();
    let r = probe_conditional(&probe, &mut uarch, &mut lbr).unwrap();
    assert_eq!(r.label, Inference::Taken);

    // Case 2: the victim branch executed not-taken.
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    run_victim(COND_VICTIM, &inputs(&[("p", 0)]), &mut uarch, &mut lbr);
    let r = probe_conditional(&probe, &mut uarch, &mut lbr).unwrap();
    assert_eq!(r.label, Inference::NotTakenOrNotExecuted);

    // Never executed: indistinguishable from not-taken.
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    let r = probe_conditional(&probe, &mut uarch, &mut lbr).unwrap();
    assert_eq!(r.label, Inference::NotTakenOrNotExecuted);
}

#[test]
fn conditional_probe_is_deterministic_given_history() {
    let probe = make_shadow(cond_descriptor(), ProbeKind::Conditional).unwrap();
    for p in [0u64, 1] {
        let want = if p == 1 {
            Inference::Taken
        } else {
            Inference::NotTakenOrNotExecuted
        };
        for _ in 0..1000 {
            let mut uarch = Uarch::new(PredictorMode::BtbOnly);
            let mut lbr = Lbr::new();
            run_victim(COND_VICTIM, &inputs(&[("p", p)]), &mut uarch, &mut lbr);
            let r = probe_conditional(&probe, &mut uarch, &mut lbr).unwrap();
            assert_eq!(r.label, want);
        }
    }
}

const UNCOND_VICTIM: &str = r#"
.base 0x40000
    jmp over
    halt
over:
    halt
"#;

fn uncond_descriptor() -> BranchDescriptor {
    BranchDescriptor {
        addr: VirtualAddress(0x40000),
        kind: BranchKind::Unconditional,
        target: Some(VirtualAddress(0x40008)),
    }
}

/// A noiseless debug model: disjoint constants per class.
fn exact_model() -> TimingModel {
    TimingModel::with_params(
        Channel::LbrCycles,
        crate::uarch::ChannelParams {
            mean_correct: 10.0,
            sd_correct: 0.0,
            mean_mispredict: 30.0,
            sd_mispredict: 0.0,
        },
    )
}

#[test]
fn unconditional_probe_reads_execution_state() {
    let model = exact_model();
    let threshold = derive_threshold(&model.params).unwrap();
    let probe = make_shadow(uncond_descriptor(), ProbeKind::Unconditional).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // Case 3: the victim executed the jump; its stored target forces a
    // target mispredict in the shadow.
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    run_victim(UNCOND_VICTIM, &InputMap::new(), &mut uarch, &mut lbr);
    let r = probe_unconditional(
        &probe, &mut uarch, &mut lbr, &mut rng, &model, &threshold, 1,
    )
    .unwrap();
    assert_eq!(r.label, Inference::Executed);
    assert_eq!(r.confidence, 1.0);

    // Case 4: never executed; the shadow's static target predicts fine.
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    let r = probe_unconditional(
        &probe, &mut uarch, &mut lbr, &mut rng, &model, &threshold, 1,
    )
    .unwrap();
    assert_eq!(r.label, Inference::NotExecuted);
    assert_eq!(r.confidence, 1.0);
}

#[test]
fn unconditional_probe_rejects_zero_repeats() {
    let model = exact_model();
    let threshold = derive_threshold(&model.params).unwrap();
    let probe = make_shadow(uncond_descriptor(), ProbeKind::Unconditional).unwrap();
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = probe_unconditional(
        &probe, &mut uarch, &mut lbr, &mut rng, &model, &threshold, 0,
    )
    .unwrap_err();
    assert_eq!(err, ProbeError::ZeroRepeats);
}

const INDIRECT_VICTIM: &str = r#"
.base 0x40000
    set r1, &dest
    ijmp r1
    halt
dest:
    halt
"#;

fn indirect_descriptor() -> BranchDescriptor {
    BranchDescriptor {
        addr: VirtualAddress(0x40004),
        kind: BranchKind::Indirect,
        target: None,
    }
}

#[test]
fn indirect_probe_reads_execution_state() {
    let probe = make_shadow(indirect_descriptor(), ProbeKind::Indirect).unwrap();

    // Case 5: executed.
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    run_victim(INDIRECT_VICTIM, &InputMap::new(), &mut uarch, &mut lbr);
    let r = probe_indirect(&probe, &mut uarch, &mut lbr).unwrap();
    assert_eq!(r.label, Inference::Executed);

    // Case 6: not executed.
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    let r = probe_indirect(&probe, &mut uarch, &mut lbr).unwrap();
    assert_eq!(r.label, Inference::NotExecuted);
}

#[test]
fn indirect_to_own_next_instruction_is_a_blind_spot() {
    // The victim's indirect target is its own fall-through address, which
    // is exactly what the shadow predicts on a cold BTB, so the probe reads
    // NotExecuted despite execution.
    let src = r#"
.base 0x40000
    set r1, &next
    ijmp r1
next:
    halt
"#;
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    run_victim(src, &InputMap::new(), &mut uarch, &mut lbr);
    let probe = make_shadow(indirect_descriptor(), ProbeKind::Indirect).unwrap();
    let r = probe_indirect(&probe, &mut uarch, &mut lbr).unwrap();
    assert_eq!(r.label, Inference::NotExecuted);
}

#[test]
fn probe_kind_mismatch_rejected() {
    let probe = make_shadow(cond_descriptor(), ProbeKind::Conditional).unwrap();
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    assert!(matches!(
        probe_indirect(&probe, &mut uarch, &mut lbr),
        Err(ProbeError::KindMismatch { .. })
    ));
}

const SWITCH_VICTIM: &str = r#"
.base 0x50000
    set r0, &c2
    ijmp r0
c0: halt
c1: halt
c2: halt
c3: halt
c4: halt
"#;

#[test]
fn indirect_target_recovery_over_candidates() {
    let victim = assemble(SWITCH_VICTIM).unwrap();
    let branch = VirtualAddress(0x50004);
    let candidates: Vec<VirtualAddress> = (0..5)
        .map(|i| victim.label(&format!("c{i}")).unwrap())
        .collect();
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    let rerun = |uarch: &mut Uarch, lbr: &mut Lbr| {
        let mut s = Session::new(
            &victim,
            victim.base(),
            InputMap::new(),
            LbrContext::Protected,
        );
        s.run(uarch, lbr, 100).unwrap();
    };

    let found = infer_indirect_target(branch, &candidates, &mut uarch, &mut lbr, rerun).unwrap();
    assert_eq!(found, Some(candidates[2]));

    // Single correct candidate.
    let found =
        infer_indirect_target(branch, &candidates[2..3], &mut uarch, &mut lbr, rerun).unwrap();
    assert_eq!(found, Some(candidates[2]));

    // Empty candidate list.
    let found = infer_indirect_target(branch, &[], &mut uarch, &mut lbr, rerun).unwrap();
    assert_eq!(found, None);

    // All-wrong candidates.
    let wrong = [candidates[0], candidates[4]];
    let found = infer_indirect_target(branch, &wrong, &mut uarch, &mut lbr, rerun).unwrap();
    assert_eq!(found, None);
}

#[test]
fn eviction_monitor_detects_same_set_activity() {
    let watched = VirtualAddress(0x40004);
    let monitor = EvictionMonitor::for_address(watched);
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    monitor.prime(&mut uarch);

    // Quiet: nothing evicted.
    assert!(!monitor.check(&mut uarch));

    // A victim branch in the same set displaces one way.
    uarch.btb.insert(watched, VirtualAddress(watched.0 + 4));
    assert!(monitor.check(&mut uarch));
    // check() re-primed, so a quiet interval reads clean again.
    assert!(!monitor.check(&mut uarch));

    // Activity in a different set is invisible.
    let elsewhere = VirtualAddress(0x40004 + 0x100);
    uarch.btb.insert(elsewhere, VirtualAddress(elsewhere.0 + 4));
    assert!(!monitor.check(&mut uarch));
}

#[test]
fn locates_the_active_function() {
    // Two "functions", each with an always-taken prologue branch.
    let f1 = r#"
.base 0x60000
    set r0, 1
    cbr r0, body
body:
    halt
"#;
    let f2 = r#"
.base 0x70000
    set r0, 1
    cbr r0, body
body:
    halt
"#;
    let d1 = BranchDescriptor {
        addr: VirtualAddress(0x60004),
        kind: BranchKind::Conditional,
        target: Some(VirtualAddress(0x60008)),
    };
    let d2 = BranchDescriptor {
        addr: VirtualAddress(0x70004),
        kind: BranchKind::Conditional,
        target: Some(VirtualAddress(0x70008)),
    };
    let prologues = vec![
        (
            "f1".to_string(),
            make_shadow(d1, ProbeKind::Conditional).unwrap(),
        ),
        (
            "f2".to_string(),
            make_shadow(d2, ProbeKind::Conditional).unwrap(),
        ),
    ];

    // Only f1 ran.
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    run_victim(f1, &InputMap::new(), &mut uarch, &mut lbr);
    assert_eq!(
        locate_active_function(&prologues, &mut uarch, &mut lbr).unwrap(),
        Some("f1".to_string())
    );

    // Nothing ran.
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    assert_eq!(
        locate_active_function(&prologues, &mut uarch, &mut lbr).unwrap(),
        None
    );

    // Both ran: ambiguous.
    let mut uarch = Uarch::new(PredictorMode::BtbOnly);
    let mut lbr = Lbr::new();
    run_victim(f1, &InputMap::new(), &mut uarch, &mut lbr);
    run_victim(f2, &InputMap::new(), &mut uarch, &mut lbr);
    assert_eq!(
        locate_active_function(&prologues, &mut uarch, &mut lbr).unwrap(),
        None
    );
}

fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Closed-form single-probe accuracy at a threshold, equal priors.
fn bayes_accuracy(params: &crate::uarch::ChannelParams, t: f64) -> f64 {
    let p_correct = phi((t - params.mean_correct) / params.sd_correct);
    let p_mispredict = 1.0 - phi((t - params.mean_mispredict) / params.sd_mispredict);
    0.5 * (p_correct + p_mispredict)
}

#[test]
fn threshold_is_the_curve_intersection() {
    for ch in Channel::ALL {
        let params = crate::uarch::default_params(ch);
        let t = derive_threshold(&params).unwrap().boundary;
        assert!(
            params.mean_correct < t && t < params.mean_mispredict,
            "{}: {t}",
            ch.name()
        );
        // Independent check: bisection for the crossing of the two bell
        // curves between the means.
        let bell = |m: f64, s: f64, x: f64| (-((x - m) * (x - m)) / (2.0 * s * s)).exp();
        let f = |x: f64| {
            bell(params.mean_correct, params.sd_correct, x)
                - bell(params.mean_mispredict, params.sd_mispredict, x)
        };
        let (mut lo, mut hi) = (params.mean_correct, params.mean_mispredict);
        assert!(f(lo) > 0.0 && f(hi) < 0.0);
        for _ in 0..200 {
            let mid = (lo + hi) / 2.0;
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = (lo + hi) / 2.0;
        assert!((t - oracle).abs() < 1e-6, "{}: {t} vs {oracle}", ch.name());
        // Equal-error-rate property: both standardized distances agree.
        let z1 = (t - params.mean_correct) / params.sd_correct;
        let z2 = (params.mean_mispredict - t) / params.sd_mispredict;
        assert!((z1 - z2).abs() < 1e-9);
    }
}

#[test]
fn threshold_equal_sigmas_is_midpoint() {
    let params = crate::uarch::ChannelParams {
        mean_correct: 10.0,
        sd_correct: 2.0,
        mean_mispredict: 30.0,
        sd_mispredict: 2.0,
    };
    assert_eq!(derive_threshold(&params).unwrap().boundary, 20.0);
}

#[test]
fn threshold_equal_means_is_degenerate() {
    let params = crate::uarch::ChannelParams {
        mean_correct: 10.0,
        sd_correct: 2.0,
        mean_mispredict: 10.0,
        sd_mispredict: 5.0,
    };
    assert_eq!(
        derive_threshold(&params),
        Err(ThresholdError::Degenerate(10.0))
    );
}

/// Monte Carlo single-probe accuracy for one channel at its derived
/// threshold.
fn monte_carlo_accuracy(ch: Channel, n: u32, seed: u64) -> f64 {
    let model = TimingModel::new(ch);
    let t = derive_threshold(&model.params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u32;
    for i in 0..n {
        let mispredicted = i % 2 == 0;
        let classified = t.classifies_mispredict(model.sample(&mut rng, mispredicted));
        if classified == mispredicted {
            hits += 1;
        }
    }
    f64::from(hits) / f64::from(n)
}

#[test]
fn single_probe_accuracy_matches_closed_form() {
    for ch in Channel::ALL {
        let params = crate::uarch::default_params(ch);
        let t = derive_threshold(&params).unwrap().boundary;
        let want = bayes_accuracy(&params, t);
        let got = monte_carlo_accuracy(ch, 400_000, 11);
        assert!((got - want).abs() < 0.005, "{}: {got} vs {want}", ch.name());
    }
    // The LBR channel's single-probe accuracy is the textbook ≈0.68.
    let params = crate::uarch::default_params(Channel::LbrCycles);
    let t = derive_threshold(&params).unwrap().boundary;
    let lbr_acc = bayes_accuracy(&params, t);
    assert!((lbr_acc - 0.68).abs() < 0.02, "lbr accuracy {lbr_acc}");
}

#[test]
fn channel_accuracy_ordering() {
    let acc: Vec<f64> = [Channel::LbrCycles, Channel::PtCycle, Channel::Rdtscp]
        .into_iter()
        .map(|ch| monte_carlo_accuracy(ch, 400_000, 13))
        .collect();
    assert!(acc[0] > acc[1] && acc[1] > acc[2], "{acc:?}");
}

#[test]
fn majority_vote_pushes_campaign_accuracy_past_95_percent() {
    let model = TimingModel::new(Channel::LbrCycles);
    let threshold = derive_threshold(&model.params).unwrap();
    let probe = make_shadow(uncond_descriptor(), ProbeKind::Unconditional).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let trials = 400;
    let mut hits = 0u32;
    for i in 0..trials {
        let executed = i % 2 == 0;
        let mut uarch = Uarch::new(PredictorMode::BtbOnly);
        let mut lbr = Lbr::new();
        if executed {
            run_victim(UNCOND_VICTIM, &InputMap::new(), &mut uarch, &mut lbr);
        }
        let r = probe_unconditional(
            &probe, &mut uarch, &mut lbr, &mut rng, &model, &threshold, 25,
        )
        .unwrap();
        if r.label.positive() == executed {
            hits += 1;
        }
    }
    let acc = f64::from(hits) / f64::from(trials);
    assert!(acc >= 0.95, "campaign accuracy {acc}");
}

const DIAMOND_LOOP: &str = r#"
.base 0x10000
    set r0, 0
    set r2, $bits
loop:
    set r1, and r2, 1
    set r2, shr r2, 1
    cbr r1, odd
    compute 3
    jmp join
odd:
    compute 5
join:
    set r0, add r0, 1
    set r3, lt r0, 4
    cbr r3, loop
    halt
"#;

#[test]
fn reconstruction_replays_a_real_trace() {
    // Build observations straight from the architectural trace, then check
    // the walker recovers exactly that trace's decisions and path.
    let p = assemble(DIAMOND_LOOP).unwrap();
    let input = inputs(&[("bits", 0b1010)]);
    let trace = crate::ir::interpret(&p, p.base(), &input, 10_000).unwrap();
    let truth = trace.conditional_outcomes(&p);
    let observations: Vec<BranchObservation> = truth
        .iter()
        .map(|&(addr, taken)| BranchObservation {
            addr,
            label: if taken {
                Inference::Taken
            } else {
                Inference::NotTakenOrNotExecuted
            },
        })
        .collect();
    let rec = reconstruct_control_flow(&p, p.base(), &observations, 10_000).unwrap();
    assert_eq!(rec.decisions, truth);
    assert_eq!(rec.unused_observations, 0);
    let executed: Vec<VirtualAddress> = trace.events.iter().map(|e| e.addr).collect();
    assert_eq!(rec.path, executed);
}

#[test]
fn reconstruction_error_paths() {
    let p = assemble(DIAMOND_LOOP).unwrap();
    let err = reconstruct_control_flow(&p, p.base(), &[], 10_000).unwrap_err();
    assert!(matches!(err, ReconstructError::MissingObservation { .. }));

    let wrong = [BranchObservation {
        addr: VirtualAddress(0xdead0),
        label: Inference::Taken,
    }];
    let err = reconstruct_control_flow(&p, p.base(), &wrong, 10_000).unwrap_err();
    assert!(matches!(
        err,
        ReconstructError::WrongBranch { index: 0, .. }
    ));

    let bad = [BranchObservation {
        addr: p.label("loop").unwrap().offset(8),
        label: Inference::Executed,
    }];
    let err = reconstruct_control_flow(&p, p.base(), &bad, 10_000).unwrap_err();
    assert!(matches!(err, ReconstructError::BadLabel { .. }));

    let ind = assemble(INDIRECT_VICTIM).unwrap();
    let err = reconstruct_control_flow(&ind, ind.base(), &[], 10_000).unwrap_err();
    assert!(matches!(err, ReconstructError::IndirectOnPath { .. }));

    let spin = assemble("spin: jmp spin\n").unwrap();
    let err = reconstruct_control_flow(&spin, spin.base(), &[], 50).unwrap_err();
    assert_eq!(err, ReconstructError::NoHalt(50));
}

#[test]
fn shadow_overlap_detection() {
    let probe = make_shadow(cond_descriptor(), ProbeKind::Conditional).unwrap();
    let near = probe.shadow.relocate(probe.shadow.base().offset(4));
    assert!(probe.overlaps(&near));
    let far = probe.shadow.relocate(VirtualAddress(0x10_0000));
    assert!(!probe.overlaps(&far));
}
