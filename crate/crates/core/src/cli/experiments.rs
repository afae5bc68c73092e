//! The experiment drivers behind the subcommands: attack campaigns,
//! flush-period sweeps, balanced per-branch probe accuracy, and the
//! timing-channel sample table.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::attacker::{
    make_shadow, probe_conditional, reconstruct_control_flow, BranchDescriptor, BranchObservation,
    ProbeKind, ShadowError, ShadowProbe,
};
use crate::harness::{
    run_with_interrupts, FlushPolicy, HarnessError, InterruptModel, ProbeRow, RunReport, Session,
};
use crate::ir::{InputMap, Instruction, Program, VirtualAddress, STRIDE};
use crate::uarch::{default_params, Channel, Lbr, LbrContext, PredictorMode, TimingModel, Uarch};
use crate::victims::{self, VictimSpec, VICTIM_FUEL};
use crate::zigzagger::{transform, TransformError, ZigzaggerConfig};

use super::config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("shadow synthesis failed: {0}")]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("zigzagger failed: {0}")]
    Transform(#[from] TransformError),
    #[error("no victim named `{0}`")]
    UnknownVictim(String),
    #[error("period list is empty")]
    NoPeriods,
}

/// Builds one conditional shadow probe per conditional branch of `program`.
pub fn conditional_probe_map(
    program: &Program,
) -> Result<BTreeMap<VirtualAddress, ShadowProbe>, ShadowError> {
    let mut map = BTreeMap::new();
    for (addr, ins) in program.iter() {
        if let Instruction::CondBranch { target, .. } = ins {
            let probe = make_shadow(
                BranchDescriptor {
                    addr,
                    kind: crate::ir::BranchKind::Conditional,
                    target: Some(*target),
                },
                ProbeKind::Conditional,
            )?;
            map.insert(addr, probe);
        }
    }
    Ok(map)
}

/// One interrupted run with per-instruction (lockstep-style) CFG tracking:
/// after each window the attacker advances its own walk of `attacked` by
/// one instruction and, at conditionals, probes the shadow and follows the
/// inferred edge. Returns the recovered leak (if reconstruction and
/// decoding succeed) and the harness report.
#[allow(clippy::too_many_arguments)]
pub fn run_flag_attack(
    victim: &VictimSpec,
    attacked: &Program,
    probes: &BTreeMap<VirtualAddress, ShadowProbe>,
    input: &InputMap,
    interrupts: &InterruptModel,
    flush: FlushPolicy,
    predictor: PredictorMode,
    seed: u64,
    run_id: u64,
) -> Result<(Option<Value>, RunReport), ExperimentError> {
    let mut uarch = Uarch::new(predictor);
    let mut walk_pc = attacked.base();
    let mut walk_dead = false;
    let mut observations: Vec<BranchObservation> = Vec::new();

    let report = run_with_interrupts(
        attacked,
        attacked.base(),
        input,
        interrupts,
        flush,
        VICTIM_FUEL,
        seed,
        run_id,
        &mut uarch,
        &mut |ctx| {
            if walk_dead {
                return Ok(vec![]);
            }
            let Some(ins) = attacked.instruction_at(walk_pc) else {
                walk_dead = true;
                return Ok(vec![]);
            };
            match ins {
                Instruction::CondBranch { target, .. } => {
                    let probe = &probes[&walk_pc];
                    let result =
                        probe_conditional(probe, ctx.uarch, ctx.lbr).map_err(|e| e.to_string())?;
                    observations.push(BranchObservation {
                        addr: walk_pc,
                        label: result.label,
                    });
                    let taken = result.label.positive();
                    walk_pc = if taken {
                        *target
                    } else {
                        VirtualAddress(walk_pc.0 + STRIDE)
                    };
                    Ok(vec![ProbeRow {
                        probe_kind: ProbeKind::Conditional.name().to_string(),
                        target_addr: probe.target.addr,
                        observation: format!("predicted={taken}"),
                        inference: result.label.name().to_string(),
                    }])
                }
                Instruction::Jump { target } => {
                    walk_pc = *target;
                    Ok(vec![])
                }
                Instruction::IndirectJump { .. } => {
                    walk_dead = true;
                    Ok(vec![])
                }
                Instruction::Halt => Ok(vec![]),
                _ => {
                    walk_pc = VirtualAddress(walk_pc.0 + STRIDE);
                    Ok(vec![])
                }
            }
        },
    )?;

    let recovered = if walk_dead || report.fuel_exhausted {
        None
    } else {
        reconstruct_control_flow(attacked, attacked.base(), &observations, VICTIM_FUEL)
            .ok()
            .and_then(|r| victim.decode_with(attacked, &r.decisions))
    };
    Ok((recovered, report))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialOutcome {
    pub trial: u64,
    pub ok: bool,
    pub recovered: Option<Value>,
    pub interrupts: usize,
    pub instructions: u64,
    pub cycles: u64,
    pub ipc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CampaignResult {
    pub victim: String,
    pub accuracy: f64,
    pub mean_ipc: f64,
    pub trials: Vec<TrialOutcome>,
}

fn trial_seed(seed: u64, trial: u64) -> u64 {
    seed.wrapping_add((trial + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Runs the configured attack campaign. Trials run in parallel with
/// per-trial derived seeds and are sorted afterwards, so the output is
/// identical to a sequential run.
pub fn attack_campaign(cfg: &ExperimentConfig) -> Result<CampaignResult, ExperimentError> {
    let victim = victims::by_name(&cfg.victim)
        .ok_or_else(|| ExperimentError::UnknownVictim(cfg.victim.clone()))?;
    let attacked = match cfg.zigzag {
        None => victim.program.clone(),
        Some(k) => {
            transform(
                &victim.program,
                &ZigzaggerConfig {
                    branches_per_trampoline: k,
                    seed: cfg.seed,
                },
            )?
            .0
        }
    };
    let probes = conditional_probe_map(&attacked)?;
    let interrupts = cfg.interrupts();

    let mut trials = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, trial));
            let input = victim.gen_input(&mut rng);
            let truth = victim.ground_truth(&input);
            let (recovered, report) = run_flag_attack(
                &victim,
                &attacked,
                &probes,
                &input,
                &interrupts,
                cfg.flush,
                cfg.predictor,
                rng.random(),
                trial,
            )?;
            Ok(TrialOutcome {
                trial,
                ok: recovered.as_ref() == Some(&truth),
                recovered,
                interrupts: report.interrupts,
                instructions: report.total_instructions,
                cycles: report.total_cycles,
                ipc: report.ipc_proxy,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    trials.sort_by_key(|t| t.trial);

    let accuracy = trials.iter().filter(|t| t.ok).count() as f64 / trials.len() as f64;
    let mean_ipc = trials.iter().map(|t| t.ipc).sum::<f64>() / trials.len() as f64;
    Ok(CampaignResult {
        victim: cfg.victim.clone(),
        accuracy,
        mean_ipc,
        trials,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepRow {
    pub period: u64,
    pub accuracy: f64,
    pub mean_ipc: f64,
}

/// Re-runs the campaign across periodic-flush periods.
pub fn sweep_flush(
    cfg: &ExperimentConfig,
    periods: &[u64],
) -> Result<Vec<SweepRow>, ExperimentError> {
    if periods.is_empty() {
        return Err(ExperimentError::NoPeriods);
    }
    periods
        .iter()
        .map(|&period| {
            let mut sub = cfg.clone();
            sub.flush = FlushPolicy::Periodic { period };
            let result = attack_campaign(&sub)?;
            Ok(SweepRow {
                period,
                accuracy: result.accuracy,
                mean_ipc: result.mean_ipc,
            })
        })
        .collect()
}

/// Balanced per-branch inference accuracy: each probe runs a fresh victim
/// on a random input, then probes its fair-coin branch once. Without
/// flushing the BTB readout is deterministic (accuracy 1); with
/// flush-on-switch every probe faces a cold predictor and accuracy falls
/// to the 50% base rate.
pub fn balanced_probe_accuracy(
    flush: FlushPolicy,
    probes: u64,
    seed: u64,
) -> Result<f64, ExperimentError> {
    let corpus = victims::all();
    let probe_for: Vec<ShadowProbe> = corpus
        .iter()
        .map(|v| {
            let Some(Instruction::CondBranch { target, .. }) =
                v.program.instruction_at(v.balanced_branch)
            else {
                unreachable!("balanced branch is conditional by construction")
            };
            make_shadow(
                BranchDescriptor {
                    addr: v.balanced_branch,
                    kind: crate::ir::BranchKind::Conditional,
                    target: Some(*target),
                },
                ProbeKind::Conditional,
            )
        })
        .collect::<Result<_, _>>()?;

    let correct: u64 = (0..probes)
        .into_par_iter()
        .map(|i| {
            let v = &corpus[(i % corpus.len() as u64) as usize];
            let probe = &probe_for[(i % corpus.len() as u64) as usize];
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, i));
            let input = v.gen_input(&mut rng);
            let mut uarch = Uarch::new(PredictorMode::BtbOnly);
            let mut lbr = Lbr::new();
            let mut session =
                Session::new(&v.program, v.program.base(), input, LbrContext::Protected);
            session
                .run(&mut uarch, &mut lbr, VICTIM_FUEL)
                .expect("victim runs");
            let actual = session
                .branch_records()
                .iter()
                .rev()
                .find(|r| r.addr == v.balanced_branch)
                .map(|r| r.taken)
                .expect("balanced branch executes");
            if flush == FlushPolicy::OnEnclaveSwitch {
                uarch.flush();
            }
            let inferred = probe_conditional(probe, &mut uarch, &mut lbr)
                .expect("probe runs")
                .label
                .positive();
            u64::from(inferred == actual)
        })
        .sum();
    Ok(correct as f64 / probes as f64)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TimingRow {
    pub channel: Channel,
    /// Which latency population the row describes.
    pub mispredicted: bool,
    /// Raw (unclamped) sample statistics.
    pub mean: f64,
    pub sd: f64,
    /// Fraction of samples the measurement floor (1 cycle) would clamp;
    /// documents the bias the clamped probe readings carry.
    pub clamped_fraction: f64,
}

/// Samples every channel's two latency populations `samples` times each.
pub fn timing_table(samples: u64, seed: u64) -> Vec<TimingRow> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for channel in Channel::ALL {
        let model = TimingModel::with_params(channel, default_params(channel));
        for mispredicted in [false, true] {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            let mut clamped = 0u64;
            for _ in 0..samples {
                let x = model.sample_raw(&mut rng, mispredicted);
                sum += x;
                sumsq += x * x;
                clamped += u64::from(x < 1.0);
            }
            let n = samples as f64;
            let mean = sum / n;
            let sd = if samples > 1 {
                ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0).sqrt()
            } else {
                f64::NAN
            };
            rows.push(TimingRow {
                channel,
                mispredicted,
                mean,
                sd,
                clamped_fraction: clamped as f64 / n,
            });
        }
    }
    rows
}
