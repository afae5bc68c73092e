//! Couples the interpreter to the predictor state: protected-context victim
//! execution, interrupt scheduling, flush hooks at context switches, and
//! cycle accounting.
//!
//! The core invariant is architectural non-interference: probes run against
//! the shared predictor state only, never against the victim's registers or
//! control flow, so a victim's trace under any probing schedule equals its
//! plain interpretation.

mod session;

pub use session::{BranchRecord, Session};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{ArchTrace, ExecError, InputMap, Program, VirtualAddress};
use crate::uarch::{Lbr, LbrContext, Uarch};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("probe callback failed at interrupt {interrupt}: {msg}")]
    Probe { interrupt: usize, msg: String },
    #[error("periodic flush period must be positive")]
    ZeroPeriod,
}

/// How often the victim is interrupted, in victim instructions per window.
///
/// Window lengths are Gaussian, rounded, floored at one instruction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterruptModel {
    pub mean_instrs: f64,
    pub sigma: f64,
}

impl InterruptModel {
    /// Timer-interrupt frequency achievable with caching enabled.
    pub fn normal() -> InterruptModel {
        InterruptModel {
            mean_instrs: 48.76,
            sigma: 2.75,
        }
    }

    /// Frequency with caching disabled: interrupts nearly every handful of
    /// instructions.
    pub fn cache_disabled() -> InterruptModel {
        InterruptModel {
            mean_instrs: 4.71,
            sigma: 1.96,
        }
    }

    /// Deterministic single-instruction windows, for exhaustive per-branch
    /// probing.
    pub fn lockstep() -> InterruptModel {
        InterruptModel {
            mean_instrs: 1.0,
            sigma: 0.0,
        }
    }

    pub fn parse(s: &str) -> Option<InterruptModel> {
        match s {
            "normal" => Some(InterruptModel::normal()),
            "cache-disabled" => Some(InterruptModel::cache_disabled()),
            "lockstep" => Some(InterruptModel::lockstep()),
            _ => None,
        }
    }

    /// One window length, in instructions (always >= 1).
    pub fn sample_window<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.sigma == 0.0 {
            return (self.mean_instrs.round() as i64).max(1) as u64;
        }
        let normal = Normal::new(self.mean_instrs, self.sigma).expect("sigma positive");
        (normal.sample(rng).round() as i64).max(1) as u64
    }
}

/// When predictor state gets wiped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlushPolicy {
    None,
    /// Flush at every context switch, in both directions: the probe then
    /// always faces a cold predictor, and so does the victim.
    OnEnclaveSwitch,
    /// Flush whenever at least `period` cycles elapsed since the previous
    /// flush, checked at instruction boundaries.
    Periodic {
        period: u64,
    },
}

/// One row of the probe transcript, as produced by a probe callback.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub probe_kind: String,
    pub target_addr: VirtualAddress,
    /// Raw channel reading, e.g. `predicted=true` or `cycles=31.2`.
    pub observation: String,
    pub inference: String,
}

/// A transcript row stamped with its position in the run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub run_id: u64,
    pub interrupt_idx: usize,
    #[serde(flatten)]
    pub row: ProbeRow,
}

impl TranscriptRow {
    pub const CSV_HEADER: &'static str =
        "run_id,interrupt_idx,probe_kind,target_addr,observation,inference";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:#x},{},{}",
            self.run_id,
            self.interrupt_idx,
            self.row.probe_kind,
            self.row.target_addr.0,
            self.row.observation,
            self.row.inference
        )
    }
}

/// Everything one interrupted run produced.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub run_id: u64,
    /// The victim's architectural trace (identical to plain interpretation).
    #[serde(skip)]
    pub trace: ArchTrace,
    pub transcript: Vec<TranscriptRow>,
    pub interrupts: usize,
    pub total_instructions: u64,
    /// Victim cycles including misprediction penalties.
    pub total_cycles: u64,
    pub mispredicts: u64,
    pub ipc_proxy: f64,
    pub fuel_exhausted: bool,
}

/// What a probe callback may touch: the shared predictor state and its own
/// randomness. The victim's registers and program are deliberately absent.
pub struct ProbeCtx<'a> {
    pub uarch: &'a mut Uarch,
    pub lbr: &'a mut Lbr,
    pub rng: &'a mut ChaCha8Rng,
    pub interrupt_idx: usize,
}

pub type ProbeResult = Result<Vec<ProbeRow>, String>;

/// Computes total cycles and the IPC proxy from base cycles, penalties, and
/// the instruction count.
pub fn cycle_account(base_cycles: u64, penalty_cycles: u64, instructions: u64) -> (u64, f64) {
    let cycles = base_cycles + penalty_cycles;
    let ipc = if cycles == 0 {
        0.0
    } else {
        instructions as f64 / cycles as f64
    };
    (cycles, ipc)
}

/// Runs `victim` in the protected context, interrupting it per `interrupts`
/// and invoking `probe` at every interrupt with the shared predictor state.
///
/// Flush hooks: `OnEnclaveSwitch` flushes on exit (before the probe) and on
/// re-entry (after it); `Periodic` flushes during victim execution whenever
/// the victim cycle counter passes a multiple of the period.
#[allow(clippy::too_many_arguments)]
pub fn run_with_interrupts(
    victim: &Program,
    entry: VirtualAddress,
    input: &InputMap,
    interrupts: &InterruptModel,
    flush: FlushPolicy,
    fuel: u64,
    seed: u64,
    run_id: u64,
    uarch: &mut Uarch,
    probe: &mut dyn FnMut(&mut ProbeCtx) -> ProbeResult,
) -> Result<RunReport, HarnessError> {
    if let FlushPolicy::Periodic { period: 0 } = flush {
        return Err(HarnessError::ZeroPeriod);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lbr = Lbr::new();
    let mut session = Session::new(victim, entry, input.clone(), LbrContext::Protected);
    let mut transcript = Vec::new();
    let mut interrupt_idx = 0usize;
    let mut last_flush_at = 0u64;

    while session.running() && session.instructions() < fuel {
        let window = interrupts.sample_window(&mut rng);
        for _ in 0..window {
            if !session.running() || session.instructions() >= fuel {
                break;
            }
            session.step(uarch, &mut lbr)?;
            if let FlushPolicy::Periodic { period } = flush {
                if session.cycles() - last_flush_at >= period {
                    uarch.flush();
                    last_flush_at = session.cycles();
                }
            }
        }
        if !session.running() {
            break;
        }
        // Asynchronous exit: hand control to the attacker context.
        if flush == FlushPolicy::OnEnclaveSwitch {
            uarch.flush();
        }
        let mut ctx = ProbeCtx {
            uarch,
            lbr: &mut lbr,
            rng: &mut rng,
            interrupt_idx,
        };
        let rows = probe(&mut ctx).map_err(|msg| HarnessError::Probe {
            interrupt: interrupt_idx,
            msg,
        })?;
        transcript.extend(rows.into_iter().map(|row| TranscriptRow {
            run_id,
            interrupt_idx,
            row,
        }));
        if flush == FlushPolicy::OnEnclaveSwitch {
            uarch.flush();
        }
        interrupt_idx += 1;
    }

    let fuel_exhausted = session.running();
    let total_instructions = session.instructions();
    let mispredicts = session.mispredicts();
    let (total_cycles, ipc_proxy) = cycle_account(
        session.base_cycles(),
        session.penalty_cycles(),
        total_instructions,
    );
    Ok(RunReport {
        run_id,
        trace: session.into_trace(fuel_exhausted),
        transcript,
        interrupts: interrupt_idx,
        total_instructions,
        total_cycles,
        mispredicts,
        ipc_proxy,
        fuel_exhausted,
    })
}
