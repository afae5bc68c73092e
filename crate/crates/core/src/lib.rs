//! A desk-scale, trace-driven laboratory for branch-shadowing side channels.
//!
//! The crate couples a toy branch-centric IR and interpreter to a model of
//! the shared branch-prediction microarchitecture (BTB with partial tags,
//! optional gshare direction predictor, a 32-entry LBR, and noisy timing
//! channels). On top of that it implements the shadowing attack itself,
//! an interrupt-driven execution harness, the two countermeasures (predictor
//! flushing and the Zigzagger branch obfuscation pass), and a small victim
//! corpus with machine-readable ground truth.

pub mod attacker;
pub mod cli;
pub mod harness;
pub mod ir;
pub mod uarch;
pub mod victims;
pub mod zigzagger;
