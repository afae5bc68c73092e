//! Flat key=value experiment configuration, merged from (lowest to highest
//! precedence) built-in defaults, the `SHADOWLAB_SEED` environment
//! variable, a config file, and `--set key=value` flags.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::harness::{FlushPolicy, InterruptModel};
use crate::uarch::{Channel, PredictorMode};
use crate::zigzagger::BranchesPerTrampoline;

pub const SEED_ENV_VAR: &str = "SHADOWLAB_SEED";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {0}: expected `key=value`")]
    BadLine(usize),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("no seed: pass --set seed=N or set {SEED_ENV_VAR}")]
    MissingSeed,
    #[error("no victim named `{0}`")]
    UnknownVictim(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub victim: String,
    pub channel: Channel,
    pub predictor: PredictorMode,
    /// Interrupt model name: `normal`, `cache-disabled`, or `lockstep`.
    pub interrupt_model: String,
    pub flush: FlushPolicy,
    pub trials: u64,
    pub seed: u64,
    /// `None` = zigzagger off; otherwise branches per trampoline.
    pub zigzag: Option<BranchesPerTrampoline>,
}

impl ExperimentConfig {
    pub fn interrupts(&self) -> InterruptModel {
        InterruptModel::parse(&self.interrupt_model).expect("validated at parse time")
    }

    /// Canonical `key=value` lines; echoed into every output header so
    /// reports are self-describing.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let flush = match self.flush {
            FlushPolicy::None => "none".to_string(),
            FlushPolicy::OnEnclaveSwitch => "on-switch".to_string(),
            FlushPolicy::Periodic { period } => format!("periodic:{period}"),
        };
        let zigzag = match self.zigzag {
            None => "off".to_string(),
            Some(BranchesPerTrampoline::All) => "all".to_string(),
            Some(BranchesPerTrampoline::Count(k)) => k.to_string(),
        };
        let predictor = match self.predictor {
            PredictorMode::BtbOnly => "btb-only",
            PredictorMode::Gshare => "gshare",
        };
        vec![
            ("victim", self.victim.clone()),
            ("channel", self.channel.name().to_string()),
            ("predictor", predictor.to_string()),
            ("interrupts", self.interrupt_model.clone()),
            ("flush", flush),
            ("trials", self.trials.to_string()),
            ("seed", self.seed.to_string()),
            ("zigzag", zigzag),
        ]
    }

    pub fn header(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("# {k}={v}\n"))
            .collect()
    }
}

fn parse_flush(value: &str) -> Option<FlushPolicy> {
    match value {
        "none" => Some(FlushPolicy::None),
        "on-switch" => Some(FlushPolicy::OnEnclaveSwitch),
        _ => {
            let period = value.strip_prefix("periodic:")?.parse().ok()?;
            if period == 0 {
                None
            } else {
                Some(FlushPolicy::Periodic { period })
            }
        }
    }
}

fn parse_zigzag(value: &str) -> Option<Option<BranchesPerTrampoline>> {
    if value == "off" {
        return Some(None);
    }
    let k = BranchesPerTrampoline::parse(value)?;
    if matches!(k, BranchesPerTrampoline::Count(c) if c < 2) {
        return None;
    }
    Some(Some(k))
}

/// Splits `text` into `key=value` pairs, ignoring blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigError::BadLine(lineno + 1))?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Builds a config from merged pairs (later entries win) plus the
/// environment seed. Every referenced name is resolved here.
pub fn build_config(
    pairs: &[(String, String)],
    env_seed: Option<u64>,
) -> Result<ExperimentConfig, ConfigError> {
    let mut merged: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, v) in pairs {
        match k.as_str() {
            "victim" | "channel" | "predictor" | "interrupts" | "flush" | "trials" | "seed"
            | "zigzag" => {
                merged.insert(k, v);
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
    }
    let bad = |key: &str, value: &str| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    };

    let victim = merged
        .get("victim")
        .copied()
        .unwrap_or("modexp")
        .to_string();
    if crate::victims::by_name(&victim).is_none() {
        return Err(ConfigError::UnknownVictim(victim));
    }
    let channel_txt = merged.get("channel").copied().unwrap_or("lbr");
    let channel = Channel::parse(channel_txt).ok_or_else(|| bad("channel", channel_txt))?;
    let predictor = match merged.get("predictor").copied().unwrap_or("btb-only") {
        "btb-only" => PredictorMode::BtbOnly,
        "gshare" => PredictorMode::Gshare,
        other => return Err(bad("predictor", other)),
    };
    let interrupt_model = merged.get("interrupts").copied().unwrap_or("lockstep");
    if InterruptModel::parse(interrupt_model).is_none() {
        return Err(bad("interrupts", interrupt_model));
    }
    let flush_txt = merged.get("flush").copied().unwrap_or("none");
    let flush = parse_flush(flush_txt).ok_or_else(|| bad("flush", flush_txt))?;
    let trials_txt = merged.get("trials").copied().unwrap_or("1000");
    let trials: u64 = trials_txt.parse().map_err(|_| bad("trials", trials_txt))?;
    if trials == 0 {
        return Err(bad("trials", trials_txt));
    }
    let seed = match merged.get("seed") {
        Some(s) => s.parse().map_err(|_| bad("seed", s))?,
        None => env_seed.ok_or(ConfigError::MissingSeed)?,
    };
    let zigzag_txt = merged.get("zigzag").copied().unwrap_or("off");
    let zigzag = parse_zigzag(zigzag_txt).ok_or_else(|| bad("zigzag", zigzag_txt))?;

    Ok(ExperimentConfig {
        victim,
        channel,
        predictor,
        interrupt_model: interrupt_model.to_string(),
        flush,
        trials,
        seed,
        zigzag,
    })
}
