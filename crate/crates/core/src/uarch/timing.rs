//! Noisy timing channels for branch-latency measurement.
//!
//! Each channel is a pair of Gaussians, one for correctly predicted and one
//! for mispredicted executions, with parameters taken from hardware
//! measurements. Probe measurements clamp samples at one cycle (a
//! measurement cannot be nonpositive); statistics reporting can also draw
//! unclamped samples so the configured means are recoverable.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A way of timing one branch execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// Coarse timestamp counter read around the branch.
    Rdtscp,
    /// Cycle packets from the processor trace unit.
    PtCycle,
    /// Elapsed-cycles field attached to branch records.
    LbrCycles,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Rdtscp, Channel::PtCycle, Channel::LbrCycles];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Rdtscp => "rdtscp",
            Channel::PtCycle => "pt-cyc",
            Channel::LbrCycles => "lbr",
        }
    }

    pub fn parse(s: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Latency distribution parameters for one channel, in cycles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub mean_correct: f64,
    pub sd_correct: f64,
    pub mean_mispredict: f64,
    pub sd_mispredict: f64,
}

/// Measured per-channel parameters.
pub fn default_params(channel: Channel) -> ChannelParams {
    match channel {
        Channel::Rdtscp => ChannelParams {
            mean_correct: 94.21,
            sd_correct: 13.10,
            mean_mispredict: 120.61,
            sd_mispredict: 806.56,
        },
        Channel::PtCycle => ChannelParams {
            mean_correct: 59.59,
            sd_correct: 14.44,
            mean_mispredict: 90.64,
            sd_mispredict: 191.48,
        },
        Channel::LbrCycles => ChannelParams {
            mean_correct: 25.69,
            sd_correct: 9.72,
            mean_mispredict: 35.04,
            sd_mispredict: 10.52,
        },
    }
}

/// A sampling model over one channel's two latency distributions.
#[derive(Clone, Copy, Debug)]
pub struct TimingModel {
    pub channel: Channel,
    pub params: ChannelParams,
}

impl TimingModel {
    pub fn new(channel: Channel) -> TimingModel {
        TimingModel {
            channel,
            params: default_params(channel),
        }
    }

    pub fn with_params(channel: Channel, params: ChannelParams) -> TimingModel {
        TimingModel { channel, params }
    }

    /// Unclamped Gaussian draw; can be nonpositive for wide distributions.
    /// A zero sigma (debug models) degenerates to the mean.
    pub fn sample_raw<R: Rng + ?Sized>(&self, rng: &mut R, mispredicted: bool) -> f64 {
        let (m, s) = if mispredicted {
            (self.params.mean_mispredict, self.params.sd_mispredict)
        } else {
            (self.params.mean_correct, self.params.sd_correct)
        };
        if s == 0.0 {
            return m;
        }
        Normal::new(m, s).expect("sd is nonnegative").sample(rng)
    }

    /// A measurement as a probe would see it: clamped to at least one cycle.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, mispredicted: bool) -> f64 {
        self.sample_raw(rng, mispredicted).max(1.0)
    }
}
