use thiserror::Error;

use crate::coherence::LineAddr;
use crate::CoreId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown config key `{key}` (line {line})")]
    UnknownKey { key: String, line: usize },

    #[error("unknown profile `{0}`")]
    UnknownProfile(String),

    #[error("core {core} out of range for a {num_cores}-core machine")]
    CoreOutOfRange { core: CoreId, num_cores: usize },

    #[error("core {0} is assigned to more than one agent")]
    DuplicateCore(CoreId),

    #[error("{kind} requires {needed} cores, geometry has {available}")]
    NotEnoughCores {
        kind: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("message of {bits} bits at {cycles_per_bit} cycles/bit exceeds the simulation horizon of {horizon} cycles")]
    BeyondHorizon {
        bits: usize,
        cycles_per_bit: u64,
        horizon: u64,
    },

    #[error("window [{lo}, {hi}) does not fit a {epoch}-cycle epoch")]
    BadWindow { lo: u64, hi: u64, epoch: u64 },

    #[error("threshold {threshold} does not separate {low} and {high}")]
    BadThreshold { threshold: u64, low: u64, high: u64 },

    #[error("channel unusable: bit populations indistinguishable (means {mean0:.2} vs {mean1:.2}, pooled stddev {pooled:.2})")]
    Indistinguishable { mean0: f64, mean1: f64, pooled: f64 },

    #[error("no probed epoch reaches BER <= {limit} (best {best_ber:.4} at {cycles_per_bit} cycles/bit)")]
    RateUnreachable {
        limit: f64,
        best_ber: f64,
        cycles_per_bit: u64,
    },

    #[error("line {0:?} is outside the shared read-only region")]
    NotShared(LineAddr),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
