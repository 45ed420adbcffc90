//! Cycle-level simulator of cross-core cache-coherence timing channels built on
//! PREFETCHW.
//!
//! The crate is layered bottom-up:
//!
//! * [`coherence`]: MESI engine, latency profiles and cache geometries.
//! * [`machine`]: the multicore that schedules agent scripts, injects noise and
//!   applies defenses.
//! * [`channels`]: Prefetch+Load, Prefetch+Prefetch and Prefetch+Reload covert channels.
//! * [`attacks`]: the square-and-multiply side channel and the speculative-window model.
//! * [`harness`]: threshold calibration, BER sweeps and max-rate search.
//! * [`oracle`]: an independent brute-force MESI reference used for equivalence checks.

pub mod attacks;
pub mod channels;
pub mod coherence;
pub mod config;
pub mod error;
pub mod harness;
pub mod machine;
pub mod observe;
pub mod oracle;

/// Simulated core clock cycles.
pub type Cycle = u64;
/// Index of a physical core.
pub type CoreId = usize;

pub use coherence::{
    CacheGeometry, CoherenceEngine, CoherenceState, HitLevel, LineAddr, MemOp, OpResult,
    Permission, TimingProfile, BUILTIN_PROFILES,
};
pub use error::{Error, Result};
pub use machine::{AgentProgram, DefenseConfig, Machine, NoiseModel, Step};
