//! Replays of the two characterisation experiments: a remote PREFETCHW
//! followed by a timed load, and a remote load followed by a timed PREFETCHW.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channels::{MachineSetup, DEFAULT_LINE};
use crate::error::{Error, Result};
use crate::machine::{AgentProgram, Step};
use crate::{Cycle, LineAddr, Permission};

/// Cycles given to each iteration; thread 0 acts at the start, thread 1 at the midpoint.
pub const OBSERVE_SLOT: Cycle = 1000;
pub const DEFAULT_ITERATIONS: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Listing {
    /// Thread 0 PREFETCHWs the line, thread 1 times a load.
    One,
    /// Thread 0 loads the line, thread 1 times a PREFETCHW.
    Two,
}

impl Listing {
    pub fn number(self) -> u8 {
        match self {
            Listing::One => 1,
            Listing::Two => 2,
        }
    }
}

impl fmt::Display for Listing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Listing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Listing::One),
            "2" => Ok(Listing::Two),
            _ => Err(Error::Config(format!("listing must be 1 or 2, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub listing: Listing,
    pub iterations: usize,
    /// Thread 1 latencies with thread 0 active (experiment 0).
    pub active: Vec<Cycle>,
    /// Thread 1 latencies with thread 0 idle (experiment 1).
    pub idle: Vec<Cycle>,
}

impl Observation {
    pub fn mean_active(&self) -> f64 {
        mean(&self.active)
    }

    pub fn mean_idle(&self) -> f64 {
        mean(&self.idle)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,expt0,expt1")?;
        for (i, (a, b)) in self.active.iter().zip(&self.idle).enumerate() {
            writeln!(out, "{i},{a},{b}")?;
        }
        Ok(())
    }
}

fn mean(xs: &[Cycle]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64
}

/// Runs both experiments of `listing` for `iterations` timed iterations each.
///
/// The data line is read-only to both threads. One untimed iteration warms the
/// caches before measurement starts.
pub fn observe(listing: Listing, iterations: usize, setup: &MachineSetup) -> Result<Observation> {
    if iterations == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    if setup.geometry.num_cores < 2 {
        return Err(Error::NotEnoughCores {
            kind: "observe",
            needed: 2,
            available: setup.geometry.num_cores,
        });
    }
    let end = (iterations as Cycle + 2) * OBSERVE_SLOT;
    if end > setup.horizon {
        return Err(Error::BeyondHorizon {
            bits: iterations,
            cycles_per_bit: OBSERVE_SLOT,
            horizon: setup.horizon,
        });
    }
    Ok(Observation {
        listing,
        iterations,
        active: experiment(listing, true, iterations, setup)?,
        idle: experiment(listing, false, iterations, setup)?,
    })
}

fn experiment(
    listing: Listing,
    active: bool,
    iterations: usize,
    setup: &MachineSetup,
) -> Result<Vec<Cycle>> {
    let d0: LineAddr = DEFAULT_LINE;
    let mut t0 = AgentProgram::new(0);
    let mut t1 = AgentProgram::new(1);
    for i in 0..=iterations as Cycle {
        let start = i * OBSERVE_SLOT;
        if active {
            t0.push(Step::WaitUntil(start));
            match listing {
                Listing::One => t0.push(Step::PrefetchW(d0, Permission::ReadOnly)),
                Listing::Two => t0.push(Step::Load(d0)),
            };
        }
        t1.push(Step::WaitUntil(start + OBSERVE_SLOT / 2))
            .push(Step::ReadTimestamp);
        match listing {
            Listing::One => t1.push(Step::Load(d0)),
            Listing::Two => t1.push(Step::PrefetchW(d0, Permission::ReadOnly)),
        };
        t1.push(Step::ReadTimestamp);
    }
    let mut machine = setup.machine_for(&[d0])?;
    let traces = machine.run(&[t0, t1])?;
    let stamps: Vec<Cycle> = traces[1].timestamps().collect();
    Ok(stamps
        .chunks_exact(2)
        .skip(1)
        .map(|p| p[1] - p[0])
        .collect())
}
