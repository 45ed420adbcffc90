//! Experiment orchestration: threshold calibration, BER sweeps over seeded
//! trials and the max-rate search.
//!
//! Trial `i` of any sweep uses noise seed `seed_base + i` and a random message
//! drawn from the same seed, so every rate of a sweep sees the same messages
//! and noise streams.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::channels::{random_message, run_channel, ChannelConfig, ChannelKind, MachineSetup};
use crate::error::{Error, Result};
use crate::Cycle;

/// Epoch used for calibration runs: wide enough that windows are never missed.
pub const CALIBRATION_EPOCH: Cycle = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: Cycle,
    pub mean0: f64,
    pub mean1: f64,
    pub pooled_stddev: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Sends `samples` known zeros then `samples` known ones and puts Th0 at the
/// midpoint of the two latency means.
pub fn calibrate_threshold(
    kind: ChannelKind,
    setup: &MachineSetup,
    samples: usize,
) -> Result<Calibration> {
    if samples < 2 {
        return Err(Error::Config("calibration needs at least 2 samples".into()));
    }
    let mut message = vec![false; samples];
    message.extend(std::iter::repeat_n(true, samples));
    let cfg = ChannelConfig::new(kind, CALIBRATION_EPOCH, &setup.profile);
    let report = run_channel(&message, &cfg, setup)?;
    let pick = |bit: bool| -> Vec<f64> {
        report
            .sent
            .iter()
            .zip(&report.latencies)
            .filter(|(s, _)| **s == bit)
            .filter_map(|(_, l)| l.map(|v| v as f64))
            .collect()
    };
    let (mean0, sd0) = mean_std(&pick(false));
    let (mean1, sd1) = mean_std(&pick(true));
    let pooled = ((sd0 * sd0 + sd1 * sd1) / 2.0).sqrt();
    if (mean1 - mean0).abs() <= 2.0 * pooled {
        return Err(Error::Indistinguishable {
            mean0,
            mean1,
            pooled,
        });
    }
    Ok(Calibration {
        threshold: ((mean0 + mean1) / 2.0).round() as Cycle,
        mean0,
        mean1,
        pooled_stddev: pooled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: ChannelKind,
    pub setup: MachineSetup,
    /// Epoch lengths to probe, strictly increasing.
    pub rates: Vec<Cycle>,
    pub trials: usize,
    pub bits_per_trial: usize,
    pub seed_base: u64,
    /// Th0 override; the kind's default midpoint otherwise.
    pub threshold: Option<Cycle>,
}

impl SweepSpec {
    pub fn new(kind: ChannelKind, setup: MachineSetup, rates: Vec<Cycle>) -> Self {
        SweepSpec {
            kind,
            setup,
            rates,
            trials: 100,
            bits_per_trial: 4096,
            seed_base: 0,
            threshold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.rates.is_empty() || self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "rates must be non-empty and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    fn config(&self, cycles_per_bit: Cycle) -> ChannelConfig {
        let mut cfg = ChannelConfig::new(self.kind, cycles_per_bit, &self.setup.profile);
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        cfg
    }

    /// BER of every trial at one epoch length, in seed order.
    pub fn trial_bers(&self, cycles_per_bit: Cycle) -> Result<Vec<f64>> {
        let cfg = self.config(cycles_per_bit);
        (0..self.trials)
            .into_par_iter()
            .map(|i| {
                let seed = self.seed_base.wrapping_add(i as u64);
                let msg = random_message(self.bits_per_trial, seed);
                let setup = self.setup.clone().with_seed(seed);
                run_channel(&msg, &cfg, &setup).map(|r| r.ber)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cycles_per_bit: Cycle,
    pub rate_bytes_per_sec: f64,
    pub mean_ber: f64,
    pub stddev_ber: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: ChannelKind,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "rate_bytes_per_sec,cycles_per_bit,mean_ber,stddev_ber";

impl SweepResult {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{SWEEP_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{:.3},{},{:.6},{:.6}",
                r.rate_bytes_per_sec, r.cycles_per_bit, r.mean_ber, r.stddev_ber
            )?;
        }
        Ok(())
    }

    /// Smallest probed epoch whose mean BER is at most `limit`, scanning from
    /// the slow end and stopping at the first failure.
    pub fn knee(&self, limit: f64) -> Option<Cycle> {
        let mut best = None;
        for r in self.rows.iter().rev() {
            if r.mean_ber <= limit {
                best = Some(r.cycles_per_bit);
            } else {
                break;
            }
        }
        best
    }
}

pub fn sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.rates.len());
    for &e in &spec.rates {
        let bers = spec.trial_bers(e)?;
        let (mean, sd) = mean_std(&bers);
        rows.push(SweepRow {
            cycles_per_bit: e,
            rate_bytes_per_sec: spec.setup.profile.bytes_per_sec(e),
            mean_ber: mean,
            stddev_ber: sd,
        });
    }
    Ok(SweepResult {
        kind: spec.kind,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxRateSpec {
    pub kind: ChannelKind,
    pub setup: MachineSetup,
    pub ber_limit: f64,
    /// Search range for the epoch length, inclusive.
    pub min_cycles_per_bit: Cycle,
    pub max_cycles_per_bit: Cycle,
    pub trials: usize,
    pub bits_per_trial: usize,
    pub seed_base: u64,
}

impl MaxRateSpec {
    pub fn new(kind: ChannelKind, setup: MachineSetup, ber_limit: f64) -> Self {
        MaxRateSpec {
            kind,
            setup,
            ber_limit,
            min_cycles_per_bit: 100,
            max_cycles_per_bit: 4000,
            trials: 100,
            bits_per_trial: 4096,
            seed_base: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxRate {
    pub kind: ChannelKind,
    pub cycles_per_bit: Cycle,
    pub rate_bytes_per_sec: f64,
    pub kb_per_sec: f64,
    pub mean_ber: f64,
    pub ber_limit: f64,
    pub clock_hz: f64,
}

/// Binary search for the smallest epoch whose mean BER stays within the limit.
pub fn max_rate(spec: &MaxRateSpec) -> Result<MaxRate> {
    if !(spec.ber_limit > 0.0 && spec.ber_limit < 1.0) {
        return Err(Error::Config("ber_limit must lie in (0, 1)".into()));
    }
    if spec.min_cycles_per_bit == 0 || spec.min_cycles_per_bit > spec.max_cycles_per_bit {
        return Err(Error::Config("bad cycles_per_bit search range".into()));
    }
    let sweep = SweepSpec {
        kind: spec.kind,
        setup: spec.setup.clone(),
        rates: vec![spec.max_cycles_per_bit],
        trials: spec.trials,
        bits_per_trial: spec.bits_per_trial,
        seed_base: spec.seed_base,
        threshold: None,
    };
    sweep.validate()?;
    let mean_at = |e: Cycle| -> Result<f64> { Ok(mean_std(&sweep.trial_bers(e)?).0) };

    let top = mean_at(spec.max_cycles_per_bit)?;
    if top > spec.ber_limit {
        return Err(Error::RateUnreachable {
            limit: spec.ber_limit,
            best_ber: top,
            cycles_per_bit: spec.max_cycles_per_bit,
        });
    }
    let (mut lo, mut hi, mut hi_ber) = (spec.min_cycles_per_bit, spec.max_cycles_per_bit, top);
    let lo_ber = mean_at(lo)?;
    if lo_ber <= spec.ber_limit {
        hi = lo;
        hi_ber = lo_ber;
    }
    // invariant: hi passes, lo fails (unless lo == hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let b = mean_at(mid)?;
        if b <= spec.ber_limit {
            hi = mid;
            hi_ber = b;
        } else {
            lo = mid;
        }
    }
    let p = &spec.setup.profile;
    Ok(MaxRate {
        kind: spec.kind,
        cycles_per_bit: hi,
        rate_bytes_per_sec: p.bytes_per_sec(hi),
        kb_per_sec: p.kb_per_sec(hi),
        mean_ber: hi_ber,
        ber_limit: spec.ber_limit,
        clock_hz: p.clock_hz,
    })
}
