//! Side-channel attacks: a square-and-multiply victim observed through
//! Prefetch+Reload or Prefetch+Prefetch, and a speculative-window model that
//! compares how many secret-dependent accesses fit in a transient window.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::channels::{probe_latencies, ChannelKind, MachineSetup};
use crate::coherence::{CacheGeometry, LineAddr, Permission, TimingProfile};
use crate::error::{Error, Result};
use crate::machine::{AgentProgram, Record, Step};
use crate::{CoreId, Cycle};

/// Lines the victim maps read-only into the attacker's address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedRegion {
    pub start: LineAddr,
    pub len: u64,
}

impl SharedRegion {
    pub fn contains(&self, addr: LineAddr) -> bool {
        addr.0 >= self.start.0 && addr.0 - self.start.0 < self.len
    }
}

impl Default for SharedRegion {
    fn default() -> Self {
        SharedRegion {
            start: LineAddr(0x8000),
            len: 64,
        }
    }
}

/// Victim running square-and-multiply over `exponent_bits`, most significant
/// bit first. Each iteration touches `sqr_line`, then `mul_line` for a 1 bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SquareMultiplyVictim {
    pub exponent_bits: Vec<bool>,
    pub sqr_line: LineAddr,
    pub mul_line: LineAddr,
    pub per_op_cycles: Cycle,
}

impl SquareMultiplyVictim {
    pub fn new(exponent_bits: Vec<bool>) -> Self {
        let region = SharedRegion::default();
        SquareMultiplyVictim {
            exponent_bits,
            sqr_line: region.start,
            mul_line: LineAddr(region.start.0 + 1),
            per_op_cycles: 2000,
        }
    }

    /// Cycles from the first access to the end of the last iteration.
    pub fn duration(&self) -> Cycle {
        self.exponent_bits
            .iter()
            .map(|&b| self.per_op_cycles * (1 + b as Cycle))
            .sum()
    }

    fn program(&self, core: CoreId, start: Cycle) -> AgentProgram {
        let mut p = AgentProgram::new(core);
        let mut t = start;
        for &bit in &self.exponent_bits {
            p.push(Step::WaitUntil(t)).push(Step::Load(self.sqr_line));
            if bit {
                p.push(Step::WaitUntil(t + self.per_op_cycles))
                    .push(Step::Load(self.mul_line));
            }
            t += self.per_op_cycles * (1 + bit as Cycle);
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub epoch: u64,
    pub line: LineAddr,
    pub latency: Cycle,
    pub inferred: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccessTrace {
    pub samples: Vec<Sample>,
}

impl AccessTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,line,latency,inferred")?;
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{},{}",
                s.epoch, s.line, s.latency, s.inferred as u8
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideChannelParams {
    /// Cycles between arming a line and probing it (the attacker epoch).
    pub wait_cycles: Cycle,
    /// Offset between the probes of consecutive monitored lines.
    pub slot_cycles: Cycle,
    /// Th0 override; the kind's default midpoint otherwise.
    pub threshold: Option<Cycle>,
    pub region: SharedRegion,
}

impl Default for SideChannelParams {
    fn default() -> Self {
        SideChannelParams {
            wait_cycles: 1000,
            slot_cycles: 200,
            threshold: None,
            region: SharedRegion::default(),
        }
    }
}

const VICTIM: CoreId = 0;
const TROJAN: CoreId = 1;
const SPY: CoreId = 2;

/// Runs the victim against an attacker monitoring its two lines. Returns the
/// traces for `sqr_line` and `mul_line`.
///
/// Every attacker epoch `k` (length `wait_cycles`) probes line `j` at
/// `k * wait + j * slot`. For Prefetch+Reload the spy reloads and the trojan
/// re-arms right after; for Prefetch+Prefetch one timed PREFETCHW does both.
/// Epoch 0 is a warm-up and is not reported.
pub fn run_side_channel(
    victim: &SquareMultiplyVictim,
    kind: ChannelKind,
    params: &SideChannelParams,
    setup: &MachineSetup,
) -> Result<(AccessTrace, AccessTrace)> {
    if kind == ChannelKind::PrefetchLoad {
        return Err(Error::Config(
            "side channel supports prefetch-reload and prefetch-prefetch".into(),
        ));
    }
    let available = setup.geometry.num_cores;
    if available < kind.cores_needed() {
        return Err(Error::NotEnoughCores {
            kind: kind.name(),
            needed: kind.cores_needed(),
            available,
        });
    }
    let lines = [victim.sqr_line, victim.mul_line];
    for l in lines {
        if !params.region.contains(l) {
            return Err(Error::NotShared(l));
        }
    }
    let p = params.wait_cycles;
    let slot = params.slot_cycles;
    if slot == 0 || p < slot * lines.len() as Cycle {
        return Err(Error::Config(format!(
            "wait_cycles {p} leaves no room for {} probe slots of {slot} cycles",
            lines.len()
        )));
    }
    let threshold = params
        .threshold
        .unwrap_or_else(|| kind.default_threshold(&setup.profile));

    let start = p + slot * lines.len() as Cycle;
    let epochs = (start + victim.duration()).div_ceil(p) + 3;
    let reload = kind == ChannelKind::PrefetchReload;
    let mut prober = AgentProgram::new(if reload { SPY } else { TROJAN });
    let mut trojan = AgentProgram::new(TROJAN);
    for k in 0..epochs {
        for (j, &line) in lines.iter().enumerate() {
            let at = k * p + j as Cycle * slot;
            let probe = if reload {
                Step::Load(line)
            } else {
                Step::PrefetchW(line, Permission::ReadOnly)
            };
            prober
                .push(Step::SyncWindow {
                    open: at,
                    close: at + slot / 2,
                })
                .push(Step::ReadTimestamp)
                .push(probe)
                .push(Step::ReadTimestamp);
            if reload {
                trojan
                    .push(Step::SyncWindow {
                        open: at + slot / 2,
                        close: at + slot,
                    })
                    .push(Step::PrefetchW(line, Permission::ReadOnly));
            }
        }
    }
    let mut programs = vec![victim.program(VICTIM, start)];
    if reload {
        programs.push(trojan);
    }
    programs.push(prober);

    let mut machine = setup.machine_for(&lines)?;
    let traces = machine.run(&programs)?;
    let mut out = [AccessTrace::default(), AccessTrace::default()];
    for (open, lat) in probe_latencies(traces.last().expect("prober present")) {
        let (k, j) = (open / p, ((open % p) / slot) as usize);
        if k == 0 {
            continue;
        }
        if let Some(latency) = lat {
            out[j].samples.push(Sample {
                epoch: k,
                line: lines[j],
                latency,
                inferred: kind.decode(latency, threshold),
            });
        }
    }
    let [sqr, mul] = out;
    Ok((sqr, mul))
}

/// Recovers exponent bits: each detected `sqr` access opens a new bit, which
/// becomes 1 if a `mul` access is seen before the next `sqr`. `mul` detections
/// before the first `sqr` are dropped, and the final bit is only emitted when
/// the traces extend at least two epochs past its `sqr`.
pub fn decode_exponent(sqr: &AccessTrace, mul: &AccessTrace) -> Vec<bool> {
    let mut epochs: BTreeMap<u64, (bool, bool)> = BTreeMap::new();
    for s in &sqr.samples {
        epochs.entry(s.epoch).or_default().0 |= s.inferred;
    }
    for s in &mul.samples {
        epochs.entry(s.epoch).or_default().1 |= s.inferred;
    }
    let last_epoch = epochs.keys().next_back().copied().unwrap_or(0);
    let mut bits = Vec::new();
    let mut current: Option<(u64, bool)> = None;
    for (&e, &(s, m)) in &epochs {
        if s {
            if let Some((_, b)) = current {
                bits.push(b);
            }
            current = Some((e, false));
        }
        if m {
            if let Some((se, b)) = current.as_mut() {
                if e > *se {
                    *b = true;
                }
            }
        }
    }
    if let Some((se, b)) = current {
        if last_epoch >= se + 2 {
            bits.push(b);
        }
    }
    bits
}

/// Fraction of bits recovered, `1 - edit_distance / len`, floored at 0.
pub fn recovery_accuracy(truth: &[bool], decoded: &[bool]) -> f64 {
    if truth.is_empty() {
        return if decoded.is_empty() { 1.0 } else { 0.0 };
    }
    let d = strsim::generic_levenshtein(&truth.to_vec(), &decoded.to_vec());
    (1.0 - d as f64 / truth.len() as f64).max(0.0)
}

/// The encoding channel of the speculative gadget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectreChannel {
    FlushReload,
    PrefetchReload,
    PrefetchPrefetch,
}

impl SpectreChannel {
    pub const ALL: [SpectreChannel; 3] = [
        SpectreChannel::FlushReload,
        SpectreChannel::PrefetchReload,
        SpectreChannel::PrefetchPrefetch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpectreChannel::FlushReload => "flush-reload",
            SpectreChannel::PrefetchReload => "prefetch-reload",
            SpectreChannel::PrefetchPrefetch => "prefetch-prefetch",
        }
    }

    /// Cost of one speculative encoding access: a memory access into a
    /// flushed line, or an intervention hit on a line the trojan holds in M.
    pub fn per_access_latency(self, p: &TimingProfile) -> Cycle {
        match self {
            SpectreChannel::FlushReload => p.mem_access,
            _ => p.llc_hit_dirty,
        }
    }
}

impl fmt::Display for SpectreChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpectreChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flush-reload" | "fr" => Ok(SpectreChannel::FlushReload),
            "prefetch-reload" | "pr" => Ok(SpectreChannel::PrefetchReload),
            "prefetch-prefetch" | "pp" => Ok(SpectreChannel::PrefetchPrefetch),
            _ => Err(Error::Config(format!("unknown spectre channel `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectreModel {
    pub window: Cycle,
    pub per_access_latency: Cycle,
    /// Spacing of candidate values in the probe array, in lines.
    pub stride_lines: u64,
}

impl SpectreModel {
    pub fn for_channel(channel: SpectreChannel, window: Cycle, profile: &TimingProfile) -> Self {
        SpectreModel {
            window,
            per_access_latency: channel.per_access_latency(profile),
            stride_lines: 64,
        }
    }
}

/// Number of encoding accesses that fit in the speculative window.
pub fn spectre_window_accesses(model: &SpectreModel) -> u64 {
    model
        .window
        .checked_div(model.per_access_latency)
        .unwrap_or(0)
}

pub const SPECTRE_DEFAULT_WINDOW: Cycle = 1600;
const PROBE_BASE: u64 = 0x10_0000;

/// Probe line encoding value `v` of secret byte `j`.
pub fn probe_line(model: &SpectreModel, j: usize, v: u8) -> LineAddr {
    LineAddr(PROBE_BASE + j as u64 + model.stride_lines * v as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectreOutcome {
    pub channel: SpectreChannel,
    /// Speculative loads that completed inside the window.
    pub accesses: usize,
    /// Bytes the attacker decoded, in order, up to the first undecodable one.
    pub recovered: Vec<u8>,
}

/// Geometry for the demo: the caller's, with private caches widened to 16
/// ways so a full 256-value probe array per byte never self-evicts.
pub fn spectre_geometry(base: &CacheGeometry) -> CacheGeometry {
    CacheGeometry {
        private_ways: base.private_ways.max(16),
        private_sets: base.private_sets.max(1024),
        llc_sets: base.llc_sets.max(8192),
        llc_ways: base.llc_ways.max(16),
        ..base.clone()
    }
}

/// Victim transiently encodes `secret` into the probe array; the attacker
/// then decodes each byte through `channel`.
pub fn run_spectre_demo(
    secret: &[u8],
    model: &SpectreModel,
    channel: SpectreChannel,
    setup: &MachineSetup,
) -> Result<SpectreOutcome> {
    let needed = match channel {
        SpectreChannel::PrefetchReload => 3,
        _ => 2,
    };
    if setup.geometry.num_cores < needed {
        return Err(Error::NotEnoughCores {
            kind: channel.name(),
            needed,
            available: setup.geometry.num_cores,
        });
    }
    if secret.len() as u64 > model.stride_lines {
        return Err(Error::Config(format!(
            "at most {} secret bytes fit the probe layout",
            model.stride_lines
        )));
    }
    if secret.is_empty() {
        return Ok(SpectreOutcome {
            channel,
            accesses: 0,
            recovered: Vec::new(),
        });
    }
    let p = &setup.profile;
    let lines: Vec<LineAddr> = (0..secret.len())
        .flat_map(|j| (0..=255u8).map(move |v| (j, v)))
        .map(|(j, v)| probe_line(model, j, v))
        .collect();

    let (preparer, prober, victim) = match channel {
        SpectreChannel::PrefetchReload => (TROJAN, SPY, VICTIM),
        _ => (TROJAN, TROJAN, VICTIM),
    };
    let mut prep = AgentProgram::new(preparer);
    for &l in &lines {
        prep.push(match channel {
            SpectreChannel::FlushReload => Step::Flush(l),
            _ => Step::PrefetchW(l, Permission::ReadOnly),
        });
    }
    // a generous bound on the preparation time
    let prep_end = lines.len() as Cycle * (p.mem_access + p.prefetchw_slow + 100) + 1000;
    let mut v = AgentProgram::new(victim);
    v.push(Step::WaitUntil(prep_end)).push(Step::Speculate {
        window: model.window,
    });
    for (j, &b) in secret.iter().enumerate() {
        v.push(Step::Load(probe_line(model, j, b)));
    }
    v.push(Step::Resolve);
    let probe_start = prep_end + model.window + 1000;
    let mut probe = if prober == preparer {
        prep.clone()
    } else {
        AgentProgram::new(prober)
    };
    probe.push(Step::WaitUntil(probe_start));
    let probe_op = |l| match channel {
        SpectreChannel::PrefetchPrefetch => Step::PrefetchW(l, Permission::ReadOnly),
        _ => Step::Load(l),
    };
    for &l in &lines {
        probe
            .push(Step::ReadTimestamp)
            .push(probe_op(l))
            .push(Step::ReadTimestamp);
    }

    let mut programs = vec![v];
    if prober == preparer {
        programs.push(probe);
    } else {
        programs.push(prep);
        programs.push(probe);
    }
    let spectre_setup = MachineSetup {
        geometry: spectre_geometry(&setup.geometry),
        ..setup.clone()
    };
    let mut machine = spectre_setup.machine_for(&[])?;
    let traces = machine.run(&programs)?;
    let accesses = traces[0]
        .records
        .iter()
        .filter(|r| matches!(r, Record::Op { .. }))
        .count();

    let stamps: Vec<Cycle> = traces.last().expect("prober").timestamps().collect();
    let latencies: Vec<Cycle> = stamps.chunks(2).map(|c| c[1] - c[0]).collect();
    // an accessed line is the fastest reload (slowest PREFETCHW) of its group
    let (threshold, accessed_is_fast) = match channel {
        SpectreChannel::FlushReload => ((p.llc_hit_dirty + p.mem_access) / 2, true),
        SpectreChannel::PrefetchReload => ((p.llc_hit_clean + p.llc_hit_dirty) / 2, true),
        SpectreChannel::PrefetchPrefetch => ((p.prefetchw_fast + p.prefetchw_slow) / 2, false),
    };
    let mut recovered = Vec::new();
    for group in latencies.chunks(256) {
        let pick = if accessed_is_fast {
            (0..=255u8).min_by_key(|&v| group[v as usize])
        } else {
            (0..=255u8).max_by_key(|&v| group[v as usize])
        }
        .expect("256 candidates");
        let l = group[pick as usize];
        let hit = if accessed_is_fast {
            l < threshold
        } else {
            l > threshold
        };
        if !hit {
            break;
        }
        recovered.push(pick);
    }
    Ok(SpectreOutcome {
        channel,
        accesses,
        recovered,
    })
}

pub const SPECTRE_HISTOGRAM_HEADER: &str = "channel,accesses,count";

/// Counts of speculative accesses per channel over seeded trials.
pub fn spectre_histogram(
    channels: &[SpectreChannel],
    window: Cycle,
    trials: usize,
    seed_base: u64,
    setup: &MachineSetup,
) -> Result<Vec<(SpectreChannel, u64, usize)>> {
    let mut rows = Vec::new();
    for &ch in channels {
        let model = SpectreModel::for_channel(ch, window, &setup.profile);
        let cap = spectre_window_accesses(&model) as usize;
        // enough bytes that the window, not the secret, is the limit
        let secret: Vec<u8> = (0..(cap + 4).min(model.stride_lines as usize))
            .map(|i| (i * 37 % 256) as u8)
            .collect();
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for i in 0..trials {
            let s = setup.clone().with_seed(seed_base.wrapping_add(i as u64));
            let out = run_spectre_demo(&secret, &model, ch, &s)?;
            *counts.entry(out.accesses as u64).or_default() += 1;
        }
        rows.extend(counts.into_iter().map(|(a, c)| (ch, a, c)));
    }
    Ok(rows)
}

pub fn write_spectre_histogram<W: Write>(
    rows: &[(SpectreChannel, u64, usize)],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "{SPECTRE_HISTOGRAM_HEADER}")?;
    for (ch, a, c) in rows {
        writeln!(out, "{ch},{a},{c}")?;
    }
    Ok(())
}
