//! Cross-core covert channels.
//!
//! Time is cut into epochs of `cycles_per_bit` cycles, aligned on the shared
//! timestamp counter. Epoch 0 is a warm-up; bit `i` travels in epoch `i + 1`.
//!
//! * Prefetch+Load: the sender PREFETCHWs the line for a 1, the receiver
//!   times a load (slow intervention hit means 1).
//! * Prefetch+Prefetch: the sender loads the line for a 1, the receiver times
//!   a PREFETCHW (slow invalidation means 1).
//! * Prefetch+Reload: a trojan PREFETCHWs the line at the end of every epoch,
//!   the sender loads it for a 1, and a spy times a load. A clean hit (the
//!   sender demoted the trojan's copy) means 1, so the comparison is inverted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::coherence::{CacheGeometry, LineAddr, Permission, TimingProfile};
use crate::error::{Error, Result};
use crate::machine::{AgentProgram, AgentTrace, DefenseConfig, Machine, NoiseModel, Record, Step};
use crate::{CoreId, Cycle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    PrefetchLoad,
    PrefetchPrefetch,
    PrefetchReload,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 3] = [
        ChannelKind::PrefetchLoad,
        ChannelKind::PrefetchPrefetch,
        ChannelKind::PrefetchReload,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::PrefetchLoad => "prefetch-load",
            ChannelKind::PrefetchPrefetch => "prefetch-prefetch",
            ChannelKind::PrefetchReload => "prefetch-reload",
        }
    }

    pub fn cores_needed(self) -> usize {
        match self {
            ChannelKind::PrefetchReload => 3,
            _ => 2,
        }
    }

    /// Noiseless probe latencies for a 0 bit and a 1 bit.
    pub fn latencies(self, p: &TimingProfile) -> (Cycle, Cycle) {
        match self {
            ChannelKind::PrefetchLoad => (p.l1_hit, p.llc_hit_dirty),
            ChannelKind::PrefetchPrefetch => (p.prefetchw_fast, p.prefetchw_slow),
            ChannelKind::PrefetchReload => (p.llc_hit_dirty, p.llc_hit_clean),
        }
    }

    /// Midpoint of the two noiseless latencies.
    pub fn default_threshold(self, p: &TimingProfile) -> Cycle {
        let (a, b) = self.latencies(p);
        (a + b) / 2
    }

    /// Bit value a probe latency decodes to.
    pub fn decode(self, latency: Cycle, threshold: Cycle) -> bool {
        match self {
            ChannelKind::PrefetchReload => latency < threshold,
            _ => latency > threshold,
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prefetch-load" | "pl" => Ok(ChannelKind::PrefetchLoad),
            "prefetch-prefetch" | "pp" => Ok(ChannelKind::PrefetchPrefetch),
            "prefetch-reload" | "pr" => Ok(ChannelKind::PrefetchReload),
            _ => Err(Error::Config(format!("unknown channel kind `{s}`"))),
        }
    }
}

/// Half-open offset range `[lo, hi)` within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub lo: Cycle,
    pub hi: Cycle,
}

impl Window {
    pub fn new(lo: Cycle, hi: Cycle) -> Self {
        Window { lo, hi }
    }
}

/// True iff `cycle mod epoch` falls in `window`.
pub fn in_window(cycle: Cycle, epoch: Cycle, window: Window) -> bool {
    let off = cycle % epoch;
    window.lo <= off && off < window.hi
}

pub const DEFAULT_LINE: LineAddr = LineAddr(0x4000);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub cycles_per_bit: Cycle,
    pub send_window: Window,
    pub recv_window: Window,
    /// Prefetch+Reload only: when the trojan re-arms the line for the next epoch.
    pub arm_window: Window,
    pub threshold: Cycle,
    pub line: LineAddr,
}

impl ChannelConfig {
    /// Windows of a tenth of the epoch at offsets 0, E/2 and 3E/4; threshold
    /// at the midpoint of the profile's two latencies.
    pub fn new(kind: ChannelKind, cycles_per_bit: Cycle, profile: &TimingProfile) -> Self {
        let e = cycles_per_bit;
        let w = (e / 10).max(1);
        ChannelConfig {
            kind,
            cycles_per_bit: e,
            send_window: Window::new(0, w),
            recv_window: Window::new(e / 2, e / 2 + w),
            arm_window: Window::new(3 * e / 4, 3 * e / 4 + w),
            threshold: kind.default_threshold(profile),
            line: DEFAULT_LINE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.cycles_per_bit;
        if e == 0 {
            return Err(Error::Config("cycles_per_bit must be positive".into()));
        }
        let mut windows = vec![self.send_window, self.recv_window];
        if self.kind == ChannelKind::PrefetchReload {
            windows.push(self.arm_window);
        }
        for w in &windows {
            if w.lo >= w.hi || w.hi > e {
                return Err(Error::BadWindow {
                    lo: w.lo,
                    hi: w.hi,
                    epoch: e,
                });
            }
        }
        for pair in windows.windows(2) {
            if pair[0].hi > pair[1].lo {
                return Err(Error::Config(format!(
                    "windows overlap or are out of order: [{}, {}) then [{}, {})",
                    pair[0].lo, pair[0].hi, pair[1].lo, pair[1].hi
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to build the machine a channel runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineSetup {
    pub profile: TimingProfile,
    pub geometry: CacheGeometry,
    pub defense: DefenseConfig,
    pub noise: NoiseModel,
    /// Longest simulated run accepted, in cycles.
    pub horizon: Cycle,
}

pub const DEFAULT_HORIZON: Cycle = 1 << 36;

impl Default for MachineSetup {
    fn default() -> Self {
        MachineSetup {
            profile: TimingProfile::default(),
            geometry: CacheGeometry::default(),
            defense: DefenseConfig::default(),
            noise: NoiseModel::default(),
            horizon: DEFAULT_HORIZON,
        }
    }
}

impl MachineSetup {
    pub fn quiet() -> Self {
        MachineSetup {
            noise: NoiseModel::quiet(0),
            ..MachineSetup::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise.seed = seed;
        self
    }

    /// Builds a machine whose background noise (if any) targets `lines`
    /// when the noise model names no lines of its own.
    pub fn machine_for(&self, lines: &[LineAddr]) -> Result<Machine> {
        let mut noise = self.noise.clone();
        if noise.interference_lines.is_empty() {
            noise.interference_lines = lines.to_vec();
        }
        Machine::new(
            self.profile.clone(),
            self.geometry.clone(),
            self.defense.clone(),
            noise,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub kind: ChannelKind,
    pub cycles_per_bit: Cycle,
    pub clock_hz: f64,
    pub seed: u64,
    pub threshold: Cycle,
    pub sent: Vec<bool>,
    pub received: Vec<bool>,
    pub ber: f64,
    pub raw_rate_bytes_per_sec: f64,
    /// Measured probe latency per bit; `None` when the probe missed its window.
    pub latencies: Vec<Option<Cycle>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelSummary {
    pub kind: ChannelKind,
    pub cycles_per_bit: Cycle,
    pub clock_hz: f64,
    pub ber: f64,
    pub rate_bytes_per_sec: f64,
    pub n_bits: usize,
    pub seed: u64,
}

impl ChannelReport {
    pub fn errors(&self) -> usize {
        self.sent
            .iter()
            .zip(&self.received)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn summary(&self) -> ChannelSummary {
        ChannelSummary {
            kind: self.kind,
            cycles_per_bit: self.cycles_per_bit,
            clock_hz: self.clock_hz,
            ber: self.ber,
            rate_bytes_per_sec: self.raw_rate_bytes_per_sec,
            n_bits: self.sent.len(),
            seed: self.seed,
        }
    }

    /// `bit,sent,received,latency`; a missed probe leaves latency empty.
    pub fn write_latency_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bit,sent,received,latency")?;
        for (i, ((s, r), l)) in self
            .sent
            .iter()
            .zip(&self.received)
            .zip(&self.latencies)
            .enumerate()
        {
            let l = l.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{i},{},{},{l}", *s as u8, *r as u8)?;
        }
        Ok(())
    }
}

pub fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn random_message(n: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

pub fn parse_bits(text: &str) -> Result<Vec<bool>> {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(Error::Config(format!(
                "message may only contain 0 and 1, got `{c}`"
            ))),
        })
        .collect()
}

pub fn format_bits(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

const SENDER: CoreId = 0;
const RECEIVER: CoreId = 1;
const TROJAN: CoreId = 1;
const SPY: CoreId = 2;

fn sync(epoch: u64, e: Cycle, w: Window) -> Step {
    Step::SyncWindow {
        open: epoch * e + w.lo,
        close: epoch * e + w.hi,
    }
}

fn timed(probe: Step) -> [Step; 3] {
    [Step::ReadTimestamp, probe, Step::ReadTimestamp]
}

/// Agent programs for `message`; the last program is the timed prober.
pub fn channel_programs(message: &[bool], cfg: &ChannelConfig) -> Vec<AgentProgram> {
    let e = cfg.cycles_per_bit;
    let n = message.len() as u64;
    let line = cfg.line;
    let mut sender = AgentProgram::new(SENDER);
    let (send_op, probe_op) = match cfg.kind {
        ChannelKind::PrefetchLoad => (
            Step::PrefetchW(line, Permission::ReadOnly),
            Step::Load(line),
        ),
        ChannelKind::PrefetchPrefetch => (
            Step::Load(line),
            Step::PrefetchW(line, Permission::ReadOnly),
        ),
        ChannelKind::PrefetchReload => (Step::Load(line), Step::Load(line)),
    };
    for (i, &bit) in message.iter().enumerate() {
        if bit {
            sender
                .push(sync(i as u64 + 1, e, cfg.send_window))
                .push(send_op);
        }
    }
    match cfg.kind {
        ChannelKind::PrefetchLoad | ChannelKind::PrefetchPrefetch => {
            let mut rx = AgentProgram::new(RECEIVER);
            for k in 0..=n {
                rx.push(sync(k, e, cfg.recv_window));
                rx.script.extend(timed(probe_op));
            }
            vec![sender, rx]
        }
        ChannelKind::PrefetchReload => {
            let mut trojan = AgentProgram::new(TROJAN);
            for k in 0..n {
                trojan
                    .push(sync(k, e, cfg.arm_window))
                    .push(Step::PrefetchW(line, Permission::ReadOnly));
            }
            let mut spy = AgentProgram::new(SPY);
            for k in 1..=n {
                spy.push(sync(k, e, cfg.recv_window));
                spy.script.extend(timed(probe_op));
            }
            vec![sender, trojan, spy]
        }
    }
}

/// Timed-probe latencies keyed by the probe's window opening cycle; `None`
/// for a missed window. Expects `SyncWindow, ReadTimestamp, op, ReadTimestamp`.
pub(crate) fn probe_latencies(trace: &AgentTrace) -> Vec<(Cycle, Option<Cycle>)> {
    let mut out = Vec::new();
    let recs = &trace.records;
    let mut i = 0;
    while i < recs.len() {
        match recs[i] {
            Record::Synced { open, .. } => {
                if let (Some(Record::Timestamp(t1)), Some(Record::Timestamp(t2))) =
                    (recs.get(i + 1), recs.get(i + 3))
                {
                    out.push((open, Some(t2 - t1)));
                    i += 4;
                    continue;
                }
            }
            Record::Missed { open } => out.push((open, None)),
            _ => {}
        }
        i += 1;
    }
    out
}

/// Runs any channel kind.
pub fn run_channel(
    message: &[bool],
    cfg: &ChannelConfig,
    setup: &MachineSetup,
) -> Result<ChannelReport> {
    cfg.validate()?;
    let available = setup.geometry.num_cores;
    if available < cfg.kind.cores_needed() {
        return Err(Error::NotEnoughCores {
            kind: cfg.kind.name(),
            needed: cfg.kind.cores_needed(),
            available,
        });
    }
    let (lat0, lat1) = cfg.kind.latencies(&setup.profile);
    let (lo, hi) = (lat0.min(lat1), lat0.max(lat1));
    if !(lo < cfg.threshold && cfg.threshold < hi) {
        return Err(Error::BadThreshold {
            threshold: cfg.threshold,
            low: lo,
            high: hi,
        });
    }
    let e = cfg.cycles_per_bit;
    let n = message.len();
    let span = (n as u64 + 2).checked_mul(e);
    if span.is_none_or(|s| s > setup.horizon) {
        return Err(Error::BeyondHorizon {
            bits: n,
            cycles_per_bit: e,
            horizon: setup.horizon,
        });
    }

    let mut latencies = vec![None; n];
    if n > 0 {
        let progs = channel_programs(message, cfg);
        let mut machine = setup.machine_for(&[cfg.line])?;
        let traces = machine.run(&progs)?;
        let prober = traces.last().expect("at least one agent");
        for (open, lat) in probe_latencies(prober) {
            let epoch = open / e;
            if (1..=n as u64).contains(&epoch) {
                latencies[epoch as usize - 1] = lat;
            }
        }
    }
    let received: Vec<bool> = latencies
        .iter()
        .map(|l| l.is_some_and(|v| cfg.kind.decode(v, cfg.threshold)))
        .collect();
    let ber = if n == 0 {
        0.0
    } else {
        hamming(message, &received) as f64 / n as f64
    };
    Ok(ChannelReport {
        kind: cfg.kind,
        cycles_per_bit: e,
        clock_hz: setup.profile.clock_hz,
        seed: setup.noise.seed,
        threshold: cfg.threshold,
        sent: message.to_vec(),
        received,
        ber,
        raw_rate_bytes_per_sec: setup.profile.bytes_per_sec(e),
        latencies,
    })
}

fn expect_kind(cfg: &ChannelConfig, kind: ChannelKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "config is for {}, expected {kind}",
            cfg.kind
        )));
    }
    Ok(())
}

pub fn run_prefetch_load(
    message: &[bool],
    cfg: &ChannelConfig,
    setup: &MachineSetup,
) -> Result<ChannelReport> {
    expect_kind(cfg, ChannelKind::PrefetchLoad)?;
    run_channel(message, cfg, setup)
}

pub fn run_prefetch_prefetch(
    message: &[bool],
    cfg: &ChannelConfig,
    setup: &MachineSetup,
) -> Result<ChannelReport> {
    expect_kind(cfg, ChannelKind::PrefetchPrefetch)?;
    run_channel(message, cfg, setup)
}

pub fn run_prefetch_reload(
    message: &[bool],
    cfg: &ChannelConfig,
    setup: &MachineSetup,
) -> Result<ChannelReport> {
    expect_kind(cfg, ChannelKind::PrefetchReload)?;
    run_channel(message, cfg, setup)
}
