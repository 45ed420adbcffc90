//! The simulated multicore: agent scripts, a global clock, timestamp reads,
//! defense toggles and seeded noise.
//!
//! Agents are scheduled by smallest ready cycle (ties go to the earlier agent
//! in the program list). Each memory operation is atomic at issue and the
//! agent becomes ready again when it completes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;

use crate::coherence::{
    CacheGeometry, CoherenceEngine, LineAddr, MemOp, Permission, TimingProfile,
};
use crate::config::{parse_bool, parse_num};
use crate::error::{Error, Result};
use crate::{CoreId, Cycle};

pub use crate::coherence::OpResult;

/// Busy-wait loops re-read the timestamp counter every this many cycles.
pub const POLL_INTERVAL: Cycle = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// PREFETCHW honours page permissions (read-only lines are not prefetched).
    pub permission_check: bool,
    /// With `permission_check`, a blocked PREFETCHW also raises a fault.
    pub fault_on_check: bool,
    pub constant_time_prefetchw: bool,
    /// Timestamps are rounded down to a multiple of this.
    pub timer_granularity: Cycle,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            permission_check: false,
            fault_on_check: true,
            constant_time_prefetchw: false,
            timer_granularity: 1,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timer_granularity == 0 {
            return Err(Error::Config("timer_granularity must be >= 1".into()));
        }
        Ok(())
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "permission_check" => self.permission_check = parse_bool(key, value)?,
            "fault_on_check" => self.fault_on_check = parse_bool(key, value)?,
            "constant_time_prefetchw" => self.constant_time_prefetchw = parse_bool(key, value)?,
            "timer_granularity" => self.timer_granularity = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn quantize(&self, cycle: Cycle) -> Cycle {
        read_timestamp(cycle, self.timer_granularity)
    }
}

/// Synthetic noise. None of these values are measurements; they are knobs
/// tuned so the simulated BER curves bend where the hardware's do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub seed: u64,
    /// Standard deviation of the Gaussian added to every latency.
    pub jitter_stddev: f64,
    /// Background loads per 1000 cycles, issued by a phantom core.
    pub interference_rate: f64,
    /// Targets of background loads. Empty means no interference.
    pub interference_lines: Vec<LineAddr>,
    /// Mean of the exponential delay between a sync window opening and the
    /// agent acting on it (scheduling and polling slack).
    pub sync_skew_mean: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            seed: 0,
            jitter_stddev: 5.0,
            interference_rate: 0.0005,
            interference_lines: Vec::new(),
            sync_skew_mean: 10.5,
        }
    }
}

impl NoiseModel {
    /// No jitter, no interference, no skew.
    pub fn quiet(seed: u64) -> Self {
        NoiseModel {
            seed,
            jitter_stddev: 0.0,
            interference_rate: 0.0,
            interference_lines: Vec::new(),
            sync_skew_mean: 0.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_quiet(&self) -> bool {
        self.jitter_stddev == 0.0 && self.interference_rate == 0.0 && self.sync_skew_mean == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("jitter_stddev", self.jitter_stddev),
            ("interference_rate", self.interference_rate),
            ("sync_skew_mean", self.sync_skew_mean),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "jitter_stddev" => self.jitter_stddev = parse_num(key, value)?,
            "interference_rate" => self.interference_rate = parse_num(key, value)?,
            "sync_skew_mean" => self.sync_skew_mean = parse_num(key, value)?,
            "interference_lines" => {
                self.interference_lines = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_line_addr(key, s))
                    .collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses a line index in decimal or `0x` hex.
pub fn parse_line_addr(key: &str, s: &str) -> Result<LineAddr> {
    let v = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    };
    v.map(LineAddr)
        .ok_or_else(|| Error::Config(format!("`{key}`: bad line address `{s}`")))
}

/// Rounds `cycle` down to a multiple of `granularity`.
pub fn read_timestamp(cycle: Cycle, granularity: Cycle) -> Cycle {
    cycle - cycle % granularity.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    Load(LineAddr),
    Store(LineAddr, Permission),
    PrefetchW(LineAddr, Permission),
    Flush(LineAddr),
    /// Spin on the timestamp counter until it reads at least this cycle.
    WaitUntil(Cycle),
    /// Spin until `open`, then act if the (skewed) wake-up still reads
    /// before `close`. A missed window skips ahead to the next `SyncWindow`.
    SyncWindow {
        open: Cycle,
        close: Cycle,
    },
    ReadTimestamp,
    Idle(Cycle),
    /// Opens a speculative region: memory operations that cannot complete
    /// within `window` cycles are squashed, as is everything after them.
    Speculate {
        window: Cycle,
    },
    /// Ends the speculative region; the agent resumes at the deadline.
    Resolve,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProgram {
    pub core: CoreId,
    pub script: Vec<Step>,
}

impl AgentProgram {
    pub fn new(core: CoreId) -> Self {
        AgentProgram {
            core,
            script: Vec::new(),
        }
    }

    pub fn push(&mut self, step: Step) -> &mut Self {
        self.script.push(step);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Record {
    Op {
        op: MemOp,
        addr: LineAddr,
        result: OpResult,
    },
    Timestamp(Cycle),
    Synced {
        open: Cycle,
        at: Cycle,
    },
    Missed {
        open: Cycle,
    },
    Squashed {
        op: MemOp,
        addr: LineAddr,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentTrace {
    pub core: CoreId,
    pub records: Vec<Record>,
}

impl AgentTrace {
    pub fn ops(&self) -> impl Iterator<Item = &OpResult> {
        self.records.iter().filter_map(|r| match r {
            Record::Op { result, .. } => Some(result),
            _ => None,
        })
    }

    pub fn timestamps(&self) -> impl Iterator<Item = Cycle> + '_ {
        self.records.iter().filter_map(|r| match r {
            Record::Timestamp(t) => Some(*t),
            _ => None,
        })
    }
}

/// One row of the optional per-operation trace dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub cycle: Cycle,
    pub core: CoreId,
    pub op: MemOp,
    pub addr: LineAddr,
    pub result: OpResult,
}

pub const TRACE_CSV_HEADER: &str = "cycle,core,op,addr,latency,level,state_before,state_after";

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.cycle,
            r.core,
            r.op,
            r.addr,
            r.result.latency,
            r.result.level,
            r.result.state_before,
            r.result.state_after
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct AgentState {
    pc: usize,
    ready: Cycle,
    deadline: Option<Cycle>,
    squashing: bool,
}

pub struct Machine {
    engine: CoherenceEngine,
    geometry: CacheGeometry,
    defense: DefenseConfig,
    noise: NoiseModel,
    jitter: Option<(Normal<f64>, ChaCha8Rng)>,
    skew: Option<(Exp<f64>, ChaCha8Rng)>,
    interference: Option<(Exp<f64>, ChaCha8Rng)>,
    next_interference: f64,
    clock: Cycle,
    trace: Option<Vec<TraceRow>>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Machine {
    pub fn new(
        profile: TimingProfile,
        geometry: CacheGeometry,
        defense: DefenseConfig,
        noise: NoiseModel,
    ) -> Result<Self> {
        geometry.validate()?;
        defense.validate()?;
        noise.validate()?;
        // one extra core hosts the background interference
        let engine_geometry = CacheGeometry {
            num_cores: geometry.num_cores + 1,
            ..geometry.clone()
        };
        let engine = CoherenceEngine::new(engine_geometry, profile)?;
        let jitter = (noise.jitter_stddev > 0.0).then(|| {
            (
                Normal::new(0.0, noise.jitter_stddev).expect("validated stddev"),
                stream(noise.seed, 1),
            )
        });
        let skew = (noise.sync_skew_mean > 0.0).then(|| {
            (
                Exp::new(1.0 / noise.sync_skew_mean).expect("validated mean"),
                stream(noise.seed, 2),
            )
        });
        let mut interference =
            (noise.interference_rate > 0.0 && !noise.interference_lines.is_empty()).then(|| {
                (
                    Exp::new(noise.interference_rate / 1000.0).expect("validated rate"),
                    stream(noise.seed, 3),
                )
            });
        let next_interference = match &mut interference {
            Some((d, rng)) => d.sample(rng),
            None => f64::INFINITY,
        };
        Ok(Machine {
            engine,
            geometry,
            defense,
            noise,
            jitter,
            skew,
            interference,
            next_interference,
            clock: 0,
            trace: None,
        })
    }

    /// Starts recording every memory operation (including interference).
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        self.trace.take().unwrap_or_default()
    }

    pub fn engine(&self) -> &CoherenceEngine {
        &self.engine
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geometry
    }

    pub fn defense(&self) -> &DefenseConfig {
        &self.defense
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn profile(&self) -> &TimingProfile {
        self.engine.profile()
    }

    /// Latest completion cycle seen so far.
    pub fn now(&self) -> Cycle {
        self.clock
    }

    pub fn read_timestamp(&self) -> Cycle {
        self.defense.quantize(self.clock)
    }

    fn check_programs(&self, programs: &[AgentProgram]) -> Result<()> {
        let mut seen = HashSet::new();
        for p in programs {
            if p.core >= self.geometry.num_cores {
                return Err(Error::CoreOutOfRange {
                    core: p.core,
                    num_cores: self.geometry.num_cores,
                });
            }
            if !seen.insert(p.core) {
                return Err(Error::DuplicateCore(p.core));
            }
        }
        Ok(())
    }

    /// First cycle at which an agent that starts spinning at `ready`
    /// observes a timestamp of at least `target`. Polls happen every
    /// `POLL_INTERVAL` cycles counted from `ready`.
    fn poll_wake(&self, ready: Cycle, target: Cycle) -> Cycle {
        let g = self.defense.timer_granularity;
        let visible = target.div_ceil(g) * g;
        if ready >= visible {
            ready
        } else {
            ready + (visible - ready).div_ceil(POLL_INTERVAL) * POLL_INTERVAL
        }
    }

    fn sample_jitter(&mut self) -> i64 {
        match &mut self.jitter {
            Some((d, rng)) => d.sample(rng).round() as i64,
            None => 0,
        }
    }

    fn sample_skew(&mut self) -> Cycle {
        match &mut self.skew {
            Some((d, rng)) => d.sample(rng).round() as Cycle,
            None => 0,
        }
    }

    fn inject_interference(&mut self, upto: Cycle) {
        while self.next_interference <= upto as f64 {
            let at = self.next_interference as Cycle;
            let (dist, rng) = self.interference.as_mut().expect("armed");
            let gap = dist.sample(rng);
            let idx = rng.random_range(0..self.noise.interference_lines.len());
            self.next_interference += gap.max(1.0);
            let addr = self.noise.interference_lines[idx];
            let phantom = self.geometry.num_cores;
            let result = self
                .engine
                .apply(phantom, addr, MemOp::Load, &self.defense, at);
            if let Some(t) = &mut self.trace {
                t.push(TraceRow {
                    cycle: at,
                    core: phantom,
                    op: MemOp::Load,
                    addr,
                    result,
                });
            }
        }
    }

    fn jittered(&mut self, base: Cycle, fault: bool) -> Cycle {
        if fault {
            return base;
        }
        let j = self.sample_jitter();
        (base as i64 + j).max(1) as Cycle
    }

    /// Runs the agents to completion. Agents start at the current clock.
    pub fn run(&mut self, programs: &[AgentProgram]) -> Result<Vec<AgentTrace>> {
        self.check_programs(programs)?;
        let start = self.clock;
        let mut states: Vec<AgentState> = programs
            .iter()
            .map(|_| AgentState {
                pc: 0,
                ready: start,
                deadline: None,
                squashing: false,
            })
            .collect();
        let mut traces: Vec<AgentTrace> = programs
            .iter()
            .map(|p| AgentTrace {
                core: p.core,
                records: Vec::new(),
            })
            .collect();

        loop {
            let mut pick: Option<usize> = None;
            for (i, s) in states.iter().enumerate() {
                if s.pc < programs[i].script.len() && pick.is_none_or(|j| s.ready < states[j].ready)
                {
                    pick = Some(i);
                }
            }
            let Some(i) = pick else { break };
            let core = programs[i].core;
            let step = programs[i].script[states[i].pc];
            states[i].pc += 1;

            let mem = match step {
                Step::Load(a) => Some((MemOp::Load, a)),
                Step::Store(a, p) => Some((MemOp::Store(p), a)),
                Step::PrefetchW(a, p) => Some((MemOp::PrefetchW(p), a)),
                Step::Flush(a) => Some((MemOp::Flush, a)),
                _ => None,
            };
            if let Some((op, addr)) = mem {
                let st = &states[i];
                if st.squashing {
                    traces[i].records.push(Record::Squashed { op, addr });
                    continue;
                }
                let t = st.ready;
                if self.interference.is_some() {
                    self.inject_interference(t);
                }
                let result = if let Some(deadline) = st.deadline {
                    let (base, _, fault) = self.engine.preview(core, addr, op, &self.defense);
                    let lat = self.jittered(base, fault);
                    if t + lat > deadline {
                        states[i].squashing = true;
                        traces[i].records.push(Record::Squashed { op, addr });
                        continue;
                    }
                    let mut r = self.engine.apply(core, addr, op, &self.defense, t);
                    r.latency = lat;
                    r
                } else {
                    let mut r = self.engine.apply(core, addr, op, &self.defense, t);
                    r.latency = self.jittered(r.latency, r.fault);
                    r
                };
                let result = OpResult {
                    completed_at: t + result.latency,
                    ..result
                };
                states[i].ready = result.completed_at;
                self.clock = self.clock.max(result.completed_at);
                if let Some(tr) = &mut self.trace {
                    tr.push(TraceRow {
                        cycle: t,
                        core,
                        op,
                        addr,
                        result,
                    });
                }
                traces[i].records.push(Record::Op { op, addr, result });
                continue;
            }

            match step {
                Step::ReadTimestamp => {
                    let ts = self.defense.quantize(states[i].ready);
                    traces[i].records.push(Record::Timestamp(ts));
                }
                Step::Idle(n) => states[i].ready += n,
                Step::WaitUntil(target) => {
                    states[i].ready = self.poll_wake(states[i].ready, target);
                }
                Step::SyncWindow { open, close } => {
                    let wake = self.poll_wake(states[i].ready, open) + self.sample_skew();
                    states[i].ready = wake;
                    if self.defense.quantize(wake) < close {
                        traces[i].records.push(Record::Synced { open, at: wake });
                    } else {
                        traces[i].records.push(Record::Missed { open });
                        let script = &programs[i].script;
                        let mut pc = states[i].pc;
                        while pc < script.len() && !matches!(script[pc], Step::SyncWindow { .. }) {
                            pc += 1;
                        }
                        states[i].pc = pc;
                    }
                }
                Step::Speculate { window } => {
                    states[i].deadline = Some(states[i].ready + window);
                    states[i].squashing = false;
                }
                Step::Resolve => {
                    if let Some(d) = states[i].deadline.take() {
                        states[i].ready = states[i].ready.max(d);
                    }
                    states[i].squashing = false;
                }
                _ => unreachable!("memory steps handled above"),
            }
            self.clock = self.clock.max(states[i].ready);
        }
        Ok(traces)
    }
}

/// Builds a fresh machine and runs `programs` on it.
pub fn run(
    programs: &[AgentProgram],
    profile: &TimingProfile,
    geometry: &CacheGeometry,
    defense: &DefenseConfig,
    noise: &NoiseModel,
) -> Result<Vec<AgentTrace>> {
    let mut m = Machine::new(
        profile.clone(),
        geometry.clone(),
        defense.clone(),
        noise.clone(),
    )?;
    m.run(programs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coherence::CoherenceState;

    const D0: LineAddr = LineAddr(0x100);

    fn quiet_run(programs: &[AgentProgram]) -> Vec<AgentTrace> {
        run(
            programs,
            &TimingProfile::default(),
            &CacheGeometry::default(),
            &DefenseConfig::default(),
            &NoiseModel::quiet(1),
        )
        .unwrap()
    }

    #[test]
    fn timestamp_rounding() {
        assert_eq!(read_timestamp(12345, 1), 12345);
        assert_eq!(read_timestamp(12345, 100), 12300);
        assert_eq!(read_timestamp(12345, 1000) % 1000, 0);
    }

    #[test]
    fn empty_program_list() {
        assert!(quiet_run(&[]).is_empty());
    }

    #[test]
    fn rejects_bad_cores() {
        let p = TimingProfile::default();
        let g = CacheGeometry::default();
        let d = DefenseConfig::default();
        let n = NoiseModel::quiet(0);
        let dup = [AgentProgram::new(1), AgentProgram::new(1)];
        assert_eq!(run(&dup, &p, &g, &d, &n), Err(Error::DuplicateCore(1)));
        let far = [AgentProgram::new(4)];
        assert!(matches!(
            run(&far, &p, &g, &d, &n),
            Err(Error::CoreOutOfRange { core: 4, .. })
        ));
    }

    #[test]
    fn wait_until_polls_every_interval() {
        let mut a = AgentProgram::new(0);
        a.push(Step::Idle(3))
            .push(Step::WaitUntil(101))
            .push(Step::ReadTimestamp)
            .push(Step::WaitUntil(50))
            .push(Step::ReadTimestamp);
        let t = quiet_run(&[a]);
        assert_eq!(t[0].timestamps().collect::<Vec<_>>(), vec![103, 103]);
    }

    #[test]
    fn agents_interleave_by_ready_cycle() {
        // core 0 writes at 500, core 1 reads at 1000: a dirty hit
        let mut w = AgentProgram::new(0);
        w.push(Step::WaitUntil(500))
            .push(Step::PrefetchW(D0, Permission::ReadOnly));
        let mut r = AgentProgram::new(1);
        r.push(Step::WaitUntil(1000)).push(Step::Load(D0));
        let t = quiet_run(&[r, w]);
        let load = t[0].ops().next().unwrap();
        assert_eq!(load.latency, 90);
        assert_eq!(load.state_after, CoherenceState::Shared);
        assert_eq!(load.completed_at, 1090);
    }

    #[test]
    fn missed_window_skips_to_next_window() {
        let mut a = AgentProgram::new(0);
        a.push(Step::Idle(250))
            .push(Step::SyncWindow {
                open: 100,
                close: 200,
            })
            .push(Step::Load(D0))
            .push(Step::SyncWindow {
                open: 300,
                close: 400,
            })
            .push(Step::Load(D0));
        let t = quiet_run(&[a]);
        assert_eq!(t[0].records[0], Record::Missed { open: 100 });
        assert_eq!(t[0].records[1], Record::Synced { open: 300, at: 300 });
        assert_eq!(t[0].ops().count(), 1);
    }

    #[test]
    fn speculation_squashes_late_ops() {
        let mut a = AgentProgram::new(0);
        a.push(Step::Speculate { window: 450 });
        for k in 0..5 {
            a.push(Step::Load(LineAddr(0x1000 + 64 * k)));
        }
        a.push(Step::Resolve).push(Step::ReadTimestamp);
        let t = quiet_run(&[a]);
        // 200-cycle memory loads: two fit in 450 cycles
        assert_eq!(t[0].ops().count(), 2);
        let squashed = t[0]
            .records
            .iter()
            .filter(|r| matches!(r, Record::Squashed { .. }))
            .count();
        assert_eq!(squashed, 3);
        assert_eq!(t[0].timestamps().next(), Some(450));
    }

    #[test]
    fn completion_strictly_increases_under_noise() {
        let mut a = AgentProgram::new(0);
        let mut b = AgentProgram::new(1);
        for _ in 0..200 {
            a.push(Step::PrefetchW(D0, Permission::ReadOnly));
            b.push(Step::Load(D0));
        }
        let noise = NoiseModel {
            interference_rate: 50.0,
            interference_lines: vec![D0],
            jitter_stddev: 40.0,
            ..NoiseModel::default()
        };
        let mut m = Machine::new(
            TimingProfile::default(),
            CacheGeometry::default(),
            DefenseConfig::default(),
            noise,
        )
        .unwrap();
        let t = m.run(&[a, b]).unwrap();
        for tr in &t {
            let done: Vec<_> = tr.ops().map(|r| r.completed_at).collect();
            assert!(done.windows(2).all(|w| w[0] < w[1]));
            assert!(tr.ops().all(|r| r.latency > 0));
        }
        m.engine().check_invariants().unwrap();
    }

    #[test]
    fn same_seed_same_output() {
        let mk = || {
            let mut a = AgentProgram::new(0);
            let mut b = AgentProgram::new(1);
            for k in 0..100 {
                a.push(Step::SyncWindow {
                    open: k * 300,
                    close: k * 300 + 30,
                })
                .push(Step::PrefetchW(D0, Permission::ReadOnly));
                b.push(Step::SyncWindow {
                    open: k * 300 + 150,
                    close: k * 300 + 180,
                })
                .push(Step::Load(D0));
            }
            vec![a, b]
        };
        let noise = NoiseModel {
            interference_lines: vec![D0],
            interference_rate: 5.0,
            ..NoiseModel::default().with_seed(9)
        };
        let go = |n: &NoiseModel| {
            run(
                &mk(),
                &TimingProfile::default(),
                &CacheGeometry::default(),
                &DefenseConfig::default(),
                n,
            )
            .unwrap()
        };
        assert_eq!(go(&noise), go(&noise));
        assert_ne!(go(&noise), go(&noise.clone().with_seed(10)));
    }

    #[test]
    fn trace_csv_shape() {
        let mut m = Machine::new(
            TimingProfile::default(),
            CacheGeometry::default(),
            DefenseConfig::default(),
            NoiseModel::quiet(0),
        )
        .unwrap();
        m.enable_trace();
        let mut a = AgentProgram::new(2);
        a.push(Step::Load(D0));
        m.run(&[a]).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&m.take_trace(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            format!("{TRACE_CSV_HEADER}\n0,2,load,0x100,200,mem,I,E\n")
        );
    }

    #[test]
    fn noise_keys() {
        let mut n = NoiseModel::default();
        assert!(n.apply_key("interference_lines", "0x40, 7").unwrap());
        assert_eq!(n.interference_lines, vec![LineAddr(0x40), LineAddr(7)]);
        assert!(!n.apply_key("bogus", "1").unwrap());
        assert!(n.apply_key("jitter_stddev", "x").is_err());
    }
}
