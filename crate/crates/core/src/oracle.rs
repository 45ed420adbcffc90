//! Brute-force MESI reference and the exhaustive equivalence check against
//! [`CoherenceEngine`].
//!
//! The reference keeps, per line, one state per core and a single LLC
//! presence bit. It has no sets, ways or directory, so it only agrees with
//! the engine on geometries where nothing is ever evicted; the checker
//! builds such a geometry itself.

use rayon::prelude::*;
use serde::Serialize;

use crate::coherence::{
    CacheGeometry, CoherenceEngine, CoherenceState, HitLevel, LineAddr, MemOp, Permission,
    TimingProfile,
};
use crate::machine::DefenseConfig;
use crate::{CoreId, Cycle};

use CoherenceState::{Exclusive as E, Invalid as I, Modified as M, Shared as S};

#[derive(Debug, PartialEq, Eq)]
pub struct RefLine {
    pub cores: Vec<CoherenceState>,
    pub in_llc: bool,
}

impl Clone for RefLine {
    fn clone(&self) -> Self {
        RefLine {
            cores: self.cores.clone(),
            in_llc: self.in_llc,
        }
    }

    fn clone_from(&mut self, source: &Self) {
        self.cores.clone_from(&source.cores);
        self.in_llc = source.in_llc;
    }
}

/// The reference machine: a table of per-core states per line.
#[derive(Debug, PartialEq, Eq)]
pub struct RefModel {
    pub lines: Vec<RefLine>,
    pub inclusive: bool,
}

impl Clone for RefModel {
    fn clone(&self) -> Self {
        RefModel {
            lines: self.lines.clone(),
            inclusive: self.inclusive,
        }
    }

    fn clone_from(&mut self, source: &Self) {
        self.lines.clone_from(&source.lines);
        self.inclusive = source.inclusive;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefOutcome {
    pub level: HitLevel,
    pub latency: Cycle,
    pub fault: bool,
}

impl RefModel {
    pub fn new(num_cores: usize, num_lines: usize, inclusive: bool) -> Self {
        RefModel {
            lines: vec![
                RefLine {
                    cores: vec![I; num_cores],
                    in_llc: false,
                };
                num_lines
            ],
            inclusive,
        }
    }

    pub fn step(&mut self, core: CoreId, line: usize, op: MemOp, p: &TimingProfile) -> RefOutcome {
        let inclusive = self.inclusive;
        let l = &mut self.lines[line];
        let mine = l.cores[core];
        let others = || {
            l.cores
                .iter()
                .enumerate()
                .filter(move |&(c, _)| c != core)
                .map(|(_, &s)| s)
        };
        let other_dirty = others().any(|s| s == M || s == E);
        let other_any = others().any(|s| s != I);
        let out = |level, latency| RefOutcome {
            level,
            latency,
            fault: false,
        };

        match op {
            MemOp::Load => {
                if mine != I {
                    return out(HitLevel::PrivateHit, p.l1_hit);
                }
                if other_dirty {
                    // the owner supplies the data and drops to S; the LLC gets a copy
                    for (c, s) in l.cores.iter_mut().enumerate() {
                        if c != core && *s != I {
                            *s = S;
                        }
                    }
                    l.cores[core] = S;
                    l.in_llc = true;
                    out(HitLevel::LlcHit, p.llc_hit_dirty)
                } else if other_any {
                    l.cores[core] = S;
                    out(HitLevel::LlcHit, p.llc_hit_clean)
                } else if l.in_llc {
                    l.cores[core] = E;
                    out(HitLevel::LlcHit, p.llc_hit_clean)
                } else {
                    l.cores[core] = E;
                    l.in_llc = inclusive;
                    out(HitLevel::MemAccess, p.mem_access)
                }
            }
            MemOp::Store(Permission::ReadOnly) => RefOutcome {
                level: HitLevel::NoFill,
                latency: p.l1_hit,
                fault: true,
            },
            MemOp::Store(Permission::ReadWrite) | MemOp::PrefetchW(_) => {
                let store = matches!(op, MemOp::Store(_));
                let (fast, slow, miss) = if store {
                    (p.l1_hit, p.store_upgrade, p.mem_access + p.store_upgrade)
                } else {
                    (
                        p.prefetchw_fast,
                        p.prefetchw_slow,
                        p.prefetchw_slow + p.mem_access - p.llc_hit_clean,
                    )
                };
                let (slow, miss) = if !store && p.prefetchw_constant_time {
                    (fast, fast)
                } else {
                    (slow, miss)
                };
                let r = if mine == M || mine == E {
                    out(HitLevel::PrivateHit, fast)
                } else if mine == S || other_any || l.in_llc {
                    out(HitLevel::LlcHit, slow)
                } else {
                    l.in_llc = inclusive;
                    out(HitLevel::MemAccess, miss)
                };
                for s in l.cores.iter_mut() {
                    *s = I;
                }
                l.cores[core] = M;
                r
            }
            MemOp::Flush => {
                for s in l.cores.iter_mut() {
                    *s = I;
                }
                l.in_llc = false;
                out(HitLevel::NoFill, p.mem_access)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleConfig {
    pub max_len: usize,
    pub num_cores: usize,
    pub num_lines: usize,
    pub inclusive: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            max_len: 6,
            num_cores: 3,
            num_lines: 2,
            inclusive: true,
        }
    }
}

/// The operation alphabet enumerated by the checker.
pub const ORACLE_OPS: [MemOp; 4] = [
    MemOp::Load,
    MemOp::Store(Permission::ReadWrite),
    MemOp::PrefetchW(Permission::ReadOnly),
    MemOp::Flush,
];

#[derive(Debug, Clone, Default, Serialize)]
pub struct EquivalenceReport {
    /// Non-empty sequences checked (every prefix counts as its own sequence).
    pub sequences: u64,
    pub mismatches: u64,
    pub first_mismatch: Option<String>,
}

impl EquivalenceReport {
    fn merge(mut self, other: EquivalenceReport) -> Self {
        self.sequences += other.sequences;
        self.mismatches += other.mismatches;
        if self.first_mismatch.is_none() {
            self.first_mismatch = other.first_mismatch;
        }
        self
    }
}

type Choice = (MemOp, CoreId, usize);

struct Walker<'a> {
    cfg: &'a OracleConfig,
    profile: &'a TimingProfile,
    defense: DefenseConfig,
    choices: Vec<Choice>,
    /// Scratch states per depth, reused across siblings.
    engines: Vec<CoherenceEngine>,
    models: Vec<RefModel>,
    path: Vec<Choice>,
    report: EquivalenceReport,
}

impl Walker<'_> {
    fn compare(&mut self, depth: usize, out: &crate::OpResult, want: &RefOutcome) {
        self.report.sequences += 1;
        let e = &self.engines[depth];
        let m = &self.models[depth];
        let mut ok =
            out.level == want.level && out.latency == want.latency && out.fault == want.fault;
        for (li, line) in m.lines.iter().enumerate() {
            let addr = LineAddr(li as u64);
            ok &= e.in_llc(addr) == line.in_llc;
            for (c, &s) in line.cores.iter().enumerate() {
                ok &= e.state(c, addr) == s;
            }
        }
        if !ok {
            self.report.mismatches += 1;
            if self.report.first_mismatch.is_none() {
                self.report.first_mismatch = Some(format!(
                    "after {:?}: engine {:?}/{} vs reference {:?}/{}; reference lines {:?}",
                    self.path, out.level, out.latency, want.level, want.latency, m.lines
                ));
            }
        }
    }

    fn descend(&mut self, depth: usize) {
        if depth == self.cfg.max_len {
            return;
        }
        for k in 0..self.choices.len() {
            let (op, core, line) = self.choices[k];
            let (lo, hi) = self.engines.split_at_mut(depth + 1);
            hi[0].clone_from(&lo[depth]);
            let (lo, hi) = self.models.split_at_mut(depth + 1);
            hi[0].clone_from(&lo[depth]);
            let now = (depth as Cycle + 1) * 1000;
            let out =
                self.engines[depth + 1].apply(core, LineAddr(line as u64), op, &self.defense, now);
            let want = self.models[depth + 1].step(core, line, op, self.profile);
            self.path.push((op, core, line));
            self.compare(depth + 1, &out, &want);
            self.descend(depth + 1);
            self.path.pop();
        }
    }
}

/// A geometry with room for every line in every cache, so nothing is evicted.
pub fn eviction_free_geometry(cfg: &OracleConfig) -> CacheGeometry {
    CacheGeometry {
        num_cores: cfg.num_cores,
        private_sets: 1,
        private_ways: cfg.num_lines,
        llc_sets: 1,
        llc_ways: cfg.num_lines,
        inclusive: cfg.inclusive,
    }
}

/// Enumerates every operation sequence up to `cfg.max_len` and compares the
/// engine against the reference after each step.
pub fn check_equivalence(
    cfg: &OracleConfig,
    profile: &TimingProfile,
) -> crate::Result<EquivalenceReport> {
    let geometry = eviction_free_geometry(cfg);
    let root = CoherenceEngine::new(geometry, profile.clone())?;
    let root_model = RefModel::new(cfg.num_cores, cfg.num_lines, cfg.inclusive);
    let mut choices = Vec::new();
    for op in ORACLE_OPS {
        for core in 0..cfg.num_cores {
            for line in 0..cfg.num_lines {
                choices.push((op, core, line));
            }
        }
    }
    if cfg.max_len == 0 {
        return Ok(EquivalenceReport::default());
    }
    // one subtree per first operation
    let report = choices
        .par_iter()
        .map(|&first| {
            let mut w = Walker {
                cfg,
                profile,
                defense: DefenseConfig::default(),
                choices: choices.clone(),
                engines: vec![root.clone(); cfg.max_len + 1],
                models: vec![root_model.clone(); cfg.max_len + 1],
                path: vec![first],
                report: EquivalenceReport::default(),
            };
            let (op, core, line) = first;
            let out = w.engines[1].apply(core, LineAddr(line as u64), op, &w.defense, 0);
            let want = w.models[1].step(core, line, op, profile);
            w.compare(1, &out, &want);
            w.descend(1);
            w.report
        })
        .reduce(EquivalenceReport::default, EquivalenceReport::merge);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_examples() {
        let p = TimingProfile::default();
        let mut m = RefModel::new(2, 1, true);
        assert_eq!(m.step(0, 0, MemOp::Load, &p).latency, 200);
        assert_eq!(m.lines[0].cores, vec![E, I]);
        m.step(0, 0, MemOp::Store(Permission::ReadWrite), &p);
        let r = m.step(1, 0, MemOp::Load, &p);
        assert_eq!((r.level, r.latency), (HitLevel::LlcHit, 90));
        assert_eq!(m.lines[0].cores, vec![S, S]);
    }

    #[test]
    fn flush_load_flush_returns_to_flushed_state() {
        let p = TimingProfile::default();
        let mut m = RefModel::new(3, 1, true);
        m.step(1, 0, MemOp::PrefetchW(Permission::ReadOnly), &p);
        m.step(0, 0, MemOp::Flush, &p);
        let after_first = m.clone();
        m.step(2, 0, MemOp::Load, &p);
        m.step(0, 0, MemOp::Flush, &p);
        assert_eq!(m, after_first);
    }

    #[test]
    fn short_sequences_agree() {
        for inclusive in [true, false] {
            let cfg = OracleConfig {
                max_len: 3,
                inclusive,
                ..OracleConfig::default()
            };
            let r = check_equivalence(&cfg, &TimingProfile::default()).unwrap();
            assert_eq!(r.sequences, 24 + 24 * 24 + 24 * 24 * 24);
            assert_eq!(r.mismatches, 0, "{:?}", r.first_mismatch);
        }
    }
}
