//! MESI coherence engine over per-core private caches and one shared LLC.
//!
//! L1 and L2 are collapsed into a single private level. The directory is
//! precise: it records every private copy, so it is also what makes a
//! non-inclusive LLC work (a line may live only in private caches).
//!
//! Every request is atomic and is charged a latency from the active
//! [`TimingProfile`]:
//!
//! | request   | private M/E | private S     | remote M/E    | remote S / LLC only | memory                 |
//! |-----------|-------------|---------------|---------------|---------------------|------------------------|
//! | load      | l1_hit      | l1_hit        | llc_hit_dirty | llc_hit_clean       | mem_access             |
//! | store     | l1_hit      | store_upgrade | store_upgrade | store_upgrade       | mem + store_upgrade    |
//! | prefetchw | pf_fast     | pf_slow       | pf_slow       | pf_slow             | pf_slow + mem - clean  |

mod profile;
mod transition;

pub use profile::{CacheGeometry, TimingProfile, BUILTIN_PROFILES};
pub use transition::{transition, Action, CoherenceState, Event};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::hash::{BuildHasherDefault, Hasher};

use crate::error::Result;
use crate::machine::DefenseConfig;
use crate::{CoreId, Cycle};

/// One cache-line-sized block (byte address / 64).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineAddr(pub u64);

impl fmt::Display for LineAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Permission {
    ReadOnly,
    ReadWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HitLevel {
    PrivateHit,
    LlcHit,
    MemAccess,
    NoFill,
}

impl fmt::Display for HitLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HitLevel::PrivateHit => "private",
            HitLevel::LlcHit => "llc",
            HitLevel::MemAccess => "mem",
            HitLevel::NoFill => "nofill",
        };
        f.write_str(s)
    }
}

/// Outcome of one memory operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpResult {
    pub latency: Cycle,
    pub level: HitLevel,
    pub state_before: CoherenceState,
    pub state_after: CoherenceState,
    pub fault: bool,
    pub completed_at: Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemOp {
    Load,
    Store(Permission),
    PrefetchW(Permission),
    Flush,
}

impl fmt::Display for MemOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MemOp::Load => "load",
            MemOp::Store(_) => "store",
            MemOp::PrefetchW(_) => "prefetchw",
            MemOp::Flush => "flush",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineRecord {
    pub addr: LineAddr,
    pub state: CoherenceState,
    pub lru_stamp: Cycle,
}

/// Multiplicative hash for line addresses; SipHash is needlessly slow here.
#[derive(Default)]
struct LineHasher(u64);

impl Hasher for LineHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0.rotate_left(8) ^ b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
}

type LineMap<V> = HashMap<LineAddr, V, BuildHasherDefault<LineHasher>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DirectoryEntry {
    sharers: u64,
    owner: Option<CoreId>,
}

impl DirectoryEntry {
    pub fn sharers(&self) -> impl Iterator<Item = CoreId> + '_ {
        (0..64).filter(move |c| self.sharers & (1u64 << c) != 0)
    }

    pub fn holds(&self, core: CoreId) -> bool {
        self.sharers & (1u64 << core) != 0
    }

    pub fn owner(&self) -> Option<CoreId> {
        self.owner
    }

    pub fn sharer_count(&self) -> u32 {
        self.sharers.count_ones()
    }
}

/// A set-associative array of line records with per-set LRU replacement.
#[derive(Debug)]
struct SetArray {
    sets: Vec<Vec<LineRecord>>,
    ways: usize,
}

impl Clone for SetArray {
    fn clone(&self) -> Self {
        SetArray {
            sets: self.sets.clone(),
            ways: self.ways,
        }
    }

    // reuses the per-set buffers; the exhaustive checker clones states constantly
    fn clone_from(&mut self, source: &Self) {
        self.sets.clone_from(&source.sets);
        self.ways = source.ways;
    }
}

impl SetArray {
    fn new(sets: usize, ways: usize) -> Self {
        SetArray {
            sets: vec![Vec::new(); sets],
            ways,
        }
    }

    fn set_of(&self, addr: LineAddr) -> usize {
        (addr.0 % self.sets.len() as u64) as usize
    }

    fn find(&self, addr: LineAddr) -> Option<&LineRecord> {
        self.sets[self.set_of(addr)].iter().find(|r| r.addr == addr)
    }

    fn find_mut(&mut self, addr: LineAddr) -> Option<&mut LineRecord> {
        let s = self.set_of(addr);
        self.sets[s].iter_mut().find(|r| r.addr == addr)
    }

    /// Inserts a line that is known to be absent; returns the LRU victim if the set was full.
    fn insert(&mut self, rec: LineRecord) -> Option<LineRecord> {
        let ways = self.ways;
        let s = self.set_of(rec.addr);
        let set = &mut self.sets[s];
        if set.len() < ways {
            set.push(rec);
            return None;
        }
        // ties on the stamp go to the lowest way index
        let (victim_way, _) = set
            .iter()
            .enumerate()
            .min_by_key(|(i, r)| (r.lru_stamp, *i))
            .expect("full set is non-empty");
        Some(std::mem::replace(&mut set[victim_way], rec))
    }

    fn remove(&mut self, addr: LineAddr) -> Option<LineRecord> {
        let s = self.set_of(addr);
        let set = &mut self.sets[s];
        let pos = set.iter().position(|r| r.addr == addr)?;
        Some(set.remove(pos))
    }

    fn iter(&self) -> impl Iterator<Item = &LineRecord> {
        self.sets.iter().flatten()
    }
}

#[derive(Debug)]
pub struct CoherenceEngine {
    geometry: CacheGeometry,
    profile: TimingProfile,
    private: Vec<SetArray>,
    /// LLC lines; the record state is Shared for clean data, Modified after a write-back.
    llc: SetArray,
    directory: LineMap<DirectoryEntry>,
}

impl Clone for CoherenceEngine {
    fn clone(&self) -> Self {
        CoherenceEngine {
            geometry: self.geometry.clone(),
            profile: self.profile.clone(),
            private: self.private.clone(),
            llc: self.llc.clone(),
            directory: self.directory.clone(),
        }
    }

    fn clone_from(&mut self, source: &Self) {
        self.geometry.clone_from(&source.geometry);
        if self.profile != source.profile {
            self.profile.clone_from(&source.profile);
        }
        self.private.clone_from(&source.private);
        self.llc.clone_from(&source.llc);
        self.directory.clone_from(&source.directory);
    }
}

impl CoherenceEngine {
    pub fn new(geometry: CacheGeometry, profile: TimingProfile) -> Result<Self> {
        geometry.validate_with_limit(64)?;
        profile.validate()?;
        let private = (0..geometry.num_cores)
            .map(|_| SetArray::new(geometry.private_sets, geometry.private_ways))
            .collect();
        let llc = SetArray::new(geometry.llc_sets, geometry.llc_ways);
        Ok(CoherenceEngine {
            geometry,
            profile,
            private,
            llc,
            directory: LineMap::default(),
        })
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geometry
    }

    pub fn profile(&self) -> &TimingProfile {
        &self.profile
    }

    pub fn state(&self, core: CoreId, addr: LineAddr) -> CoherenceState {
        self.private[core]
            .find(addr)
            .map_or(CoherenceState::Invalid, |r| r.state)
    }

    pub fn in_llc(&self, addr: LineAddr) -> bool {
        self.llc.find(addr).is_some()
    }

    pub fn directory_entry(&self, addr: LineAddr) -> Option<&DirectoryEntry> {
        self.directory.get(&addr)
    }

    pub fn apply_load(&mut self, core: CoreId, addr: LineAddr, now: Cycle) -> OpResult {
        self.apply(core, addr, MemOp::Load, &DefenseConfig::default(), now)
    }

    pub fn apply_store(
        &mut self,
        core: CoreId,
        addr: LineAddr,
        permission: Permission,
        now: Cycle,
    ) -> OpResult {
        self.apply(
            core,
            addr,
            MemOp::Store(permission),
            &DefenseConfig::default(),
            now,
        )
    }

    pub fn apply_prefetchw(
        &mut self,
        core: CoreId,
        addr: LineAddr,
        permission: Permission,
        defense: &DefenseConfig,
        now: Cycle,
    ) -> OpResult {
        self.apply(core, addr, MemOp::PrefetchW(permission), defense, now)
    }

    pub fn apply_flush(&mut self, core: CoreId, addr: LineAddr, now: Cycle) -> OpResult {
        self.apply(core, addr, MemOp::Flush, &DefenseConfig::default(), now)
    }

    /// Latency and level `op` would have right now, without touching any state.
    pub fn preview(
        &self,
        core: CoreId,
        addr: LineAddr,
        op: MemOp,
        defense: &DefenseConfig,
    ) -> (Cycle, HitLevel, bool) {
        let c = self.classify(core, addr, op, defense);
        (c.latency, c.level, c.fault)
    }

    pub fn apply(
        &mut self,
        core: CoreId,
        addr: LineAddr,
        op: MemOp,
        defense: &DefenseConfig,
        now: Cycle,
    ) -> OpResult {
        let before = self.state(core, addr);
        let c = self.classify(core, addr, op, defense);
        if c.mutate {
            match op {
                MemOp::Load => self.do_load(core, addr, now),
                MemOp::Store(_) => self.do_write(core, addr, Event::LocalWrite, now),
                MemOp::PrefetchW(_) => self.do_write(core, addr, Event::LocalPrefetchW, now),
                MemOp::Flush => self.do_flush(addr),
            }
        }
        OpResult {
            latency: c.latency,
            level: c.level,
            state_before: before,
            state_after: self.state(core, addr),
            fault: c.fault,
            completed_at: now + c.latency,
        }
    }

    fn classify(
        &self,
        core: CoreId,
        addr: LineAddr,
        op: MemOp,
        defense: &DefenseConfig,
    ) -> Classified {
        let p = &self.profile;
        let own = self.state(core, addr);
        let entry = self.directory.get(&addr).copied().unwrap_or_default();
        let others = entry.sharers & !(1u64 << core);
        let remote_owner = entry.owner.filter(|&o| o != core);
        let llc = self.in_llc(addr);
        let ok = |latency, level| Classified {
            latency,
            level,
            fault: false,
            mutate: true,
        };

        match op {
            MemOp::Load => {
                if own != CoherenceState::Invalid {
                    ok(p.l1_hit, HitLevel::PrivateHit)
                } else if remote_owner.is_some() {
                    ok(p.llc_hit_dirty, HitLevel::LlcHit)
                } else if others != 0 || llc {
                    ok(p.llc_hit_clean, HitLevel::LlcHit)
                } else {
                    ok(p.mem_access, HitLevel::MemAccess)
                }
            }
            MemOp::Store(perm) => {
                if perm == Permission::ReadOnly {
                    return Classified {
                        latency: p.l1_hit,
                        level: HitLevel::NoFill,
                        fault: true,
                        mutate: false,
                    };
                }
                if own.is_owned() {
                    ok(p.l1_hit, HitLevel::PrivateHit)
                } else if own == CoherenceState::Shared || others != 0 || llc {
                    ok(p.store_upgrade, HitLevel::LlcHit)
                } else {
                    ok(p.mem_access + p.store_upgrade, HitLevel::MemAccess)
                }
            }
            MemOp::PrefetchW(perm) => {
                if defense.permission_check && perm == Permission::ReadOnly {
                    return Classified {
                        latency: p.prefetchw_fast,
                        level: HitLevel::NoFill,
                        fault: defense.fault_on_check,
                        mutate: false,
                    };
                }
                let mut c = if own.is_owned() {
                    ok(p.prefetchw_fast, HitLevel::PrivateHit)
                } else if own == CoherenceState::Shared || others != 0 || llc {
                    ok(p.prefetchw_slow, HitLevel::LlcHit)
                } else {
                    ok(
                        p.prefetchw_slow + (p.mem_access - p.llc_hit_clean),
                        HitLevel::MemAccess,
                    )
                };
                if defense.constant_time_prefetchw || p.prefetchw_constant_time {
                    c.latency = p.prefetchw_fast;
                }
                c
            }
            MemOp::Flush => Classified {
                latency: p.mem_access,
                level: HitLevel::NoFill,
                fault: false,
                mutate: true,
            },
        }
    }

    fn do_load(&mut self, core: CoreId, addr: LineAddr, now: Cycle) {
        if let Some(rec) = self.private[core].find_mut(addr) {
            rec.lru_stamp = now;
            return;
        }
        let entry = self.directory.get(&addr).copied().unwrap_or_default();
        if let Some(owner) = entry.owner {
            let (next, actions) = transition(self.state(owner, addr), Event::RemoteRead);
            self.set_private_state(owner, addr, next);
            if actions.contains(&Action::UpdateLlc) || !self.geometry.inclusive {
                // intervention leaves a clean copy in the LLC
                self.ensure_llc(addr, now);
            }
            self.directory.entry(addr).or_default().owner = None;
        } else if entry.sharers == 0 && !self.in_llc(addr) && self.geometry.inclusive {
            self.ensure_llc(addr, now);
        } else if let Some(rec) = self.llc.find_mut(addr) {
            rec.lru_stamp = now;
        }
        let shared = self.directory.get(&addr).is_some_and(|e| e.sharers != 0);
        let (state, _) = transition(CoherenceState::Invalid, Event::LocalRead { shared });
        self.fill(core, addr, state, now);
    }

    fn do_write(&mut self, core: CoreId, addr: LineAddr, event: Event, now: Cycle) {
        let remote_event = match event {
            Event::LocalWrite => Event::RemoteWrite,
            _ => Event::RemotePrefetchW,
        };
        let entry = self.directory.get(&addr).copied().unwrap_or_default();
        for other in entry.sharers().filter(|&c| c != core) {
            let (next, _) = transition(self.state(other, addr), remote_event);
            debug_assert_eq!(next, CoherenceState::Invalid);
            self.private[other].remove(addr);
        }
        let own = self.state(core, addr);
        let (next, _) = transition(own, event);
        if own == CoherenceState::Invalid {
            if self.geometry.inclusive {
                self.ensure_llc(addr, now);
            } else if let Some(rec) = self.llc.find_mut(addr) {
                rec.lru_stamp = now;
            }
            self.directory.insert(addr, DirectoryEntry::default());
            self.fill(core, addr, next, now);
        } else {
            let rec = self.private[core].find_mut(addr).expect("held line");
            rec.state = next;
            rec.lru_stamp = now;
        }
        self.directory.insert(
            addr,
            DirectoryEntry {
                sharers: 1u64 << core,
                owner: Some(core),
            },
        );
    }

    fn do_flush(&mut self, addr: LineAddr) {
        if let Some(entry) = self.directory.remove(&addr) {
            for c in entry.sharers() {
                self.private[c].remove(addr);
            }
        }
        self.llc.remove(addr);
    }

    fn set_private_state(&mut self, core: CoreId, addr: LineAddr, state: CoherenceState) {
        if let Some(rec) = self.private[core].find_mut(addr) {
            rec.state = state;
        }
    }

    /// Places `addr` into `core`'s private cache and records it in the directory.
    fn fill(&mut self, core: CoreId, addr: LineAddr, state: CoherenceState, now: Cycle) {
        let victim = self.private[core].insert(LineRecord {
            addr,
            state,
            lru_stamp: now,
        });
        let entry = self.directory.entry(addr).or_default();
        entry.sharers |= 1u64 << core;
        if state.is_owned() {
            entry.owner = Some(core);
        }
        if let Some(v) = victim {
            self.evict_private(core, v, now);
        }
    }

    fn evict_private(&mut self, core: CoreId, victim: LineRecord, now: Cycle) {
        let (_, actions) = transition(victim.state, Event::Evict);
        let remaining = match self.directory.get_mut(&victim.addr) {
            Some(e) => {
                e.sharers &= !(1u64 << core);
                if e.owner == Some(core) {
                    e.owner = None;
                }
                e.sharers
            }
            None => 0,
        };
        if remaining == 0 {
            self.directory.remove(&victim.addr);
        }
        let dirty = actions.contains(&Action::WriteBack);
        if !self.geometry.inclusive && remaining == 0 {
            // non-inclusive LLC acts as a victim cache for private evictions
            self.ensure_llc(victim.addr, now);
        }
        if dirty {
            if let Some(rec) = self.llc.find_mut(victim.addr) {
                rec.state = CoherenceState::Modified;
            }
        }
    }

    fn ensure_llc(&mut self, addr: LineAddr, now: Cycle) {
        if let Some(rec) = self.llc.find_mut(addr) {
            rec.lru_stamp = now;
            return;
        }
        let victim = self.llc.insert(LineRecord {
            addr,
            state: CoherenceState::Shared,
            lru_stamp: now,
        });
        if let (Some(v), true) = (victim, self.geometry.inclusive) {
            // back-invalidate to keep inclusion
            if let Some(entry) = self.directory.remove(&v.addr) {
                for c in entry.sharers() {
                    self.private[c].remove(v.addr);
                }
            }
        }
    }

    /// Every line currently held in some private cache, with its holders.
    pub fn private_lines(&self) -> Vec<(LineAddr, Vec<(CoreId, CoherenceState)>)> {
        let mut map: HashMap<LineAddr, Vec<(CoreId, CoherenceState)>> = HashMap::new();
        for (core, cache) in self.private.iter().enumerate() {
            for rec in cache.iter() {
                map.entry(rec.addr).or_default().push((core, rec.state));
            }
        }
        let mut v: Vec<_> = map.into_iter().collect();
        v.sort_by_key(|(a, _)| *a);
        v
    }

    /// Checks the protocol invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let lines = self.private_lines();
        for (addr, holders) in &lines {
            let owned = holders.iter().filter(|(_, s)| s.is_owned()).count();
            if owned > 1 || (owned == 1 && holders.len() > 1) {
                return Err(format!("single-owner violated for {addr}: {holders:?}"));
            }
            if holders.len() >= 2 && holders.iter().any(|(_, s)| *s != CoherenceState::Shared) {
                return Err(format!(
                    "shared-implies-clean violated for {addr}: {holders:?}"
                ));
            }
            if self.geometry.inclusive && !self.in_llc(*addr) {
                return Err(format!("inclusion violated for {addr}"));
            }
            let entry = self
                .directory
                .get(addr)
                .ok_or_else(|| format!("no directory entry for cached {addr}"))?;
            let mask = holders.iter().fold(0u64, |m, (c, _)| m | (1u64 << c));
            if entry.sharers != mask {
                return Err(format!("directory sharers mismatch for {addr}"));
            }
            let owner = holders.iter().find(|(_, s)| s.is_owned()).map(|(c, _)| *c);
            if entry.owner != owner {
                return Err(format!("directory owner mismatch for {addr}"));
            }
        }
        for (addr, entry) in &self.directory {
            if entry.sharers == 0 {
                return Err(format!("empty directory entry for {addr}"));
            }
            if let Some(o) = entry.owner {
                if entry.sharers != 1u64 << o {
                    return Err(format!("owner set but other sharers recorded for {addr}"));
                }
            }
            if !lines.iter().any(|(a, _)| a == addr) {
                return Err(format!("stale directory entry for {addr}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Classified {
    latency: Cycle,
    level: HitLevel,
    fault: bool,
    mutate: bool,
}
