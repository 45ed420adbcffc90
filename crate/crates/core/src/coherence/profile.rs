//! Latency tables and cache geometries, including the built-in processor models.

use serde::{Deserialize, Serialize};

use crate::config::{parse_bool, parse_num, KvFile};
use crate::error::{Error, Result};
use crate::Cycle;

/// Named latency table for one processor model. All values are in core cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingProfile {
    pub name: String,
    pub clock_hz: f64,
    pub l1_hit: Cycle,
    /// LLC hit with the line clean (S in the private caches, or no private copy).
    pub llc_hit_clean: Cycle,
    /// LLC hit that needs an intervention from a remote M/E holder.
    pub llc_hit_dirty: Cycle,
    pub mem_access: Cycle,
    pub prefetchw_fast: Cycle,
    pub prefetchw_slow: Cycle,
    pub store_upgrade: Cycle,
    /// Hardware that retires PREFETCHW in fixed time whatever the line state.
    #[serde(default)]
    pub prefetchw_constant_time: bool,
}

pub const BUILTIN_PROFILES: [&str; 5] = [
    "i7-6700K",
    "i7-7700K",
    "xeon-8124",
    "xeon-8151",
    "xeon-8375C-constant-time",
];

impl TimingProfile {
    pub fn i7_7700k() -> Self {
        TimingProfile {
            name: "i7-7700K".into(),
            clock_hz: 4.2e9,
            l1_hit: 30,
            llc_hit_clean: 60,
            llc_hit_dirty: 90,
            mem_access: 200,
            prefetchw_fast: 70,
            prefetchw_slow: 120,
            store_upgrade: 90,
            prefetchw_constant_time: false,
        }
    }

    /// Server parts: the intervention hit is close to a memory access.
    fn skylake_sp(name: &str, clock_hz: f64) -> Self {
        TimingProfile {
            name: name.into(),
            clock_hz,
            l1_hit: 30,
            llc_hit_clean: 90,
            llc_hit_dirty: 180,
            mem_access: 200,
            prefetchw_fast: 70,
            prefetchw_slow: 190,
            store_upgrade: 180,
            prefetchw_constant_time: false,
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let p = match name {
            "i7-7700K" => Self::i7_7700k(),
            "i7-6700K" => TimingProfile {
                name: name.into(),
                clock_hz: 3.4e9,
                ..Self::i7_7700k()
            },
            "xeon-8124" => Self::skylake_sp(name, 3.0e9),
            "xeon-8151" => Self::skylake_sp(name, 3.4e9),
            "xeon-8375C-constant-time" => TimingProfile {
                prefetchw_constant_time: true,
                ..Self::skylake_sp(name, 2.9e9)
            },
            _ => return Err(Error::UnknownProfile(name.to_string())),
        };
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = self.l1_hit < self.llc_hit_clean
            && self.llc_hit_clean < self.llc_hit_dirty
            && self.llc_hit_dirty <= self.mem_access;
        if !ordered {
            return Err(Error::Config(format!(
                "profile {}: need l1_hit < llc_hit_clean < llc_hit_dirty <= mem_access, got {} {} {} {}",
                self.name, self.l1_hit, self.llc_hit_clean, self.llc_hit_dirty, self.mem_access
            )));
        }
        if self.prefetchw_fast >= self.prefetchw_slow {
            return Err(Error::Config(format!(
                "profile {}: need prefetchw_fast < prefetchw_slow",
                self.name
            )));
        }
        if self.l1_hit == 0 || self.store_upgrade == 0 || self.prefetchw_fast == 0 {
            return Err(Error::Config(format!(
                "profile {}: latencies must be positive",
                self.name
            )));
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(Error::Config(format!(
                "profile {}: clock_hz must be positive",
                self.name
            )));
        }
        Ok(())
    }

    /// Applies one config key. Returns `Ok(false)` when the key is not a profile key.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "profile_name" => self.name = value.to_string(),
            "clock_hz" => self.clock_hz = parse_num(key, value)?,
            "l1_hit" => self.l1_hit = parse_num(key, value)?,
            "llc_hit_clean" => self.llc_hit_clean = parse_num(key, value)?,
            "llc_hit_dirty" => self.llc_hit_dirty = parse_num(key, value)?,
            "mem_access" => self.mem_access = parse_num(key, value)?,
            "prefetchw_fast" => self.prefetchw_fast = parse_num(key, value)?,
            "prefetchw_slow" => self.prefetchw_slow = parse_num(key, value)?,
            "store_upgrade" => self.store_upgrade = parse_num(key, value)?,
            "prefetchw_constant_time" => self.prefetchw_constant_time = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Loads a profile from `key=value` text. A `profile=<builtin>` line picks
    /// the base table (default i7-7700K); remaining keys override it.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let base = kv.get("profile").unwrap_or("i7-7700K");
        let mut p = Self::builtin(base)?;
        for entry in kv.entries() {
            if entry.key == "profile" {
                continue;
            }
            if !p.apply_key(&entry.key, &entry.value)? {
                return Err(Error::UnknownKey {
                    key: entry.key.clone(),
                    line: entry.line,
                });
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn kb_per_sec(&self, cycles_per_bit: u64) -> f64 {
        self.bytes_per_sec(cycles_per_bit) / 1024.0
    }

    /// Raw rate of one bit per `cycles_per_bit` cycles, 8 bits per byte.
    pub fn bytes_per_sec(&self, cycles_per_bit: u64) -> f64 {
        self.clock_hz / cycles_per_bit as f64 / 8.0
    }
}

impl Default for TimingProfile {
    fn default() -> Self {
        Self::i7_7700k()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub num_cores: usize,
    pub private_sets: usize,
    pub private_ways: usize,
    pub llc_sets: usize,
    pub llc_ways: usize,
    pub inclusive: bool,
}

impl CacheGeometry {
    /// Geometry shipped alongside a built-in profile: desktop parts have
    /// inclusive LLCs, the Skylake-SP servers do not.
    pub fn for_profile(name: &str) -> Result<Self> {
        let g = match name {
            "i7-7700K" => CacheGeometry::default(),
            "i7-6700K" => CacheGeometry {
                num_cores: 6,
                ..CacheGeometry::default()
            },
            "xeon-8124" | "xeon-8151" | "xeon-8375C-constant-time" => CacheGeometry {
                private_sets: 1024,
                private_ways: 16,
                llc_sets: 2048,
                llc_ways: 11,
                inclusive: false,
                ..CacheGeometry::default()
            },
            _ => return Err(Error::UnknownProfile(name.to_string())),
        };
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_limit(63)
    }

    /// The engine may carry one extra phantom core beyond the user-visible limit.
    pub(crate) fn validate_with_limit(&self, max_cores: usize) -> Result<()> {
        if self.num_cores < 2 {
            return Err(Error::Config(format!(
                "num_cores must be >= 2, got {}",
                self.num_cores
            )));
        }
        if self.num_cores > max_cores {
            return Err(Error::Config(format!(
                "at most {max_cores} cores are supported"
            )));
        }
        for (name, v) in [
            ("private_sets", self.private_sets),
            ("private_ways", self.private_ways),
            ("llc_sets", self.llc_sets),
            ("llc_ways", self.llc_ways),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "num_cores" => self.num_cores = parse_num(key, value)?,
            "private_sets" => self.private_sets = parse_num(key, value)?,
            "private_ways" => self.private_ways = parse_num(key, value)?,
            "llc_sets" => self.llc_sets = parse_num(key, value)?,
            "llc_ways" => self.llc_ways = parse_num(key, value)?,
            "inclusive" => self.inclusive = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_config_str(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let mut g = match kv.get("profile") {
            Some(name) => Self::for_profile(name)?,
            None => Self::default(),
        };
        for entry in kv.entries() {
            if entry.key == "profile" {
                continue;
            }
            if !g.apply_key(&entry.key, &entry.value)? {
                return Err(Error::UnknownKey {
                    key: entry.key.clone(),
                    line: entry.line,
                });
            }
        }
        g.validate()?;
        Ok(g)
    }
}

impl Default for CacheGeometry {
    /// Four cores, 512 KiB private (L1+L2 collapsed), 8 MiB inclusive LLC.
    fn default() -> Self {
        CacheGeometry {
            num_cores: 4,
            private_sets: 1024,
            private_ways: 8,
            llc_sets: 8192,
            llc_ways: 16,
            inclusive: true,
        }
    }
}
