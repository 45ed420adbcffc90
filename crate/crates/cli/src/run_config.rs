//! Resolution of the run configuration: built-in profile, then config file,
//! then command-line flags.

use std::path::{Path, PathBuf};

use prefetch_sim::channels::MachineSetup;
use prefetch_sim::config::KvFile;
use prefetch_sim::{CacheGeometry, Error, Result, TimingProfile, BUILTIN_PROFILES};

pub const DEFAULT_PROFILE: &str = "i7-7700K";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub setup: MachineSetup,
    pub output_dir: PathBuf,
}

/// Values given on the command line. `set` holds `key=value` pairs applied
/// after the dedicated flags' config-file counterparts.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub quiet: bool,
    pub set: Vec<(String, String)>,
    pub output_dir: Option<PathBuf>,
}

/// Picks the base profile and geometry. `spec` is a built-in name or a path to
/// a `key=value` file whose own `profile=` line (if any) names its base.
fn base(spec: &str) -> Result<MachineSetup> {
    if BUILTIN_PROFILES.contains(&spec) {
        return Ok(MachineSetup {
            profile: TimingProfile::builtin(spec)?,
            geometry: CacheGeometry::for_profile(spec)?,
            ..MachineSetup::default()
        });
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(Error::UnknownProfile(spec.to_string()));
    }
    let kv = KvFile::parse(&std::fs::read_to_string(path)?)?;
    let mut setup = base(kv.get("profile").unwrap_or(DEFAULT_PROFILE))?;
    for e in kv.entries().iter().filter(|e| e.key != "profile") {
        if !apply(&mut setup, &e.key, &e.value)? {
            return Err(Error::UnknownKey {
                key: e.key.clone(),
                line: e.line,
            });
        }
    }
    Ok(setup)
}

fn apply(setup: &mut MachineSetup, key: &str, value: &str) -> Result<bool> {
    Ok(setup.profile.apply_key(key, value)?
        || setup.geometry.apply_key(key, value)?
        || setup.defense.apply_key(key, value)?
        || setup.noise.apply_key(key, value)?)
}

impl RunConfig {
    /// Builds the configuration from optional config-file text and flags.
    pub fn resolve(file: Option<&str>, flags: &Overrides) -> Result<Self> {
        let kv = match file {
            Some(text) => KvFile::parse(text)?,
            None => KvFile::default(),
        };
        let profile = flags
            .profile
            .as_deref()
            .or(kv.get("profile"))
            .unwrap_or(DEFAULT_PROFILE);
        let mut setup = base(profile)?;
        let mut output_dir = PathBuf::from(".");
        for e in kv.entries() {
            match e.key.as_str() {
                "profile" => {}
                "output_dir" => output_dir = PathBuf::from(&e.value),
                key => {
                    if !apply(&mut setup, key, &e.value)? {
                        return Err(Error::UnknownKey {
                            key: e.key.clone(),
                            line: e.line,
                        });
                    }
                }
            }
        }
        if flags.quiet {
            let seed = setup.noise.seed;
            setup.noise = prefetch_sim::NoiseModel::quiet(seed);
        }
        for (key, value) in &flags.set {
            if key == "output_dir" {
                output_dir = PathBuf::from(value);
            } else if !apply(&mut setup, key, value)? {
                return Err(Error::UnknownKey {
                    key: key.clone(),
                    line: 0,
                });
            }
        }
        if let Some(seed) = flags.seed {
            setup.noise.seed = seed;
        }
        if let Some(dir) = &flags.output_dir {
            output_dir = dir.clone();
        }
        setup.profile.validate()?;
        setup.geometry.validate()?;
        setup.defense.validate()?;
        setup.noise.validate()?;
        Ok(RunConfig { setup, output_dir })
    }

    pub fn seed(&self) -> u64 {
        self.setup.noise.seed
    }

    /// Every resolved value as `key=value` pairs; fed back as a config file
    /// they reproduce this configuration.
    pub fn echo(&self) -> Vec<(String, String)> {
        let p = &self.setup.profile;
        let g = &self.setup.geometry;
        let d = &self.setup.defense;
        let n = &self.setup.noise;
        let lines: Vec<String> = n.interference_lines.iter().map(|l| l.to_string()).collect();
        [
            ("profile_name", p.name.clone()),
            ("clock_hz", p.clock_hz.to_string()),
            ("l1_hit", p.l1_hit.to_string()),
            ("llc_hit_clean", p.llc_hit_clean.to_string()),
            ("llc_hit_dirty", p.llc_hit_dirty.to_string()),
            ("mem_access", p.mem_access.to_string()),
            ("prefetchw_fast", p.prefetchw_fast.to_string()),
            ("prefetchw_slow", p.prefetchw_slow.to_string()),
            ("store_upgrade", p.store_upgrade.to_string()),
            (
                "prefetchw_constant_time",
                p.prefetchw_constant_time.to_string(),
            ),
            ("num_cores", g.num_cores.to_string()),
            ("private_sets", g.private_sets.to_string()),
            ("private_ways", g.private_ways.to_string()),
            ("llc_sets", g.llc_sets.to_string()),
            ("llc_ways", g.llc_ways.to_string()),
            ("inclusive", g.inclusive.to_string()),
            ("permission_check", d.permission_check.to_string()),
            ("fault_on_check", d.fault_on_check.to_string()),
            (
                "constant_time_prefetchw",
                d.constant_time_prefetchw.to_string(),
            ),
            ("timer_granularity", d.timer_granularity.to_string()),
            ("seed", n.seed.to_string()),
            ("jitter_stddev", n.jitter_stddev.to_string()),
            ("interference_rate", n.interference_rate.to_string()),
            ("interference_lines", lines.join(",")),
            ("sync_skew_mean", n.sync_skew_mean.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file_or_flags() {
        let c = RunConfig::resolve(None, &Overrides::default()).unwrap();
        assert_eq!(c.setup, MachineSetup::default());
        assert_eq!(c.output_dir, PathBuf::from("."));
    }

    #[test]
    fn flags_beat_file_beat_profile() {
        let file = "profile = xeon-8151\njitter_stddev = 2\nmem_access = 210\nseed = 4\n";
        let flags = Overrides {
            seed: Some(9),
            set: vec![("mem_access".into(), "220".into())],
            ..Overrides::default()
        };
        let c = RunConfig::resolve(Some(file), &flags).unwrap();
        assert_eq!(c.setup.profile.name, "xeon-8151");
        assert!(!c.setup.geometry.inclusive);
        assert_eq!(c.setup.noise.jitter_stddev, 2.0);
        assert_eq!(c.setup.profile.mem_access, 220);
        assert_eq!(c.seed(), 9);

        let flags = Overrides {
            profile: Some("i7-6700K".into()),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(Some(file), &flags).unwrap();
        assert_eq!(c.setup.profile.name, "i7-6700K");
        assert_eq!(c.setup.profile.mem_access, 210);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::resolve(Some("jitter = 3\n"), &Overrides::default()).unwrap_err();
        assert_eq!(
            err,
            Error::UnknownKey {
                key: "jitter".into(),
                line: 1
            }
        );
        let flags = Overrides {
            set: vec![("nope".into(), "1".into())],
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(None, &flags).is_err());
        assert!(RunConfig::resolve(Some("profile = pentium\n"), &Overrides::default()).is_err());
    }

    #[test]
    fn quiet_keeps_seed_and_later_overrides() {
        let flags = Overrides {
            quiet: true,
            seed: Some(3),
            set: vec![("jitter_stddev".into(), "1.5".into())],
            ..Overrides::default()
        };
        let c = RunConfig::resolve(Some("seed = 8\n"), &flags).unwrap();
        assert_eq!(c.setup.noise.interference_rate, 0.0);
        assert_eq!(c.setup.noise.jitter_stddev, 1.5);
        assert_eq!(c.seed(), 3);
    }

    #[test]
    fn echo_round_trips() {
        let flags = Overrides {
            profile: Some("xeon-8124".into()),
            set: vec![
                ("interference_lines".into(), "0x40,0x41".into()),
                ("timer_granularity".into(), "16".into()),
            ],
            ..Overrides::default()
        };
        let c = RunConfig::resolve(None, &flags).unwrap();
        let text: String = c.echo().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let again = RunConfig::resolve(Some(&text), &Overrides::default()).unwrap();
        assert_eq!(again.setup.profile, c.setup.profile);
        assert_eq!(again.setup.noise, c.setup.noise);
        assert_eq!(again.setup.defense, c.setup.defense);
        // echoed geometry keys override the default profile's geometry
        assert_eq!(again.setup.geometry, c.setup.geometry);
    }

    #[test]
    fn profile_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slow.conf");
        std::fs::write(
            &path,
            "profile = i7-7700K\nmem_access = 300\nnum_cores = 8\n",
        )
        .unwrap();
        let flags = Overrides {
            profile: Some(path.display().to_string()),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(None, &flags).unwrap();
        assert_eq!(c.setup.profile.mem_access, 300);
        assert_eq!(c.setup.geometry.num_cores, 8);
        std::fs::write(&path, "bogus = 1\n").unwrap();
        assert!(RunConfig::resolve(None, &flags).is_err());
    }

    #[test]
    fn assignments() {
        assert_eq!(
            parse_assignment(" a = b ").unwrap(),
            ("a".into(), "b".into())
        );
        assert!(parse_assignment("a").is_err());
        assert!(parse_assignment("=b").is_err());
    }
}
