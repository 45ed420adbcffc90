use prefetch_sim::channels::{
    channel_programs, random_message, run_channel, ChannelConfig, ChannelKind, MachineSetup,
};
use prefetch_sim::{CacheGeometry, HitLevel, TimingProfile};

fn quiet_cfg(kind: ChannelKind, e: u64) -> ChannelConfig {
    ChannelConfig::new(kind, e, &TimingProfile::default())
}

#[test]
fn quiet_round_trip_every_kind() {
    let setup = MachineSetup::quiet();
    let msg = random_message(2000, 11);
    for kind in ChannelKind::ALL {
        let r = run_channel(&msg, &quiet_cfg(kind, 1000), &setup).unwrap();
        assert_eq!(r.received, msg, "{kind}");
        assert_eq!(r.ber, 0.0);
    }
}

#[test]
fn quiet_latencies_are_the_two_constants() {
    let setup = MachineSetup::quiet();
    let msg = random_message(500, 3);
    for kind in ChannelKind::ALL {
        let cfg = quiet_cfg(kind, 1000);
        let (l0, l1) = kind.latencies(&setup.profile);
        assert!(l0.min(l1) < cfg.threshold && cfg.threshold < l0.max(l1));
        let r = run_channel(&msg, &cfg, &setup).unwrap();
        for (bit, lat) in msg.iter().zip(&r.latencies) {
            assert_eq!(lat.unwrap(), if *bit { l1 } else { l0 }, "{kind}");
        }
    }
}

#[test]
fn prefetch_load_and_prefetch_prefetch_stay_in_llc() {
    let setup = MachineSetup::quiet();
    let msg = random_message(300, 5);
    for kind in [ChannelKind::PrefetchLoad, ChannelKind::PrefetchPrefetch] {
        let cfg = quiet_cfg(kind, 1000);
        let mut m = setup.machine_for(&[cfg.line]).unwrap();
        m.enable_trace();
        m.run(&channel_programs(&msg, &cfg)).unwrap();
        let rows = m.take_trace();
        assert!(!rows.is_empty());
        for r in rows.iter().filter(|r| r.cycle >= cfg.cycles_per_bit) {
            assert_ne!(r.result.level, HitLevel::MemAccess, "{kind} at {}", r.cycle);
        }
    }
}

#[test]
fn noisy_ber_falls_with_slower_rates() {
    let msg = random_message(2048, 9);
    for kind in ChannelKind::ALL {
        let ber = |e: u64| {
            (0..8)
                .map(|s| {
                    let setup = MachineSetup::default().with_seed(100 + s);
                    let cfg = ChannelConfig::new(kind, e, &setup.profile);
                    run_channel(&msg, &cfg, &setup).unwrap().ber
                })
                .sum::<f64>()
                / 8.0
        };
        let (fast, slow) = (ber(200), ber(1500));
        assert!(fast > 0.1, "{kind}: {fast}");
        assert!(slow < 0.01, "{kind}: {slow}");
    }
}

#[test]
fn server_profile_round_trip() {
    let profile = TimingProfile::builtin("xeon-8151").unwrap();
    let setup = MachineSetup {
        geometry: CacheGeometry::for_profile("xeon-8151").unwrap(),
        profile,
        ..MachineSetup::quiet()
    };
    let msg = random_message(400, 1);
    for kind in ChannelKind::ALL {
        let cfg = ChannelConfig::new(kind, 1000, &setup.profile);
        assert_eq!(run_channel(&msg, &cfg, &setup).unwrap().ber, 0.0, "{kind}");
    }
}

#[test]
fn same_seed_same_report() {
    let msg = random_message(1000, 2);
    let setup = MachineSetup::default().with_seed(77);
    let cfg = ChannelConfig::new(ChannelKind::PrefetchReload, 400, &setup.profile);
    let a = run_channel(&msg, &cfg, &setup).unwrap();
    let b = run_channel(&msg, &cfg, &setup).unwrap();
    assert_eq!(a, b);
}
