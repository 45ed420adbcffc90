use prefetch_sim::channels::{ChannelKind, MachineSetup};
use prefetch_sim::harness::{
    calibrate_threshold, max_rate, sweep, MaxRateSpec, SweepSpec, SWEEP_CSV_HEADER,
};
use prefetch_sim::{DefenseConfig, Error};

fn small_sweep(kind: ChannelKind, rates: Vec<u64>) -> SweepSpec {
    SweepSpec {
        trials: 12,
        bits_per_trial: 1024,
        ..SweepSpec::new(kind, MachineSetup::default(), rates)
    }
}

#[test]
fn sweep_is_reproducible() {
    let spec = small_sweep(ChannelKind::PrefetchLoad, vec![300, 600, 900]);
    assert_eq!(sweep(&spec).unwrap(), sweep(&spec).unwrap());
}

#[test]
fn every_kind_has_a_knee() {
    for kind in ChannelKind::ALL {
        let r = sweep(&small_sweep(kind, vec![200, 1500])).unwrap();
        assert!(r.rows[0].mean_ber > 0.10, "{kind}: {:?}", r.rows[0]);
        assert!(r.rows[1].mean_ber < 0.01, "{kind}: {:?}", r.rows[1]);
        assert_eq!(r.knee(0.01), Some(1500));
    }
}

#[test]
fn single_rate_single_trial_csv() {
    let spec = SweepSpec {
        trials: 1,
        bits_per_trial: 64,
        ..SweepSpec::new(
            ChannelKind::PrefetchPrefetch,
            MachineSetup::quiet(),
            vec![1000],
        )
    };
    let mut buf = Vec::new();
    sweep(&spec).unwrap().write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines,
        [SWEEP_CSV_HEADER, "525000.000,1000,0.000000,0.000000"]
    );
}

#[test]
fn calibration_under_noise_lands_near_midpoint() {
    let setup = MachineSetup::default().with_seed(4);
    for kind in ChannelKind::ALL {
        let c = calibrate_threshold(kind, &setup, 400).unwrap();
        let mid = kind.default_threshold(&setup.profile) as i64;
        assert!((c.threshold as i64 - mid).abs() <= 3, "{kind}: {c:?}");
    }
}

#[test]
fn permission_check_breaks_load_based_calibration() {
    let setup = MachineSetup {
        defense: DefenseConfig {
            permission_check: true,
            ..DefenseConfig::default()
        },
        ..MachineSetup::default()
    };
    for kind in [ChannelKind::PrefetchLoad, ChannelKind::PrefetchReload] {
        let err = calibrate_threshold(kind, &setup, 200).unwrap_err();
        assert!(
            matches!(err, Error::Indistinguishable { .. }),
            "{kind}: {err}"
        );
    }
}

#[test]
fn quiet_max_rate_is_bounded_by_probe_latency() {
    let spec = MaxRateSpec {
        trials: 2,
        bits_per_trial: 256,
        ..MaxRateSpec::new(ChannelKind::PrefetchPrefetch, MachineSetup::quiet(), 0.01)
    };
    let r = max_rate(&spec).unwrap();
    // the timed 120-cycle PREFETCHW must fit inside one epoch
    assert!((120..200).contains(&r.cycles_per_bit), "{r:?}");
    assert!(r.mean_ber <= 0.01);
}
