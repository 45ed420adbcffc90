use prefetch_sim::attacks::{
    decode_exponent, recovery_accuracy, run_side_channel, run_spectre_demo, spectre_histogram,
    spectre_window_accesses, write_spectre_histogram, SideChannelParams, SpectreChannel,
    SpectreModel, SquareMultiplyVictim, SPECTRE_DEFAULT_WINDOW,
};
use prefetch_sim::channels::{format_bits, parse_bits, random_message, ChannelKind, MachineSetup};
use prefetch_sim::{CacheGeometry, TimingProfile};

fn recover(bits: &[bool], kind: ChannelKind, setup: &MachineSetup) -> Vec<bool> {
    let victim = SquareMultiplyVictim::new(bits.to_vec());
    let (s, m) = run_side_channel(&victim, kind, &SideChannelParams::default(), setup).unwrap();
    decode_exponent(&s, &m)
}

#[test]
fn reference_exponent_under_default_noise() {
    let bits = parse_bits("00101011110").unwrap();
    for seed in 0..5 {
        let got = recover(
            &bits,
            ChannelKind::PrefetchReload,
            &MachineSetup::default().with_seed(seed),
        );
        assert!(
            format_bits(&got).contains("00101011110"),
            "seed {seed}: {}",
            format_bits(&got)
        );
    }
}

#[test]
fn noisy_recovery_is_accurate_on_a_sample() {
    let mut acc = 0.0;
    for seed in 0..10 {
        let bits = random_message(64, 1000 + seed);
        let got = recover(
            &bits,
            ChannelKind::PrefetchReload,
            &MachineSetup::default().with_seed(seed),
        );
        acc += recovery_accuracy(&bits, &got);
    }
    assert!(acc / 10.0 >= 0.97, "{}", acc / 10.0);
}

#[test]
fn slower_victim_still_decodes() {
    let bits = random_message(40, 8);
    let victim = SquareMultiplyVictim {
        per_op_cycles: 5000,
        ..SquareMultiplyVictim::new(bits.clone())
    };
    let (s, m) = run_side_channel(
        &victim,
        ChannelKind::PrefetchPrefetch,
        &SideChannelParams::default(),
        &MachineSetup::quiet(),
    )
    .unwrap();
    assert_eq!(decode_exponent(&s, &m), bits);
}

#[test]
fn spectre_counts_on_desktop_profile() {
    let p = TimingProfile::default();
    let count =
        |ch| spectre_window_accesses(&SpectreModel::for_channel(ch, SPECTRE_DEFAULT_WINDOW, &p));
    assert_eq!(count(SpectreChannel::FlushReload), 8);
    assert_eq!(count(SpectreChannel::PrefetchReload), 17);
    assert_eq!(count(SpectreChannel::PrefetchPrefetch), 17);
}

#[test]
fn spectre_demo_leaks_window_limited_prefix() {
    let secret: Vec<u8> = b"The Magic Words are Squeamish".to_vec();
    let setup = MachineSetup::quiet();
    for (ch, n) in [
        (SpectreChannel::FlushReload, 8),
        (SpectreChannel::PrefetchReload, 17),
        (SpectreChannel::PrefetchPrefetch, 17),
    ] {
        let model = SpectreModel::for_channel(ch, SPECTRE_DEFAULT_WINDOW, &setup.profile);
        let out = run_spectre_demo(&secret, &model, ch, &setup).unwrap();
        assert_eq!(out.accesses, n, "{ch}");
        assert_eq!(out.recovered, secret[..n], "{ch}");
    }
}

#[test]
fn server_profile_counts_nearly_equal() {
    let setup = MachineSetup {
        profile: TimingProfile::builtin("xeon-8151").unwrap(),
        geometry: CacheGeometry::for_profile("xeon-8151").unwrap(),
        ..MachineSetup::quiet()
    };
    let rows = spectre_histogram(
        &[
            SpectreChannel::FlushReload,
            SpectreChannel::PrefetchPrefetch,
        ],
        SPECTRE_DEFAULT_WINDOW,
        2,
        0,
        &setup,
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].1.abs_diff(rows[1].1) <= 1, "{rows:?}");
    let mut buf = Vec::new();
    write_spectre_histogram(&rows, &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "channel,accesses,count\nflush-reload,8,2\nprefetch-prefetch,8,2\n"
    );
}
