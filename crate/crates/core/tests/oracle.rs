//! Engine vs brute-force reference on shorter sequences over several
//! profiles; the full length-6 enumeration lives in the acceptance suite.

use prefetch_sim::oracle::{check_equivalence, OracleConfig};
use prefetch_sim::{TimingProfile, BUILTIN_PROFILES};

#[test]
fn all_builtin_profiles_agree_to_depth_4() {
    for name in BUILTIN_PROFILES {
        let profile = TimingProfile::builtin(name).unwrap();
        for inclusive in [true, false] {
            let cfg = OracleConfig {
                max_len: 4,
                inclusive,
                ..OracleConfig::default()
            };
            let r = check_equivalence(&cfg, &profile).unwrap();
            assert_eq!(r.sequences, 24 + 576 + 13824 + 331776);
            assert_eq!(r.mismatches, 0, "{name}: {:?}", r.first_mismatch);
        }
    }
}

#[test]
fn two_cores_three_lines_agree() {
    let cfg = OracleConfig {
        max_len: 4,
        num_cores: 2,
        num_lines: 3,
        inclusive: false,
    };
    let r = check_equivalence(&cfg, &TimingProfile::default()).unwrap();
    assert_eq!(r.mismatches, 0, "{:?}", r.first_mismatch);
}
