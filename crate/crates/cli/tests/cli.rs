use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefetch-sim"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn observe_reports_listing_means() {
    let dir = tempfile::tempdir().unwrap();
    for (listing, means) in [("1", (90.0, 30.0)), ("2", (120.0, 70.0))] {
        let out = run(dir.path(), &["observe", "--listing", listing, "--quiet"]);
        assert!(out.status.success());
        let v = json(&dir.path().join(format!("observe_listing{listing}.json")));
        assert_eq!(v["result"]["mean_expt0"], means.0);
        assert_eq!(v["result"]["mean_expt1"], means.1);
        assert_eq!(v["params"]["iterations"], "3000");
    }
    let csv = fs::read_to_string(dir.path().join("observe_listing2.csv")).unwrap();
    assert!(csv.starts_with("# profile_name=i7-7700K\n"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3001);
}

#[test]
fn observe_constant_time_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "observe",
            "--listing",
            "2",
            "--quiet",
            "--profile",
            "xeon-8375C-constant-time",
        ],
    );
    assert!(out.status.success());
    let v = json(&dir.path().join("observe_listing2.json"));
    assert_eq!(v["result"]["mean_expt0"], 70.0);
    assert_eq!(v["result"]["mean_expt1"], 70.0);
}

#[test]
fn covert_prefetch_prefetch_near_max_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "covert",
            "--kind",
            "prefetch-prefetch",
            "--random",
            "8192",
            "--cycles-per-bit",
            "593",
            "--max-ber",
            "0.01",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&dir.path().join("covert_prefetch-prefetch.json"));
    assert!(v["result"]["ber"].as_f64().unwrap() < 0.01);
    assert_eq!(v["result"]["n_bits"], 8192);
}

#[test]
fn covert_empty_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["covert", "--kind", "prefetch-load", "--random", "0"],
    );
    assert!(out.status.success());
    let v = json(&dir.path().join("covert_prefetch-load.json"));
    assert_eq!(v["result"]["n_bits"], 0);
    assert_eq!(v["result"]["sent"], "");
}

#[test]
fn covert_message_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let msg = dir.path().join("msg.txt");
    fs::write(&msg, "1011 0010\n1110\n").unwrap();
    let out = run(
        dir.path(),
        &[
            "covert",
            "--kind",
            "pr",
            "--quiet",
            "--message-file",
            msg.to_str().unwrap(),
        ],
    );
    assert!(out.status.success());
    let v = json(&dir.path().join("covert_prefetch-reload.json"));
    assert_eq!(v["result"]["received"], "101100101110");
}

#[test]
fn reload_on_two_cores_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "covert",
            "--kind",
            "prefetch-reload",
            "--random",
            "16",
            "--set",
            "num_cores=2",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires 3 cores"));
}

#[test]
fn max_ber_violation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "covert",
            "--kind",
            "pl",
            "--random",
            "1000",
            "--cycles-per-bit",
            "200",
            "--max-ber",
            "0.01",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        run(dir.path(), &["observe", "--listing", "3"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(dir.path(), &["covert", "--kind", "pp"]).status.code(),
        Some(1)
    );
    let help = run(dir.path(), &["sweep", "--help"]);
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn config_file_unknown_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "profile = i7-7700K\njiter_stddev = 3\n").unwrap();
    let out = run(
        dir.path(),
        &[
            "observe",
            "--listing",
            "1",
            "--config",
            cfg.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("jiter_stddev"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "profile = xeon-8124\nseed = 5\njitter_stddev = 1\n").unwrap();
    let c = cfg.to_str().unwrap();
    let out = run(
        dir.path(),
        &[
            "observe",
            "--listing",
            "1",
            "--iterations",
            "5",
            "--config",
            c,
            "--seed",
            "6",
        ],
    );
    assert!(out.status.success());
    let v = json(&dir.path().join("observe_listing1.json"));
    assert_eq!(v["config"]["profile_name"], "xeon-8124");
    assert_eq!(v["config"]["seed"], "6");
    assert_eq!(v["config"]["jitter_stddev"], "1");
    assert_eq!(v["config"]["inclusive"], "false");
}

#[test]
fn sidechannel_recovers_reference_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["sidechannel", "--exponent", "00101011110"]);
    assert!(out.status.success());
    let v = json(&dir.path().join("sidechannel.json"));
    assert!(v["result"]["decoded"]
        .as_str()
        .unwrap()
        .contains("00101011110"));
    let sqr = fs::read_to_string(dir.path().join("sidechannel_sqr.csv")).unwrap();
    assert!(sqr.contains("epoch,line,latency,inferred"));
}

#[test]
fn sidechannel_random_exponents() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "sidechannel",
            "--random",
            "5",
            "--quiet",
            "--min-accuracy",
            "1.0",
        ],
    );
    assert!(out.status.success());
    let v = json(&dir.path().join("sidechannel.json"));
    assert_eq!(v["result"]["exact"], 5);
}

#[test]
fn spectre_window_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["spectre", "--window", "1600", "--quiet"]);
    assert!(out.status.success());
    let v = json(&dir.path().join("spectre.json"));
    let counts: Vec<(String, u64, u64)> = v["result"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            (
                r["channel"].as_str().unwrap().to_string(),
                r["window_accesses"].as_u64().unwrap(),
                r["accesses"].as_u64().unwrap(),
            )
        })
        .collect();
    assert_eq!(
        counts,
        [
            ("flush-reload".to_string(), 8, 8),
            ("prefetch-reload".to_string(), 17, 17),
            ("prefetch-prefetch".to_string(), 17, 17),
        ]
    );
    let hist = fs::read_to_string(dir.path().join("spectre_histogram.csv")).unwrap();
    assert!(hist.contains("\nflush-reload,8,1\n"));
}

#[test]
fn sweep_single_rate_single_trial() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "sweep", "--kind", "pp", "--rates", "600", "--trials", "1", "--bits", "256",
        ],
    );
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("sweep_prefetch-prefetch.csv")).unwrap();
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 2);
    assert_eq!(
        body[0],
        "rate_bytes_per_sec,cycles_per_bit,mean_ber,stddev_ber"
    );
    assert!(csv.contains("# rates=600\n"));
}

#[test]
fn maxrate_writes_json_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "maxrate", "--kind", "pl", "--trials", "4", "--bits", "512", "--jobs", "2",
        ],
    );
    assert!(out.status.success());
    let v = json(&dir.path().join("maxrate_prefetch-load.json"));
    assert!(v["result"]["kb_per_sec"].as_f64().unwrap() > 500.0);
    let out = run(
        dir.path(),
        &[
            "maxrate",
            "--kind",
            "pl",
            "--trials",
            "4",
            "--bits",
            "512",
            "--min-kb-per-sec",
            "1e9",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_check_short_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["oracle-check", "--max-len", "3"]);
    assert!(out.status.success());
    let v = json(&dir.path().join("oracle_check.json"));
    for r in v["result"].as_array().unwrap() {
        assert_eq!(r["report"]["mismatches"], 0);
        assert_eq!(r["report"]["sequences"], 24 + 576 + 13824);
    }
}

#[test]
fn fixed_seed_outputs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--kind", "pr", "--rates", "300,600", "--trials", "3", "--bits", "512", "--seed",
        "12",
    ];
    assert!(run(a.path(), &args).status.success());
    assert!(run(b.path(), &args).status.success());
    let name = "sweep_prefetch-reload.csv";
    let csv_a = fs::read(a.path().join(name)).unwrap();
    assert_eq!(csv_a, fs::read(b.path().join(name)).unwrap());

    let args = [
        "covert",
        "--kind",
        "pp",
        "--random",
        "2000",
        "--cycles-per-bit",
        "400",
        "--seed",
        "3",
    ];
    assert!(run(a.path(), &args).status.success());
    assert!(run(b.path(), &args).status.success());
    for name in [
        "covert_prefetch-prefetch.json",
        "covert_prefetch-prefetch_latency.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
}
