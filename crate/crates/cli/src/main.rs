//! Command-line front end: runs one experiment per invocation and writes its
//! CSV/JSON artifacts, each carrying the fully resolved configuration.

mod run_config;

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use prefetch_sim::attacks::{
    decode_exponent, recovery_accuracy, run_side_channel, run_spectre_demo, spectre_histogram,
    spectre_window_accesses, write_spectre_histogram, SideChannelParams, SpectreChannel,
    SpectreModel, SquareMultiplyVictim, SPECTRE_DEFAULT_WINDOW,
};
use prefetch_sim::channels::{
    format_bits, parse_bits, random_message, run_channel, ChannelConfig, ChannelKind,
};
use prefetch_sim::harness::{calibrate_threshold, max_rate, sweep, MaxRateSpec, SweepSpec};
use prefetch_sim::observe::{observe, Listing, DEFAULT_ITERATIONS};
use prefetch_sim::oracle::{check_equivalence, OracleConfig};

use run_config::{parse_assignment, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "prefetch-sim",
    version,
    about = "Simulate PREFETCHW-based cross-core cache channels"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[command(next_help_heading = "Common options")]
struct Common {
    /// key=value config file; its keys override the profile, flags override it
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in profile name or path to a key=value profile file [default: i7-7700K]
    #[arg(long, global = true, value_name = "NAME|FILE")]
    profile: Option<String>,
    /// Noise and message seed [default: 0, or the config file's seed]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Turn off jitter, interference and sync skew
    #[arg(long, global = true)]
    quiet: bool,
    /// Override any config key, e.g. --set timer_granularity=1000 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
    /// Worker threads for trial fan-out [default: all cores]
    #[arg(short, long, global = true)]
    jobs: Option<usize>,
    /// Directory for output files [default: .]
    #[arg(short, long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a characterisation listing and report thread 1's latencies
    Observe {
        /// 1: remote PREFETCHW then timed load; 2: remote load then timed PREFETCHW
        #[arg(long, value_parser = ["1", "2"])]
        listing: String,
        /// Timed iterations per experiment
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iterations: usize,
    },
    /// Send one message over a covert channel
    Covert {
        /// prefetch-load, prefetch-prefetch or prefetch-reload
        #[arg(long)]
        kind: ChannelKind,
        /// File of 0/1 characters; whitespace ignored
        #[arg(long, conflicts_with = "random", required_unless_present = "random")]
        message_file: Option<PathBuf>,
        /// Send this many random bits drawn from the seed
        #[arg(long)]
        random: Option<usize>,
        /// Epoch length: cycles spent on each bit
        #[arg(long, default_value_t = 1000)]
        cycles_per_bit: u64,
        /// Decision threshold in cycles [default: midpoint of the two latencies]
        #[arg(long, conflicts_with = "calibrate")]
        threshold: Option<u64>,
        /// Measure the threshold with a calibration run first
        #[arg(long)]
        calibrate: bool,
        /// Exit with status 2 when the BER exceeds this
        #[arg(long)]
        max_ber: Option<f64>,
    },
    /// Mean BER over seeded trials at several rates
    Sweep {
        /// A channel kind, or `all`
        #[arg(long, default_value = "all", value_parser = parse_kinds)]
        kind: KindList,
        /// Comma-separated cycles per bit, strictly increasing
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "200,300,400,500,550,600,650,700,800,1000"
        )]
        rates: Vec<u64>,
        /// Seeded trials per rate
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Random bits sent per trial
        #[arg(long, default_value_t = 4096)]
        bits: usize,
        /// Decision threshold in cycles [default: midpoint of the two latencies]
        #[arg(long)]
        threshold: Option<u64>,
    },
    /// Fastest rate whose mean BER stays within a limit
    Maxrate {
        /// A channel kind, or `all`
        #[arg(long, default_value = "all", value_parser = parse_kinds)]
        kind: KindList,
        /// Highest acceptable mean BER
        #[arg(long, default_value_t = 0.01)]
        ber_limit: f64,
        /// Seeded trials per rate
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Random bits sent per trial
        #[arg(long, default_value_t = 4096)]
        bits: usize,
        /// Fastest epoch the search may return
        #[arg(long, default_value_t = 100)]
        min_cycles_per_bit: u64,
        /// Slowest epoch probed; must meet the limit
        #[arg(long, default_value_t = 4000)]
        max_cycles_per_bit: u64,
        /// Exit with status 2 when any kind's rate falls below this (KB/s)
        #[arg(long)]
        min_kb_per_sec: Option<f64>,
    },
    /// Recover square-and-multiply exponents through a shared-line side channel
    Sidechannel {
        /// prefetch-reload or prefetch-prefetch
        #[arg(long, default_value = "prefetch-reload")]
        kind: ChannelKind,
        /// Exponent bits, most significant first
        #[arg(long, conflicts_with = "random")]
        exponent: Option<String>,
        /// Attack this many random exponents instead
        #[arg(long)]
        random: Option<usize>,
        /// Length of each random exponent
        #[arg(long, default_value_t = 64)]
        exponent_bits: usize,
        /// Attacker epoch in cycles
        #[arg(long, default_value_t = 1000)]
        wait: u64,
        /// Offset between the two lines' probes
        #[arg(long, default_value_t = 200)]
        slot: u64,
        /// Victim cycles per square or multiply
        #[arg(long, default_value_t = 2000)]
        per_op: u64,
        /// Decision threshold in cycles [default: midpoint of the two latencies]
        #[arg(long)]
        threshold: Option<u64>,
        /// Exit with status 2 when mean per-bit accuracy is below this
        #[arg(long)]
        min_accuracy: Option<f64>,
    },
    /// Count transient accesses per channel within a speculative window
    Spectre {
        /// Speculative window in cycles
        #[arg(long, default_value_t = SPECTRE_DEFAULT_WINDOW)]
        window: u64,
        /// flush-reload, prefetch-reload, prefetch-prefetch, or `all`
        #[arg(long, default_value = "all", value_parser = parse_spectre_channels)]
        channel: SpectreList,
        /// Seeded runs per channel in the histogram
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Bytes the victim leaks transiently (at most 64)
        #[arg(long, default_value = "The Magic Words are Squeamish Ossifrage.")]
        secret: String,
    },
    /// Exhaustively compare the coherence engine with the reference model
    OracleCheck {
        /// Longest operation sequence enumerated
        #[arg(long, default_value_t = 6)]
        max_len: usize,
        /// Cores issuing operations
        #[arg(long, default_value_t = 3)]
        cores: usize,
        /// Distinct line addresses
        #[arg(long, default_value_t = 2)]
        lines: usize,
        /// inclusive, non-inclusive or both
        #[arg(long, default_value = "both", value_parser = ["inclusive", "non-inclusive", "both"])]
        llc: String,
    },
}

#[derive(Clone, Debug)]
struct KindList(Vec<ChannelKind>);

fn parse_kinds(s: &str) -> Result<KindList, String> {
    if s == "all" {
        return Ok(KindList(ChannelKind::ALL.to_vec()));
    }
    s.parse()
        .map(|k| KindList(vec![k]))
        .map_err(|e| format!("{e}"))
}

#[derive(Clone, Debug)]
struct SpectreList(Vec<SpectreChannel>);

fn parse_spectre_channels(s: &str) -> Result<SpectreList, String> {
    if s == "all" {
        return Ok(SpectreList(vec![
            SpectreChannel::FlushReload,
            SpectreChannel::PrefetchReload,
            SpectreChannel::PrefetchPrefetch,
        ]));
    }
    s.parse()
        .map(|c| SpectreList(vec![c]))
        .map_err(|e| format!("{e}"))
}

/// Writes artifacts under the output directory with the resolved config
/// and command parameters embedded.
struct Output {
    cfg: RunConfig,
    params: Vec<(String, String)>,
}

impl Output {
    fn new(cfg: RunConfig, params: Vec<(&str, String)>) -> Self {
        let params = params
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Output { cfg, params }
    }

    fn path(&self, name: &str) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(&self.cfg.output_dir)
            .with_context(|| format!("creating {}", self.cfg.output_dir.display()))?;
        Ok(self.cfg.output_dir.join(name))
    }

    fn csv(
        &self,
        name: &str,
        body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        for (k, v) in self.cfg.echo().iter().chain(&self.params) {
            writeln!(buf, "# {k}={v}")?;
        }
        body(&mut buf)?;
        let path = self.path(name)?;
        fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn json(&self, name: &str, result: Value) -> anyhow::Result<()> {
        let pairs = |kv: &[(String, String)]| -> Map<String, Value> {
            kv.iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect()
        };
        let doc = json!({
            "config": pairs(&self.cfg.echo()),
            "params": pairs(&self.params),
            "result": result,
        });
        let path = self.path(name)?;
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

enum Status {
    Ok,
    ThresholdFailed,
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    let c = &cli.common;
    let text = match &c.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let flags = Overrides {
        profile: c.profile.clone(),
        seed: c.seed,
        quiet: c.quiet,
        set: c.set.clone(),
        output_dir: c.output_dir.clone(),
    };
    let cfg = RunConfig::resolve(text.as_deref(), &flags)?;
    if let Some(jobs) = c.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()?;
    }
    let setup = cfg.setup.clone();
    let seed = cfg.seed();

    match cli.command {
        Command::Observe {
            listing,
            iterations,
        } => {
            let listing: Listing = listing.parse()?;
            let o = observe(listing, iterations, &setup)?;
            let out = Output::new(
                cfg,
                vec![
                    ("listing", listing.to_string()),
                    ("iterations", iterations.to_string()),
                ],
            );
            out.csv(&format!("observe_listing{listing}.csv"), |w| o.write_csv(w))?;
            out.json(
                &format!("observe_listing{listing}.json"),
                json!({"mean_expt0": o.mean_active(), "mean_expt1": o.mean_idle()}),
            )?;
            println!(
                "listing {listing}: expt0 mean {:.2}, expt1 mean {:.2} cycles",
                o.mean_active(),
                o.mean_idle()
            );
            Ok(Status::Ok)
        }
        Command::Covert {
            kind,
            message_file,
            random,
            cycles_per_bit,
            threshold,
            calibrate,
            max_ber,
        } => {
            let message = match (&message_file, random) {
                (Some(p), _) => parse_bits(
                    &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                (None, Some(n)) => random_message(n, seed),
                (None, None) => bail!("give --message-file or --random"),
            };
            let mut ch = ChannelConfig::new(kind, cycles_per_bit, &setup.profile);
            if let Some(t) = threshold {
                ch.threshold = t;
            }
            if calibrate {
                ch.threshold = calibrate_threshold(kind, &setup, 500)?.threshold;
            }
            let report = run_channel(&message, &ch, &setup)?;
            let source = match &message_file {
                Some(p) => p.display().to_string(),
                None => format!("random:{}", message.len()),
            };
            let out = Output::new(
                cfg,
                vec![
                    ("kind", kind.to_string()),
                    ("message", source),
                    ("cycles_per_bit", cycles_per_bit.to_string()),
                    ("threshold", ch.threshold.to_string()),
                    (
                        "send_window",
                        format!("{}..{}", ch.send_window.lo, ch.send_window.hi),
                    ),
                    (
                        "recv_window",
                        format!("{}..{}", ch.recv_window.lo, ch.recv_window.hi),
                    ),
                    (
                        "arm_window",
                        format!("{}..{}", ch.arm_window.lo, ch.arm_window.hi),
                    ),
                ],
            );
            let mut result = serde_json::to_value(report.summary())?;
            result["errors"] = json!(report.errors());
            result["threshold"] = json!(report.threshold);
            result["kb_per_sec"] = json!(report.raw_rate_bytes_per_sec / 1024.0);
            result["sent"] = json!(format_bits(&report.sent));
            result["received"] = json!(format_bits(&report.received));
            out.json(&format!("covert_{kind}.json"), result)?;
            out.csv(&format!("covert_{kind}_latency.csv"), |w| {
                report.write_latency_csv(w)
            })?;
            println!(
                "{kind}: {} bits at {cycles_per_bit} cycles/bit ({:.1} KB/s), {} errors, ber {:.6}",
                report.sent.len(),
                report.raw_rate_bytes_per_sec / 1024.0,
                report.errors(),
                report.ber
            );
            Ok(match max_ber {
                Some(limit) if report.ber > limit => {
                    eprintln!("ber {:.6} exceeds --max-ber {limit}", report.ber);
                    Status::ThresholdFailed
                }
                _ => Status::Ok,
            })
        }
        Command::Sweep {
            kind,
            rates,
            trials,
            bits,
            threshold,
        } => {
            let rate_list = rates
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(",");
            for k in kind.0 {
                let spec = SweepSpec {
                    trials,
                    bits_per_trial: bits,
                    seed_base: seed,
                    threshold,
                    ..SweepSpec::new(k, setup.clone(), rates.clone())
                };
                let r = sweep(&spec)?;
                let out = Output::new(
                    cfg.clone(),
                    vec![
                        ("kind", k.to_string()),
                        ("rates", rate_list.clone()),
                        ("trials", trials.to_string()),
                        ("bits_per_trial", bits.to_string()),
                        ("seed_base", seed.to_string()),
                        (
                            "threshold",
                            threshold
                                .unwrap_or(k.default_threshold(&setup.profile))
                                .to_string(),
                        ),
                    ],
                );
                out.csv(&format!("sweep_{k}.csv"), |w| r.write_csv(w))?;
                match r.knee(0.01) {
                    Some(e) => println!(
                        "{k}: BER <= 1% from {e} cycles/bit ({:.1} KB/s)",
                        setup.profile.kb_per_sec(e)
                    ),
                    None => println!("{k}: no probed rate reaches BER <= 1%"),
                }
            }
            Ok(Status::Ok)
        }
        Command::Maxrate {
            kind,
            ber_limit,
            trials,
            bits,
            min_cycles_per_bit,
            max_cycles_per_bit,
            min_kb_per_sec,
        } => {
            let mut status = Status::Ok;
            for k in kind.0 {
                let spec = MaxRateSpec {
                    trials,
                    bits_per_trial: bits,
                    seed_base: seed,
                    min_cycles_per_bit,
                    max_cycles_per_bit,
                    ..MaxRateSpec::new(k, setup.clone(), ber_limit)
                };
                let r = max_rate(&spec)?;
                let out = Output::new(
                    cfg.clone(),
                    vec![
                        ("kind", k.to_string()),
                        ("ber_limit", ber_limit.to_string()),
                        ("trials", trials.to_string()),
                        ("bits_per_trial", bits.to_string()),
                        ("seed_base", seed.to_string()),
                        ("min_cycles_per_bit", min_cycles_per_bit.to_string()),
                        ("max_cycles_per_bit", max_cycles_per_bit.to_string()),
                    ],
                );
                out.json(&format!("maxrate_{k}.json"), serde_json::to_value(&r)?)?;
                println!(
                    "{k}: {:.1} KB/s at {} cycles/bit (mean ber {:.4})",
                    r.kb_per_sec, r.cycles_per_bit, r.mean_ber
                );
                if min_kb_per_sec.is_some_and(|floor| r.kb_per_sec < floor) {
                    eprintln!("{k}: {:.1} KB/s is below --min-kb-per-sec", r.kb_per_sec);
                    status = Status::ThresholdFailed;
                }
            }
            Ok(status)
        }
        Command::Sidechannel {
            kind,
            exponent,
            random,
            exponent_bits,
            wait,
            slot,
            per_op,
            threshold,
            min_accuracy,
        } => {
            let params = SideChannelParams {
                wait_cycles: wait,
                slot_cycles: slot,
                threshold,
                ..SideChannelParams::default()
            };
            let victim_for = |bits: Vec<bool>| SquareMultiplyVictim {
                per_op_cycles: per_op,
                ..SquareMultiplyVictim::new(bits)
            };
            let mut echo = vec![
                ("kind", kind.to_string()),
                ("wait_cycles", wait.to_string()),
                ("slot_cycles", slot.to_string()),
                ("per_op_cycles", per_op.to_string()),
                (
                    "threshold",
                    threshold
                        .unwrap_or(kind.default_threshold(&setup.profile))
                        .to_string(),
                ),
            ];
            let accuracy = match (exponent, random) {
                (Some(text), _) => {
                    let bits = parse_bits(&text)?;
                    let (sqr, mul) =
                        run_side_channel(&victim_for(bits.clone()), kind, &params, &setup)?;
                    let decoded = decode_exponent(&sqr, &mul);
                    let acc = recovery_accuracy(&bits, &decoded);
                    echo.push(("exponent", format_bits(&bits)));
                    let out = Output::new(cfg, echo);
                    out.csv("sidechannel_sqr.csv", |w| sqr.write_csv(w))?;
                    out.csv("sidechannel_mul.csv", |w| mul.write_csv(w))?;
                    out.json(
                        "sidechannel.json",
                        json!({
                            "exponent": format_bits(&bits),
                            "decoded": format_bits(&decoded),
                            "accuracy": acc,
                        }),
                    )?;
                    println!(
                        "exponent {}\ndecoded  {}\naccuracy {acc:.4}",
                        format_bits(&bits),
                        format_bits(&decoded)
                    );
                    acc
                }
                (None, Some(n)) => {
                    let mut trials = Vec::with_capacity(n);
                    for i in 0..n as u64 {
                        let s = seed.wrapping_add(i);
                        let bits = random_message(exponent_bits, s);
                        let trial_setup = setup.clone().with_seed(s);
                        let (sqr, mul) = run_side_channel(
                            &victim_for(bits.clone()),
                            kind,
                            &params,
                            &trial_setup,
                        )?;
                        let decoded = decode_exponent(&sqr, &mul);
                        trials.push(json!({
                            "seed": s,
                            "exponent": format_bits(&bits),
                            "decoded": format_bits(&decoded),
                            "accuracy": recovery_accuracy(&bits, &decoded),
                        }));
                    }
                    let accs: Vec<f64> = trials
                        .iter()
                        .map(|t| t["accuracy"].as_f64().unwrap_or(0.0))
                        .collect();
                    let mean = if accs.is_empty() {
                        1.0
                    } else {
                        accs.iter().sum::<f64>() / accs.len() as f64
                    };
                    let exact = accs.iter().filter(|&&a| a == 1.0).count();
                    echo.push(("random", n.to_string()));
                    echo.push(("exponent_bits", exponent_bits.to_string()));
                    let out = Output::new(cfg, echo);
                    out.json(
                        "sidechannel.json",
                        json!({"mean_accuracy": mean, "exact": exact, "trials": trials}),
                    )?;
                    println!("{n} exponents: mean accuracy {mean:.4}, {exact} exact");
                    mean
                }
                (None, None) => bail!("give --exponent or --random"),
            };
            Ok(match min_accuracy {
                Some(floor) if accuracy < floor => {
                    eprintln!("accuracy {accuracy:.4} is below --min-accuracy {floor}");
                    Status::ThresholdFailed
                }
                _ => Status::Ok,
            })
        }
        Command::Spectre {
            window,
            channel,
            trials,
            secret,
        } => {
            let channels = channel.0;
            let names: Vec<&str> = channels.iter().map(|c| c.name()).collect();
            let out = Output::new(
                cfg,
                vec![
                    ("window", window.to_string()),
                    ("channels", names.join(",")),
                    ("trials", trials.to_string()),
                    ("secret", secret.clone()),
                ],
            );
            let mut results = Vec::new();
            for &ch in &channels {
                let model = SpectreModel::for_channel(ch, window, &setup.profile);
                let o = run_spectre_demo(secret.as_bytes(), &model, ch, &setup)?;
                let fit = spectre_window_accesses(&model);
                println!(
                    "{ch}: window fits {fit} accesses, simulated {}, recovered {:?}",
                    o.accesses,
                    String::from_utf8_lossy(&o.recovered)
                );
                results.push(json!({
                    "channel": ch.name(),
                    "per_access_latency": model.per_access_latency,
                    "window_accesses": fit,
                    "accesses": o.accesses,
                    "recovered": String::from_utf8_lossy(&o.recovered),
                }));
            }
            out.json("spectre.json", Value::Array(results))?;
            let rows = spectre_histogram(&channels, window, trials, seed, &setup)?;
            out.csv("spectre_histogram.csv", |w| {
                write_spectre_histogram(&rows, w)
            })?;
            Ok(Status::Ok)
        }
        Command::OracleCheck {
            max_len,
            cores,
            lines,
            llc,
        } => {
            let geometries: &[bool] = match llc.as_str() {
                "inclusive" => &[true],
                "non-inclusive" => &[false],
                _ => &[true, false],
            };
            let mut reports = Vec::new();
            let mut mismatches = 0;
            for &inclusive in geometries {
                let oc = OracleConfig {
                    max_len,
                    num_cores: cores,
                    num_lines: lines,
                    inclusive,
                };
                let r = check_equivalence(&oc, &setup.profile)?;
                println!(
                    "{}: {} sequences, {} mismatches",
                    if inclusive {
                        "inclusive"
                    } else {
                        "non-inclusive"
                    },
                    r.sequences,
                    r.mismatches
                );
                if let Some(m) = &r.first_mismatch {
                    println!("first mismatch: {m}");
                }
                mismatches += r.mismatches;
                reports.push(json!({"inclusive": inclusive, "report": r}));
            }
            let out = Output::new(
                cfg,
                vec![
                    ("max_len", max_len.to_string()),
                    ("cores", cores.to_string()),
                    ("lines", lines.to_string()),
                    ("llc", llc),
                ],
            );
            out.json("oracle_check.json", Value::Array(reports))?;
            Ok(if mismatches == 0 {
                Status::Ok
            } else {
                Status::ThresholdFailed
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::ThresholdFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
