use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use schedkit::bench::gen::{self, SchbenchParams};
use schedkit::bench::suites::{run_suite, SuiteConfig};
use schedkit::bench::{self, BenchResult};
use schedkit::kernel::{Metrics, Workload};
use schedkit::policies::PolicyKind;
use schedkit::record::log::load_log;
use schedkit::record::replay::ReplayOptions;
use schedkit::record::DEFAULT_RING_CAPACITY;

/// Exit status when a run finished but broke an invariant; clap uses 2.
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser)]
#[command(name = "schedkit", version, about = "Scheduling policy simulator and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Virtual,
    Concurrent,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Workload file (TOML).
    #[arg(long)]
    workload: PathBuf,
    /// Policy for class 0, used when the workload names none.
    #[arg(long, default_value = "wfq")]
    policy: PolicyKind,
    #[arg(long, value_enum, default_value = "virtual")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload and print its metrics as CSV.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a workload with every policy call logged.
    Record {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        log: PathBuf,
        /// Recorder ring slots; a full ring drops events.
        #[arg(long, default_value_t = DEFAULT_RING_CAPACITY)]
        ring: usize,
    },
    /// Replay a log against the policy it names and report mismatches.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Replay against a different policy build.
        #[arg(long)]
        policy: Option<PolicyKind>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        deadlock_timeout_ms: u64,
    },
    /// Run schbench under WFQ and upgrade the policy at a virtual time.
    UpgradeDemo {
        /// Virtual ns at which to swap in the new build.
        #[arg(long)]
        at: u64,
        /// Workload to run instead of schbench 2x2.
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "virtual")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run benchmark suites, writing results.csv and .dat plot files.
    Bench {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value = "bench-out")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Multiplier on run lengths; 10 gives full-size runs.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().cmd) {
        Ok(violations) if violations.is_empty() => ExitCode::SUCCESS,
        Ok(violations) => {
            for v in violations {
                eprintln!("invariant violated: {v}");
            }
            ExitCode::from(EXIT_VIOLATION)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Returns the invariant violations observed.
fn dispatch(cmd: Cmd) -> Result<Vec<String>> {
    match cmd {
        Cmd::Run { run, out } => {
            let (w, kinds) = load(&run)?;
            let m = match run.mode {
                ModeArg::Virtual => bench::run_virtual(&w, &kinds, run.seed)?,
                ModeArg::Concurrent => bench::run_concurrent(&w, single(&kinds)?, bench::concurrent_config(&w, run.seed))?,
            };
            let mut r = BenchResult::new(&w.name, names(&kinds), run.seed);
            r.add_standard(&m, w.warmup_ns);
            bench::write_csv(&[r], sink(out.as_deref())?)?;
            Ok(m.violations())
        }
        Cmd::Record { run, log, ring } => {
            let (w, kinds) = load(&run)?;
            let cfg = match run.mode {
                ModeArg::Virtual => bench::sim_config(&w, run.seed),
                ModeArg::Concurrent => bench::concurrent_config(&w, run.seed),
            };
            let f = File::create(&log).with_context(|| format!("creating {}", log.display()))?;
            let (m, summary) = bench::record(&w, single(&kinds)?, cfg, ring, BufWriter::new(f))?;
            println!("events={} drops={}", summary.events, summary.drops);
            if summary.drops > 0 {
                eprintln!("warning: {} events dropped; the log cannot be replayed", summary.drops);
            }
            Ok(m.violations())
        }
        Cmd::Replay { log, policy, report, deadlock_timeout_ms } => {
            let loaded = load_log(&log).with_context(|| format!("loading {}", log.display()))?;
            let opts =
                ReplayOptions { deadlock_timeout: Duration::from_millis(deadlock_timeout_ms), ..Default::default() };
            let rep = bench::replay_log(&loaded, policy, opts)?;
            let mut out = sink(report.as_deref())?;
            writeln!(out, "{}", rep.to_json())?;
            out.flush()?;
            if let Some(m) = rep.first_mismatch() {
                eprintln!("first mismatch at seq {} ({}): expected {} got {}", m.seq, m.kind, m.expected, m.actual);
            }
            // A diverging replay is a finding, not a broken invariant.
            if let Some(d) = rep.deadlock {
                bail!("replay deadlocked: {d}");
            }
            Ok(Vec::new())
        }
        Cmd::UpgradeDemo { at, workload, mode, seed } => {
            let w = match workload {
                Some(p) => Workload::load(&p).map_err(anyhow::Error::msg)?,
                None => gen::schbench(&SchbenchParams {
                    duration_ns: 300_000_000,
                    warmup_ns: 0,
                    ..SchbenchParams::new(2, 2)
                }),
            };
            let m = match mode {
                ModeArg::Virtual => bench::upgrade_virtual(&w, at, seed)?,
                ModeArg::Concurrent => bench::upgrade_concurrent(&w, at, bench::concurrent_config(&w, seed))?,
            };
            report_upgrade(&m)
        }
        Cmd::Bench { suite, out_dir, seed, scale } => {
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let out = run_suite(&suite, &SuiteConfig { seed, scale })?;
            let csv = out_dir.join("results.csv");
            bench::write_csv(&out.results, BufWriter::new(File::create(&csv)?))?;
            for d in &out.plots {
                d.save(&out_dir)?;
            }
            info!("wrote {} rows and {} plot files", out.results.iter().map(|r| r.rows.len()).sum::<usize>(), out.plots.len());
            println!("{}", csv.display());
            Ok(out.violations)
        }
    }
}

fn report_upgrade(m: &Metrics) -> Result<Vec<String>> {
    let mut bad = m.violations();
    if m.upgrades.is_empty() {
        bail!("upgrade did not happen: {}", m.upgrade_errors.join("; "));
    }
    for u in &m.upgrades {
        println!(
            "upgraded {} -> {}: blackout_ns={} tasks={} vruntime_before={} vruntime_after={} calls_during_hold={}",
            u.from_version,
            u.to_version,
            u.blackout_ns,
            u.tasks_after.len(),
            u.vruntime_before,
            u.vruntime_after,
            u.calls_during_hold
        );
        if !u.tasks_conserved() {
            bad.push(format!("upgrade lost tasks: {} before, {} after", u.tasks_before.len(), u.tasks_after.len()));
        }
        if u.vruntime_before != u.vruntime_after {
            bad.push("upgrade changed total vruntime".into());
        }
        if u.calls_during_hold > 0 {
            bad.push(format!("{} policy calls ran during the upgrade hold", u.calls_during_hold));
        }
    }
    Ok(bad)
}

fn load(run: &RunArgs) -> Result<(Workload, Vec<PolicyKind>)> {
    let w = Workload::load(&run.workload).map_err(anyhow::Error::msg)?;
    let kinds = bench::policies_for(&w, &[run.policy])?;
    Ok((w, kinds))
}

fn single(kinds: &[PolicyKind]) -> Result<PolicyKind> {
    match kinds {
        [k] => Ok(*k),
        _ => bail!("this mode supports exactly one policy class, the workload has {}", kinds.len()),
    }
}

fn names(kinds: &[PolicyKind]) -> String {
    kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}
