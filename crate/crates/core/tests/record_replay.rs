use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::time::Duration;

use schedkit::bench::{self, gen, BenchError};
use schedkit::policies::PolicyKind;
use schedkit::record::log::{load_log, parse_log, LogError, LogMode, SharedBuf};
use schedkit::record::replay::{ReplayError, ReplayOptions};
use schedkit::record::EventKind;

#[test]
fn tiny_ring_drops_and_the_log_is_refused() {
    let w = gen::pingpong(2_000, false);
    let buf = SharedBuf::default();
    let (_, summary) = bench::record(&w, PolicyKind::Wfq, bench::sim_config(&w, 0), 8, buf.clone()).unwrap();
    assert!(summary.drops > 0, "an 8-slot ring kept up with {} events", summary.events);
    let log = parse_log(&buf.bytes()).unwrap();
    assert_eq!(log.drops, summary.drops);
    let res = bench::replay_log(&log, None, ReplayOptions::default());
    assert!(matches!(res, Err(BenchError::Replay(ReplayError::DropsPresent(n))) if n == summary.drops));
}

#[test]
fn log_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.log");
    let w = gen::pingpong(300, true);
    let out = BufWriter::new(File::create(&path).unwrap());
    let (_, summary) = bench::record_default(&w, PolicyKind::Shinjuku, bench::sim_config(&w, 5), out).unwrap();
    let log = load_log(&path).unwrap();
    assert_eq!(log.header.policy, "shinjuku");
    assert_eq!(log.header.seed, 5);
    assert_eq!(log.header.mode, LogMode::VirtualTime);
    assert_eq!(log.events.len() as u64, summary.events);
    assert!(log.events.windows(2).all(|p| p[0].seq < p[1].seq));
    let rep = bench::replay_log(&log, None, ReplayOptions::default()).unwrap();
    assert!(rep.mismatches.is_empty());
    assert_eq!(rep.replayed, log.calls().count() as u64);

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.log");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_log(&cut), Err(LogError::CorruptLog { .. })));
}

#[test]
fn replaying_against_a_policy_with_other_locks_is_refused() {
    let w = gen::pingpong(50, false);
    let buf = SharedBuf::default();
    bench::record_default(&w, PolicyKind::Shinjuku, bench::sim_config(&w, 0), buf.clone()).unwrap();
    let log = parse_log(&buf.bytes()).unwrap();
    let res = bench::replay_log(&log, Some(PolicyKind::Wfq), ReplayOptions::default());
    assert!(matches!(res, Err(BenchError::Replay(ReplayError::LockCountMismatch { built: 3, logged: 1 }))));
}

#[test]
fn concurrent_recording_interleaves_workers_and_replays() {
    let mut p = gen::SchbenchParams::new(2, 2);
    p.duration_ns = 40_000_000;
    p.warmup_ns = 0;
    let w = gen::schbench(&p);
    let buf = SharedBuf::default();
    let cfg = bench::concurrent_config(&w, 0);
    let (m, summary) = bench::record(&w, PolicyKind::Wfq, cfg, 1 << 20, buf.clone()).unwrap();
    assert_eq!(summary.drops, 0);
    assert!(m.violations().is_empty(), "{:?}", m.violations());
    let log = parse_log(&buf.bytes()).unwrap();
    assert_eq!(log.header.mode, LogMode::Concurrent);
    let workers: BTreeSet<u32> = log.events.iter().filter(|e| e.kind == EventKind::LockAcquire).map(|e| e.worker).collect();
    assert!(workers.len() >= 4, "lock acquisitions from {workers:?}");
    // The task table is shared by every core, so its order mixes workers.
    let shared = log.lock_orders.values().max_by_key(|o| o.len()).unwrap();
    assert!(shared.iter().collect::<BTreeSet<_>>().len() >= 4);

    let opts = ReplayOptions { deadlock_timeout: Duration::from_secs(5), ..Default::default() };
    let a = bench::replay_log(&log, None, opts).unwrap();
    assert_eq!(a.mismatches, vec![]);
    assert!(a.deadlock.is_none());
    let b = bench::replay_log(&log, None, opts).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}
