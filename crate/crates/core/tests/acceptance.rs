//! Acceptance checks. Prints one line per criterion and exits non-zero if
//! any of them fails.

use std::collections::BTreeSet;
use std::process::Command;
use std::time::{Duration, Instant};

use tmrckpt::fuzz::{self, FuzzOptions};
use tmrckpt::model::{CheckpointIndex, NodeId, ProcessId};
use tmrckpt::oracle;
use tmrckpt::presets;
use tmrckpt::protocol::Disposition;
use tmrckpt::recovery::{self, VerdictReason};
use tmrckpt::scenario::{Action, Scenario};
use tmrckpt::sim::{self, RunStatus};
use tmrckpt::tmr::{GroupMode, Promotion, TmrRole};
use tmrckpt::trace::{self, MsgInfo, TraceEvent, TraceRecord};

type Outcome = Result<String, String>;
type Check = Box<dyn FnOnce() -> Outcome>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let detail = f()?;
    let took = t.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))?;
    Ok(format!("{detail} ({took:.2?})"))
}

fn golden_five_process() -> Outcome {
    let out = sim::run(&presets::five_process()).map_err(|e| e.to_string())?;
    ensure(out.status == RunStatus::Quiescent, || {
        format!("status {:?}", out.status)
    })?;
    ensure(out.reports.len() == 1, || {
        format!("{} recoveries", out.reports.len())
    })?;
    let rep = &out.reports[0];
    let want = [
        (
            0,
            true,
            VerdictReason::Indirect {
                via: vec![ProcessId(1)],
            },
        ),
        (1, true, VerdictReason::Direct),
        (2, true, VerdictReason::IsFaulty),
        (3, false, VerdictReason::NotDependent),
        (4, false, VerdictReason::NotDependent),
    ];
    ensure(rep.verdicts.len() == 5, || {
        format!("{} verdicts", rep.verdicts.len())
    })?;
    for (pid, rollback, reason) in want {
        let v = rep
            .verdicts
            .iter()
            .find(|v| v.pid == ProcessId(pid))
            .ok_or(format!("no verdict for P{pid}"))?;
        ensure(v.must_rollback == rollback && v.reason == reason, || {
            format!("P{pid}: got {:?}/{:?}", v.must_rollback, v.reason)
        })?;
    }
    let set: BTreeSet<ProcessId> = [0, 1, 2].map(ProcessId).into();
    ensure(rep.rollback_set == set, || {
        format!("rollback set {:?}", rep.rollback_set)
    })?;
    Ok("verdicts and rollback set {0,1,2} match".into())
}

fn golden_fig4() -> Outcome {
    let out = sim::run(&presets::six_node_tmr()).map_err(|e| e.to_string())?;
    ensure(out.status == RunStatus::Quiescent, || {
        format!("status {:?}", out.status)
    })?;
    let rep = out.reports.first().ok_or("no recovery")?;
    ensure(rep.failed_node == NodeId(3), || {
        format!("failed {}", rep.failed_node)
    })?;
    let want = vec![
        Promotion {
            group_id: 2,
            node: NodeId(4),
            from: TmrRole::Primary,
            to: TmrRole::Main,
        },
        Promotion {
            group_id: 2,
            node: NodeId(5),
            from: TmrRole::Secondary,
            to: TmrRole::Primary,
        },
    ];
    let in_g2: Vec<Promotion> = rep
        .promotions
        .iter()
        .filter(|p| p.group_id == 2)
        .copied()
        .collect();
    ensure(in_g2 == want, || format!("promotions {:?}", rep.promotions))?;
    let g2 = out
        .groups
        .iter()
        .find(|g| g.group_id == 2)
        .ok_or("no group 2")?;
    ensure(g2.mode == GroupMode::Dmr, || {
        format!("group 2 mode {:?}", g2.mode)
    })?;
    let t = rep.takeover.as_ref().ok_or("no takeover")?;
    ensure(t.host == NodeId(4), || format!("host {}", t.host))?;
    let (pid, src, idx) = *t.sources.first().ok_or("no source")?;
    ensure(pid == ProcessId(2) && src != NodeId(3), || {
        format!("source {:?}", t.sources)
    })?;
    ensure(out.hosting[2] == NodeId(4), || {
        format!("P2 on {}", out.hosting[2])
    })?;
    let stored = out.trace.iter().any(|r| {
        matches!(&r.event, TraceEvent::ReplicaStored { node, pid: 2, index, .. }
            if *node == src.0 && *index == idx.0)
    });
    ensure(stored, || {
        format!("no replica of P2 index {} stored on {src}", idx.0)
    })?;
    Ok(format!(
        "N4->main, N5->primary, DMR, P2 resumed on N4 from {src} checkpoint {}",
        idx.0
    ))
}

fn consistency_suite() -> Outcome {
    let opts = FuzzOptions::default();
    let (mut intervals, mut drops, mut dups, mut retries) = (0, 0, 0, 0);
    for seed in 0..1000u64 {
        let sc = fuzz::random_scenario(seed, &opts);
        let out = sim::run(&sc).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(out.status == RunStatus::Quiescent, || {
            format!("seed {seed}: {:?}", out.status)
        })?;
        let ks =
            oracle::committed_intervals(&out.trace).map_err(|e| format!("seed {seed}: {e}"))?;
        for k in ks {
            let r = oracle::check_global_checkpoint(&out.trace, k)
                .map_err(|e| format!("seed {seed}: {e}"))?;
            ensure(r.orphans.is_empty() && r.missing.is_empty(), || {
                format!(
                    "seed {seed} interval {k}: {} orphans, {} missing",
                    r.orphans.len(),
                    r.missing.len()
                )
            })?;
            intervals += 1;
        }
        for r in &out.trace {
            match &r.event {
                TraceEvent::Drop { .. } => drops += 1,
                TraceEvent::Duplicate { .. } => dups += 1,
                TraceEvent::Send { attempt, .. } if *attempt > 0 => retries += 1,
                _ => {}
            }
        }
    }
    ensure(drops > 0 && dups > 0 && retries > 0, || {
        "faults never exercised".into()
    })?;
    Ok(format!(
        "1000 scenarios, {intervals} global checkpoints clean ({drops} drops, {dups} duplicates, {retries} retransmits)"
    ))
}

fn rec(time: u64, event: TraceEvent) -> TraceRecord {
    TraceRecord { time, event }
}

fn crafted_msg(check_index: u64) -> MsgInfo {
    MsgInfo {
        kind: 2,
        sender: 0,
        dest: 1,
        check_index,
        seq_no: 1,
        epoch: 0,
        incarnation: 0,
        recovery: false,
    }
}

fn commit(time: u64, pid: u32) -> TraceRecord {
    rec(
        time,
        TraceEvent::Commit {
            node: pid,
            pid,
            index: 1,
            sent_to: vec![],
            recd_from: vec![],
        },
    )
}

fn stamp(time: u64, m: MsgInfo) -> TraceRecord {
    rec(time, TraceEvent::Stamp { pid: 0, msg: m })
}

fn accept(time: u64, m: MsgInfo) -> TraceRecord {
    rec(
        time,
        TraceEvent::Disposition {
            node: 1,
            pid: 1,
            msg: m,
            disposition: Disposition::Accept,
        },
    )
}

fn oracle_non_vacuity() -> Outcome {
    let start = rec(0, TraceEvent::Start { n: 2, seed: 0 });
    // P0 checkpoints, then sends; P1 receives before its checkpoint
    let m = crafted_msg(2);
    let orphan_trace = vec![
        start.clone(),
        commit(1, 0),
        stamp(2, m),
        accept(3, m),
        commit(4, 1),
    ];
    let r = oracle::check_global_checkpoint(&orphan_trace, 1).map_err(|e| e.to_string())?;
    ensure(
        !r.consistent && r.orphans == vec![m] && r.missing.is_empty(),
        || format!("orphan case: {r:?}"),
    )?;
    // P0 sends, then checkpoints; P1 receives only after its checkpoint
    let m = crafted_msg(1);
    let missing_trace = vec![start, stamp(1, m), commit(2, 0), commit(3, 1), accept(4, m)];
    let r = oracle::check_global_checkpoint(&missing_trace, 1).map_err(|e| e.to_string())?;
    ensure(
        !r.consistent && r.missing == vec![m] && r.orphans.is_empty(),
        || format!("missing case: {r:?}"),
    )?;
    Ok("orphan trace and missing-message trace both flagged".into())
}

fn rollback_minimality() -> Outcome {
    let opts = FuzzOptions {
        crash_chance: 1.0,
        ..FuzzOptions::default()
    };
    let (mut episodes, mut scenarios, mut partial) = (0, 0, 0);
    let mut seed = 1_000_000u64;
    while scenarios < 500 {
        let sc = fuzz::random_scenario(seed, &opts);
        seed += 1;
        let out = sim::run(&sc).map_err(|e| format!("seed {}: {e}", seed - 1))?;
        ensure(out.status == RunStatus::Quiescent, || {
            format!("seed {}: {:?}", seed - 1, out.status)
        })?;
        if out.reports.is_empty() {
            continue;
        }
        scenarios += 1;
        for rep in &out.reports {
            let w = oracle::failure_window(&out.trace, rep.notify_at).map_err(|e| e.to_string())?;
            let brute = oracle::brute_force_rollback_at(&w);
            ensure(brute == rep.rollback_set, || {
                format!(
                    "seed {}: engine {:?}, brute force {brute:?}",
                    seed - 1,
                    rep.rollback_set
                )
            })?;
            // recompute from the reconstructed matrix as well
            let sr = recovery::build_sr_matrix(&frozen_vectors(&out.trace, rep.notify_at, sc.n))
                .map_err(|e| e.to_string())?;
            let again = recovery::rollback_set_many(&sr, &rep.faulty).map_err(|e| e.to_string())?;
            ensure(again == rep.rollback_set, || {
                format!("seed {}: recomputed {again:?}", seed - 1)
            })?;
            let claims = oracle::check_rollback_claims(&w, &rep.rollback_set);
            ensure(claims.is_empty(), || {
                format!("seed {}: {claims:?}", seed - 1)
            })?;
            if rep.rollback_set.len() < sc.n {
                partial += 1;
            }
            episodes += 1;
        }
    }
    Ok(format!(
        "{scenarios} scenarios, {episodes} recoveries match brute force, zero orphan/lost ({partial} spared someone)"
    ))
}

/// Per-process send and receive counters of the interval cut by the failure
/// announced at `notify_at`, rebuilt from the trace.
fn frozen_vectors(
    trace: &[TraceRecord],
    notify_at: usize,
    n: usize,
) -> Vec<tmrckpt::model::StatusVector> {
    let w = oracle::failure_window(trace, notify_at).expect("window");
    let mut vs: Vec<_> = (0..n as u32)
        .map(|i| tmrckpt::model::StatusVector::new(ProcessId(i), n).unwrap())
        .collect();
    for m in &w.sends {
        vs[m.sender as usize]
            .record_send(ProcessId(m.dest as u32))
            .unwrap();
    }
    for m in &w.receives {
        vs[m.dest as usize]
            .record_receive(ProcessId(m.sender))
            .unwrap();
    }
    vs
}

fn overhead() -> Outcome {
    let mut ratios = Vec::new();
    let mut detail = Vec::new();
    for n in [2usize, 4, 8, 16] {
        let sc = Scenario::new(n).send(3, 0, 1).at(10, Action::Round);
        let out = sim::run(&sc).map_err(|e| e.to_string())?;
        ensure(out.status == RunStatus::Quiescent, || {
            format!("n={n}: {:?}", out.status)
        })?;
        let initial = oracle::count_sync_messages(&out.trace, 0);
        ensure(initial == n - 1, || {
            format!("n={n}: initial round sent {initial}, want {}", n - 1)
        })?;
        let c = oracle::count_sync_messages(&out.trace, 1);
        ratios.push(c as f64 / (n * n) as f64);
        detail.push(format!("n={n}:{c}"));
    }
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    let summary = format!(
        "{} ; c in [{lo:.3}, {hi:.3}], spread {:.1}% (limit 15%)",
        detail.join(" "),
        spread * 100.0
    );
    ensure(spread <= 0.15, || summary.clone())?;
    Ok(summary)
}

fn permutations(items: &[u32]) -> Vec<Vec<u32>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn tmr_tolerance() -> Outcome {
    let mut cases = 0;
    for order in permutations(&[0, 1, 2]) {
        for failures in 1..=3 {
            let mut sc = Scenario::new(3);
            sc.groups = vec![[NodeId(0), NodeId(1), NodeId(2)]];
            sc = sc
                .send(5, 0, 1)
                .send(6, 1, 2)
                .send(7, 2, 0)
                .at(10, Action::Round);
            for (i, &node) in order[..failures].iter().enumerate() {
                sc = sc.at(30 + 40 * i as u64, Action::Crash(NodeId(node)));
            }
            let out = sim::run(&sc).map_err(|e| e.to_string())?;
            let tag = format!("order {:?}", &order[..failures]);
            if failures < 3 {
                ensure(out.status == RunStatus::Quiescent, || {
                    format!("{tag}: {:?}", out.status)
                })?;
                for (p, loc) in out.located.iter().enumerate() {
                    let (_, idx) = loc.ok_or(format!("{tag}: P{p} checkpoint lost"))?;
                    ensure(idx >= CheckpointIndex(1), || {
                        format!("{tag}: P{p} only at {idx:?}")
                    })?;
                }
            } else {
                let dead = out
                    .trace
                    .iter()
                    .any(|r| matches!(r.event, TraceEvent::GroupDead { group: 1 }));
                ensure(
                    dead && matches!(out.status, RunStatus::Unrecoverable { .. }),
                    || format!("{tag}: {:?}", out.status),
                )?;
            }
            cases += 1;
        }
    }
    Ok(format!(
        "{cases} failure sequences: <=2 keep every checkpoint, 3rd reports group dead"
    ))
}

fn determinism() -> Outcome {
    let opts = FuzzOptions::default();
    for seed in 0..50u64 {
        let sc = fuzz::random_scenario(seed, &opts);
        let a = trace::to_jsonl(&sim::run(&sc).map_err(|e| e.to_string())?.trace);
        let b = trace::to_jsonl(&sim::run(&sc).map_err(|e| e.to_string())?.trace);
        ensure(a == b, || format!("seed {seed}: traces differ"))?;
    }
    let dir = std::env::temp_dir().join(format!("tmrckpt-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in 0..2 {
        let path = dir.join(format!("trace{run}.jsonl"));
        let status = Command::new(env!("CARGO_BIN_EXE_tmrckpt"))
            .args(["--preset", "paper-fig4", "--seed", "7", "--trace-out"])
            .arg(&path)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            format!("cli exit {:?}", status.status)
        })?;
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    let _ = std::fs::remove_dir_all(&dir);
    ensure(!files[0].is_empty() && files[0] == files[1], || {
        "trace files differ".into()
    })?;
    Ok("50 scenarios plus two CLI runs give byte-identical traces".into())
}

fn main() {
    let checks: Vec<(&str, Check)> = vec![
        (
            "golden paper-5proc",
            Box::new(|| timed(Duration::from_secs(1), golden_five_process)),
        ),
        (
            "golden paper-fig4",
            Box::new(|| timed(Duration::from_secs(1), golden_fig4)),
        ),
        (
            "consistent global checkpoints",
            Box::new(|| timed(Duration::from_secs(60), consistency_suite)),
        ),
        ("oracle non-vacuity", Box::new(oracle_non_vacuity)),
        ("rollback minimality", Box::new(rollback_minimality)),
        ("quadratic sync overhead", Box::new(overhead)),
        ("tmr tolerance", Box::new(tmr_tolerance)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.into_iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
