use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;

use tmrckpt::fuzz::{self, FuzzOptions};
use tmrckpt::model::{NodeId, ProcessId, StatusVector};
use tmrckpt::oracle;
use tmrckpt::protocol::{compute_deficit, Disposition};
use tmrckpt::recovery::{self, SrMatrix, VerdictReason};
use tmrckpt::runner;
use tmrckpt::scenario::parse_scenario;
use tmrckpt::sim::{self, RunStatus};
use tmrckpt::tmr::{
    handle_member_failure, replication_targets, GroupMode, TmrError, TmrGroup, TmrRole,
};
use tmrckpt::trace::TraceEvent;

/// Symmetric adjacency over `n` processes from a list of candidate edges.
fn graph(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<ProcessId>> {
    let mut rows = vec![Vec::new(); n];
    for &(a, b) in edges {
        let (a, b) = (a % n, b % n);
        if a != b && !rows[a].contains(&ProcessId(b as u32)) {
            rows[a].push(ProcessId(b as u32));
            rows[b].push(ProcessId(a as u32));
        }
    }
    rows
}

fn component(rows: &[Vec<ProcessId>], from: ProcessId) -> BTreeSet<ProcessId> {
    let mut seen = BTreeSet::from([from]);
    let mut queue = VecDeque::from([from]);
    while let Some(p) = queue.pop_front() {
        for &q in &rows[p.index()] {
            if seen.insert(q) {
                queue.push_back(q);
            }
        }
    }
    seen
}

fn sr_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, usize)> {
    (2usize..10).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..2 * n), 0..n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rollback_set_is_the_component((n, edges, f) in sr_strategy()) {
        let rows = graph(n, &edges);
        let sr = SrMatrix::from_rows(rows.clone()).unwrap();
        let faulty = ProcessId(f as u32);
        prop_assert_eq!(recovery::rollback_set(&sr, faulty).unwrap(), component(&rows, faulty));
    }

    #[test]
    fn verdict_paths_walk_real_edges((n, edges, f) in sr_strategy()) {
        let rows = graph(n, &edges);
        let sr = SrMatrix::from_rows(rows.clone()).unwrap();
        let faulty = ProcessId(f as u32);
        let comp = component(&rows, faulty);
        for i in 0..n as u32 {
            let p = ProcessId(i);
            let v = recovery::detect_recovery(&sr, p, faulty).unwrap();
            prop_assert_eq!(v.must_rollback, comp.contains(&p));
            match &v.reason {
                VerdictReason::IsFaulty => prop_assert_eq!(p, faulty),
                VerdictReason::Direct => prop_assert!(rows[i as usize].contains(&faulty)),
                VerdictReason::NotDependent => prop_assert!(!comp.contains(&p)),
                VerdictReason::Indirect { via } => {
                    prop_assert!(!rows[i as usize].contains(&faulty));
                    let path = v.full_path(faulty);
                    let mut cur = p;
                    for &next in &path {
                        prop_assert!(rows[cur.index()].contains(&next));
                        cur = next;
                    }
                    prop_assert!(!via.contains(&p) && !via.contains(&faulty));
                }
            }
        }
    }

    #[test]
    fn matrix_from_vectors_is_symmetric(
        n in 2usize..8,
        sends in prop::collection::vec((0usize..8, 0usize..8), 0..30),
    ) {
        let mut vs: Vec<StatusVector> =
            (0..n as u32).map(|i| StatusVector::new(ProcessId(i), n).unwrap()).collect();
        for (a, b) in sends {
            let (a, b) = (a % n, b % n);
            if a == b {
                continue;
            }
            vs[a].record_send(ProcessId(b as u32)).unwrap();
            vs[b].record_receive(ProcessId(a as u32)).unwrap();
        }
        let sr = recovery::build_sr_matrix(&vs).unwrap();
        for i in 0..n {
            for &q in sr.row(ProcessId(i as u32)) {
                prop_assert!(sr.row(q).contains(&ProcessId(i as u32)));
                let touched = vs[i].sent_to(q) + vs[i].recd_from(q);
                prop_assert!(touched > 0);
            }
        }
    }

    /// The deficit is exactly the number of messages a peer reports sent
    /// that this process has not recorded.
    #[test]
    fn deficit_counts_in_flight_messages(
        n in 2usize..7,
        sent in prop::collection::vec(0u64..5, 7),
        arrived in prop::collection::vec(0u64..5, 7),
    ) {
        let me = ProcessId(0);
        let mut own = StatusVector::new(me, n).unwrap();
        let mut peers = BTreeMap::new();
        let mut want = Vec::new();
        for i in 1..n {
            let p = ProcessId(i as u32);
            let mut v = StatusVector::new(p, n).unwrap();
            let got = arrived[i].min(sent[i]);
            for _ in 0..sent[i] {
                v.record_send(me).unwrap();
            }
            for _ in 0..got {
                own.record_receive(p).unwrap();
            }
            if sent[i] > got {
                want.push((p, sent[i] - got));
            }
            peers.insert(p, v);
        }
        prop_assert_eq!(compute_deficit(&peers, &own).unwrap(), want);
    }

    #[test]
    fn role_chain_keeps_survivor_order(order in Just(vec![0u32, 1, 2]).prop_shuffle(), k in 1usize..=3) {
        let mut g = TmrGroup::new(7, NodeId(0), NodeId(1), NodeId(2)).unwrap();
        let mut expect = vec![0u32, 1, 2];
        for (step, &f) in order[..k].iter().enumerate() {
            expect.retain(|&x| x != f);
            let res = handle_member_failure(&mut g, NodeId(f));
            if step == 2 {
                prop_assert_eq!(res, Err(TmrError::GroupDead(7)));
                prop_assert_eq!(g.mode(), GroupMode::Dead);
            } else {
                res.unwrap();
                let got: Vec<u32> = g.alive().iter().map(|n| n.0).collect();
                prop_assert_eq!(&got, &expect);
                for (rank, &m) in expect.iter().enumerate() {
                    prop_assert_eq!(g.role_of(NodeId(m)), Some(TmrRole::from_rank(rank)));
                    // in DMR the two survivors back each other up; alone, nobody
                    let ts = replication_targets(&g, NodeId(m)).unwrap();
                    prop_assert_eq!(ts.len(), expect.len() - 1);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scenario_render_round_trips(seed in any::<u64>()) {
        let sc = fuzz::random_scenario(seed, &FuzzOptions::default());
        prop_assert_eq!(parse_scenario(&sc.render()).unwrap(), sc);
    }

    #[test]
    fn random_runs_pass_every_oracle(seed in any::<u64>()) {
        let sc = fuzz::random_scenario(seed, &FuzzOptions::default());
        let (_, rep) = runner::execute(&sc).unwrap();
        prop_assert!(rep.ok(), "{:?} {:?}", rep.status, rep.violations);
    }

    /// Each process accepts a sender's computation messages in sequence
    /// order, once each, within an incarnation of an interval.
    #[test]
    fn computation_messages_are_accepted_in_order(seed in any::<u64>()) {
        let opts = FuzzOptions { max_drop: 0.3, max_duplicate: 0.5, ..FuzzOptions::default() };
        let sc = fuzz::random_scenario(seed, &opts);
        let out = sim::run(&sc).unwrap();
        prop_assert_eq!(&out.status, &RunStatus::Quiescent);
        prop_assert!(oracle::duplicate_accepts(&out.trace).is_empty());
        let mut last: BTreeMap<(u32, u32, u64, u32), u64> = BTreeMap::new();
        for r in &out.trace {
            match &r.event {
                TraceEvent::Disposition { pid, msg, disposition: Disposition::Accept, .. }
                    if msg.is_computation() =>
                {
                    let key = (*pid, msg.sender, msg.check_index, msg.incarnation);
                    let prev = last.insert(key, msg.seq_no).unwrap_or(0);
                    prop_assert_eq!(msg.seq_no, prev + 1);
                }
                TraceEvent::Rollback { pid, .. } => last.retain(|k, _| k.0 != *pid && k.1 != *pid),
                _ => {}
            }
        }
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>()) {
        let sc = fuzz::random_scenario(seed, &FuzzOptions::default());
        let a = sim::run(&sc).unwrap();
        let b = sim::run(&sc).unwrap();
        prop_assert_eq!(a.trace, b.trace);
    }

    /// With one crash in a TMR scenario every process still has a
    /// checkpoint on a live node afterwards.
    #[test]
    fn single_failures_keep_checkpoints_available(seed in any::<u64>()) {
        let opts = FuzzOptions { min_n: 3, crash_chance: 1.0, tmr_chance: 1.0, ..FuzzOptions::default() };
        let sc = fuzz::random_scenario(seed, &opts);
        let out = sim::run(&sc).unwrap();
        prop_assert_eq!(&out.status, &RunStatus::Quiescent);
        prop_assert!(out.located.iter().all(Option::is_some), "{:?}", out.located);
    }
}
