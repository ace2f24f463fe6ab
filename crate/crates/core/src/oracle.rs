//! Checks that read nothing but the trace.
//!
//! A send is the `stamp` record of a computation message and a receive is
//! its `accept` disposition. Events a process records after its last
//! commit are undone if a rollback of that process follows before the next
//! commit.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::model::ProcessId;
use crate::protocol::Disposition;
use crate::trace::{MsgInfo, TraceEvent, TraceRecord};

type Key = (u32, u32, i64, u64, u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsistencyReport {
    pub interval: u64,
    /// Received before the receiver's checkpoint, sent after the sender's.
    pub orphans: Vec<MsgInfo>,
    /// Sent before the sender's checkpoint, not received before the receiver's.
    pub missing: Vec<MsgInfo>,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("trace has no start record")]
    NoStart,
    #[error("interval {interval} was not committed by {missing:?}")]
    IncompleteRound { interval: u64, missing: Vec<u32> },
    #[error("no failure notification for {0}")]
    NoFailure(ProcessId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Send,
    Recv,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    pos: usize,
    side: Side,
    msg: MsgInfo,
}

/// Effective communication events and commit positions.
struct Timeline {
    n: usize,
    events: Vec<Event>,
    /// (pid, index) -> trace position of the commit.
    commits: BTreeMap<(u32, u64), usize>,
}

fn system_size(trace: &[TraceRecord]) -> Result<usize, OracleError> {
    trace
        .iter()
        .find_map(|r| match r.event {
            TraceEvent::Start { n, .. } => Some(n),
            _ => None,
        })
        .ok_or(OracleError::NoStart)
}

fn own_event(ev: &TraceEvent) -> Option<(u32, Side, MsgInfo)> {
    match ev {
        TraceEvent::Stamp { pid, msg } if msg.is_computation() => Some((*pid, Side::Send, *msg)),
        TraceEvent::Disposition {
            pid,
            msg,
            disposition: Disposition::Accept,
            ..
        } if msg.is_computation() => Some((*pid, Side::Recv, *msg)),
        _ => None,
    }
}

fn timeline(trace: &[TraceRecord]) -> Result<Timeline, OracleError> {
    let n = system_size(trace)?;
    let mut pending: Vec<Vec<Event>> = vec![Vec::new(); n];
    let mut events = Vec::new();
    let mut commits = BTreeMap::new();
    for (pos, r) in trace.iter().enumerate() {
        if let Some((pid, side, msg)) = own_event(&r.event) {
            pending[pid as usize].push(Event { pos, side, msg });
            continue;
        }
        match &r.event {
            TraceEvent::Commit { pid, index, .. } => {
                events.append(&mut pending[*pid as usize]);
                commits.insert((*pid, *index), pos);
            }
            TraceEvent::Rollback { pid, .. } => pending[*pid as usize].clear(),
            _ => {}
        }
    }
    for p in pending {
        events.extend(p);
    }
    events.sort_by_key(|e| e.pos);
    Ok(Timeline { n, events, commits })
}

/// Classifies every computation message against the checkpoints that
/// close interval `interval` at each process.
pub fn check_global_checkpoint(
    trace: &[TraceRecord],
    interval: u64,
) -> Result<ConsistencyReport, OracleError> {
    let tl = timeline(trace)?;
    let mut cut = Vec::with_capacity(tl.n);
    let mut absent = Vec::new();
    for p in 0..tl.n as u32 {
        match tl.commits.get(&(p, interval)) {
            Some(&pos) => cut.push(pos),
            None => {
                absent.push(p);
                cut.push(0);
            }
        }
    }
    if !absent.is_empty() {
        return Err(OracleError::IncompleteRound {
            interval,
            missing: absent,
        });
    }
    let mut sent: BTreeMap<Key, (MsgInfo, bool)> = BTreeMap::new();
    let mut recd: BTreeMap<Key, (MsgInfo, bool)> = BTreeMap::new();
    for e in &tl.events {
        let before = match e.side {
            Side::Send => e.pos < cut[e.msg.sender as usize],
            Side::Recv => e.pos < cut[e.msg.dest as usize],
        };
        let map = match e.side {
            Side::Send => &mut sent,
            Side::Recv => &mut recd,
        };
        let slot = map.entry(e.msg.key()).or_insert((e.msg, false));
        slot.1 |= before;
    }
    let keys: BTreeSet<Key> = sent.keys().chain(recd.keys()).copied().collect();
    let mut orphans = Vec::new();
    let mut missing = Vec::new();
    for k in keys {
        let s = sent.get(&k).is_some_and(|v| v.1);
        let r = recd.get(&k).is_some_and(|v| v.1);
        let info = sent.get(&k).or(recd.get(&k)).expect("key from one map").0;
        if r && !s {
            orphans.push(info);
        }
        if s && !r {
            missing.push(info);
        }
    }
    let consistent = orphans.is_empty() && missing.is_empty();
    Ok(ConsistencyReport {
        interval,
        orphans,
        missing,
        consistent,
    })
}

/// Checkpoint indices committed by every process.
pub fn committed_intervals(trace: &[TraceRecord]) -> Result<Vec<u64>, OracleError> {
    let tl = timeline(trace)?;
    let mut per: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
    for &(p, k) in tl.commits.keys() {
        per.entry(k).or_default().insert(p);
    }
    Ok(per
        .into_iter()
        .filter(|(_, ps)| ps.len() == tl.n)
        .map(|(k, _)| k)
        .collect())
}

/// Number of first transmissions of checkpoint requests and round status
/// messages for `interval`, one per recipient.
pub fn count_sync_messages(trace: &[TraceRecord], interval: u64) -> usize {
    trace
        .iter()
        .filter(|r| match &r.event {
            TraceEvent::Send { msg, attempt, .. } => {
                *attempt == 0 && msg.kind <= 1 && !msg.recovery && msg.check_index == interval
            }
            _ => false,
        })
        .count()
}

/// Communication of the interval aborted by a failure notification.
#[derive(Debug, Clone)]
pub struct FailureWindow {
    pub notify_at: usize,
    pub faulty: Vec<u32>,
    /// Sends and receives recorded by non-faulty processes since their last
    /// commit or rollback.
    pub sends: Vec<MsgInfo>,
    pub receives: Vec<MsgInfo>,
    pub n: usize,
}

pub fn failure_window(
    trace: &[TraceRecord],
    notify_at: usize,
) -> Result<FailureWindow, OracleError> {
    let n = system_size(trace)?;
    let faulty = match &trace[notify_at].event {
        TraceEvent::NotifyFailure { faulty, .. } => faulty.clone(),
        _ => return Err(OracleError::NoFailure(ProcessId(u32::MAX))),
    };
    let mut pending: Vec<Vec<(Side, MsgInfo)>> = vec![Vec::new(); n];
    for r in &trace[..notify_at] {
        if let Some((pid, side, msg)) = own_event(&r.event) {
            pending[pid as usize].push((side, msg));
            continue;
        }
        match &r.event {
            TraceEvent::Commit { pid, .. } | TraceEvent::Rollback { pid, .. } => {
                pending[*pid as usize].clear()
            }
            _ => {}
        }
    }
    let mut sends = Vec::new();
    let mut receives = Vec::new();
    for (p, evs) in pending.into_iter().enumerate() {
        if faulty.contains(&(p as u32)) {
            continue;
        }
        for (side, msg) in evs {
            match side {
                Side::Send => sends.push(msg),
                Side::Recv => receives.push(msg),
            }
        }
    }
    Ok(FailureWindow {
        notify_at,
        faulty,
        sends,
        receives,
        n,
    })
}

/// Position of the latest failure notification naming `faulty`.
pub fn find_notification(trace: &[TraceRecord], faulty: ProcessId) -> Option<usize> {
    trace.iter().rposition(|r| match &r.event {
        TraceEvent::NotifyFailure { faulty: f, .. } => f.contains(&faulty.0),
        _ => false,
    })
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

/// Connected component of the failed processes in the message graph of the
/// aborted interval, from the trace alone.
pub fn brute_force_rollback_at(window: &FailureWindow) -> BTreeSet<ProcessId> {
    let mut parent: Vec<usize> = (0..window.n).collect();
    for m in window.sends.iter().chain(&window.receives) {
        let (a, b) = (m.sender as usize, m.dest as usize);
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let roots: BTreeSet<usize> = window
        .faulty
        .iter()
        .map(|&f| find(&mut parent, f as usize))
        .collect();
    (0..window.n)
        .filter(|&p| roots.contains(&find(&mut parent, p)))
        .map(|p| ProcessId(p as u32))
        .collect()
}

pub fn brute_force_rollback(
    trace: &[TraceRecord],
    faulty: ProcessId,
) -> Result<BTreeSet<ProcessId>, OracleError> {
    let at = find_notification(trace, faulty).ok_or(OracleError::NoFailure(faulty))?;
    Ok(brute_force_rollback_at(&failure_window(trace, at)?))
}

/// Violations of the two rollback claims for a candidate set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ClaimViolations {
    /// Received by a process that keeps its state from one that rolls back.
    pub orphans: Vec<MsgInfo>,
    /// Sent by a process that keeps its state to one that rolls back.
    pub lost: Vec<MsgInfo>,
}

impl ClaimViolations {
    pub fn is_empty(&self) -> bool {
        self.orphans.is_empty() && self.lost.is_empty()
    }
}

pub fn check_rollback_claims(window: &FailureWindow, set: &BTreeSet<ProcessId>) -> ClaimViolations {
    let inside = |p: u32| set.contains(&ProcessId(p));
    let mut v = ClaimViolations::default();
    for m in window.sends.iter().chain(&window.receives) {
        let (s, r) = (m.sender, m.dest as u32);
        if inside(s) && !inside(r) && !v.orphans.contains(m) {
            v.orphans.push(*m);
        }
        if !inside(s) && inside(r) && !v.lost.contains(m) {
            v.lost.push(*m);
        }
    }
    v
}

/// Smallest set containing the failed processes that satisfies both
/// claims, found by enumerating subsets. Only for small systems.
pub fn minimal_rollback_by_enumeration(window: &FailureWindow) -> Option<BTreeSet<ProcessId>> {
    assert!(window.n <= 12, "enumeration is exponential");
    let required: u32 = window.faulty.iter().fold(0, |acc, &f| acc | 1 << f);
    let mut best: Option<u32> = None;
    for mask in 0u32..(1 << window.n) {
        if mask & required != required {
            continue;
        }
        if best.is_some_and(|b| mask.count_ones() >= b.count_ones()) {
            continue;
        }
        let set: BTreeSet<ProcessId> = (0..window.n as u32)
            .filter(|p| mask & (1 << p) != 0)
            .map(ProcessId)
            .collect();
        if check_rollback_claims(window, &set).is_empty() {
            best = Some(mask);
        }
    }
    best.map(|mask| {
        (0..window.n as u32)
            .filter(|p| mask & (1 << p) != 0)
            .map(ProcessId)
            .collect()
    })
}

/// Computation messages accepted more than once.
pub fn duplicate_accepts(trace: &[TraceRecord]) -> Vec<MsgInfo> {
    let mut seen = BTreeSet::new();
    let mut dups = Vec::new();
    for r in trace {
        if let TraceEvent::Disposition {
            msg,
            disposition: Disposition::Accept,
            ..
        } = &r.event
        {
            if msg.is_computation() && !seen.insert(msg.key()) {
                dups.push(*msg);
            }
        }
    }
    dups
}

/// Records that show a dead node sending or accepting.
pub fn crash_isolation_violations(trace: &[TraceRecord]) -> Vec<usize> {
    let mut dead = BTreeSet::new();
    let mut bad = Vec::new();
    for (i, r) in trace.iter().enumerate() {
        match &r.event {
            TraceEvent::Crash { node } => {
                dead.insert(*node);
            }
            TraceEvent::Restart { node } => {
                dead.remove(node);
            }
            TraceEvent::Send { node, .. } | TraceEvent::Disposition { node, .. }
                if dead.contains(node) =>
            {
                bad.push(i);
            }
            _ => {}
        }
    }
    bad
}
