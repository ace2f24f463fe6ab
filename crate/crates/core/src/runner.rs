//! Runs a scenario, applies every oracle to the trace and builds the report.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::fuzz::{self, FuzzOptions};
use crate::model::{NodeId, ProcessId};
use crate::oracle::{self, ClaimViolations, ConsistencyReport};
use crate::scenario::Scenario;
use crate::sim::{self, GroupSummary, RecoveryReport, RunStatus, SimError, SimOutcome};
use crate::trace::{MsgInfo, TraceEvent, TraceRecord};

#[derive(Debug, Clone, Default)]
pub struct RunFlags {
    pub seed: Option<u64>,
    pub step_budget: Option<u64>,
}

impl RunFlags {
    pub fn apply(&self, sc: &mut Scenario) {
        if let Some(s) = self.seed {
            sc.net.seed = s;
        }
        if let Some(b) = self.step_budget {
            sc.step_budget = b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Savings {
    pub rolled_back: usize,
    pub n: usize,
    pub spared: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveryCheck {
    #[serde(flatten)]
    pub report: RecoveryReport,
    /// Component computed from the trace alone.
    pub brute_force: BTreeSet<ProcessId>,
    pub agrees: bool,
    pub claims: ClaimViolations,
    /// Whether no smaller set satisfies the claims (small systems only).
    pub minimal: Option<bool>,
    pub savings: Savings,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub status: RunStatus,
    pub exit_code: i32,
    pub n: usize,
    pub seed: u64,
    pub steps: u64,
    pub end_time: u64,
    pub intervals: Vec<ConsistencyReport>,
    pub sync_messages: Vec<(u64, usize)>,
    pub recoveries: Vec<RecoveryCheck>,
    pub groups: Vec<GroupSummary>,
    pub hosting: Vec<NodeId>,
    pub violations: Vec<String>,
    /// Trace records involved in the first violation.
    pub counterexample: Vec<TraceRecord>,
}

impl RunReport {
    pub fn ok(&self) -> bool {
        self.exit_code == 0
    }
}

fn involving(trace: &[TraceRecord], msgs: &[MsgInfo]) -> Vec<TraceRecord> {
    let keys: BTreeSet<_> = msgs.iter().map(|m| m.key()).collect();
    trace
        .iter()
        .filter(|r| match &r.event {
            TraceEvent::Stamp { msg, .. }
            | TraceEvent::Disposition { msg, .. }
            | TraceEvent::Deliver { msg, .. } => keys.contains(&msg.key()),
            TraceEvent::Commit { .. } | TraceEvent::Rollback { .. } => true,
            _ => false,
        })
        .cloned()
        .collect()
}

/// Checks a finished run against every oracle.
pub fn check(sc: &Scenario, out: &SimOutcome) -> RunReport {
    let trace = &out.trace;
    let mut violations = Vec::new();
    let mut counterexample = Vec::new();
    let mut intervals = Vec::new();
    let mut sync_messages = Vec::new();

    match oracle::committed_intervals(trace) {
        Ok(ks) => {
            for k in ks {
                match oracle::check_global_checkpoint(trace, k) {
                    Ok(r) => {
                        if !r.consistent {
                            violations.push(format!(
                                "interval {k}: {} orphan and {} missing messages",
                                r.orphans.len(),
                                r.missing.len()
                            ));
                            if counterexample.is_empty() {
                                let msgs: Vec<MsgInfo> =
                                    r.orphans.iter().chain(&r.missing).copied().collect();
                                counterexample = involving(trace, &msgs);
                            }
                        }
                        intervals.push(r);
                    }
                    Err(e) => violations.push(e.to_string()),
                }
                sync_messages.push((k, oracle::count_sync_messages(trace, k)));
            }
        }
        Err(e) => violations.push(e.to_string()),
    }

    let dups = oracle::duplicate_accepts(trace);
    if !dups.is_empty() {
        violations.push(format!("{} messages accepted twice", dups.len()));
        if counterexample.is_empty() {
            counterexample = involving(trace, &dups);
        }
    }
    let isolation = oracle::crash_isolation_violations(trace);
    if !isolation.is_empty() {
        violations.push(format!("{} records from dead nodes", isolation.len()));
        if counterexample.is_empty() {
            counterexample = isolation.iter().map(|&i| trace[i].clone()).collect();
        }
    }

    let mut recoveries = Vec::new();
    for rep in &out.reports {
        let window = match oracle::failure_window(trace, rep.notify_at) {
            Ok(w) => w,
            Err(e) => {
                violations.push(e.to_string());
                continue;
            }
        };
        let brute = oracle::brute_force_rollback_at(&window);
        let agrees = brute == rep.rollback_set;
        if !agrees {
            violations.push(format!(
                "epoch {}: rollback set {:?} differs from trace component {:?}",
                rep.epoch, rep.rollback_set, brute
            ));
        }
        let claims = oracle::check_rollback_claims(&window, &rep.rollback_set);
        if !claims.is_empty() {
            violations.push(format!(
                "epoch {}: {} orphan and {} lost messages after rollback",
                rep.epoch,
                claims.orphans.len(),
                claims.lost.len()
            ));
        }
        let minimal = (window.n <= 6).then(|| {
            oracle::minimal_rollback_by_enumeration(&window)
                .is_some_and(|m| m.len() == rep.rollback_set.len())
        });
        if minimal == Some(false) {
            violations.push(format!("epoch {}: rollback set is not minimal", rep.epoch));
        }
        let rolled_back = rep.rollback_set.len();
        recoveries.push(RecoveryCheck {
            report: rep.clone(),
            brute_force: brute,
            agrees,
            claims,
            minimal,
            savings: Savings {
                rolled_back,
                n: sc.n,
                spared: sc.n - rolled_back,
            },
        });
    }

    let exit_code = match &out.status {
        RunStatus::Livelock { .. } | RunStatus::Stalled { .. } => 2,
        RunStatus::Unrecoverable { .. } | RunStatus::Fault { .. } => 1,
        RunStatus::Quiescent if !violations.is_empty() => 1,
        RunStatus::Quiescent => 0,
    };
    RunReport {
        status: out.status.clone(),
        exit_code,
        n: sc.n,
        seed: sc.net.seed,
        steps: out.steps,
        end_time: out.end_time,
        intervals,
        sync_messages,
        recoveries,
        groups: out.groups.clone(),
        hosting: out.hosting.clone(),
        violations,
        counterexample,
    }
}

pub fn execute(sc: &Scenario) -> Result<(SimOutcome, RunReport), SimError> {
    let out = sim::run(sc)?;
    let report = check(sc, &out);
    Ok((out, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct FuzzFailure {
    pub seed: u64,
    pub exit_code: i32,
    pub reason: String,
    pub scenario: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FuzzSummary {
    pub runs: usize,
    pub recoveries: usize,
    pub intervals_checked: usize,
    pub failures: Vec<FuzzFailure>,
}

/// Recoveries, checked intervals and the failure, if any, of one run.
type Tally = (usize, usize, Option<FuzzFailure>);

fn fuzz_one(seed: u64, opts: &FuzzOptions) -> Tally {
    let sc = fuzz::random_scenario(seed, opts);
    match execute(&sc) {
        Ok((_, rep)) => {
            let failure = (!rep.ok()).then(|| FuzzFailure {
                seed,
                exit_code: rep.exit_code,
                reason: if rep.violations.is_empty() {
                    format!("{:?}", rep.status)
                } else {
                    rep.violations.join("; ")
                },
                scenario: sc.render(),
            });
            (rep.recoveries.len(), rep.intervals.len(), failure)
        }
        Err(e) => (
            0,
            0,
            Some(FuzzFailure {
                seed,
                exit_code: 1,
                reason: e.to_string(),
                scenario: sc.render(),
            }),
        ),
    }
}

/// Runs `k` random scenarios with seeds `base..base + k`, spread over the
/// available cores. The summary does not depend on the thread count.
pub fn fuzz(k: usize, base: u64, opts: &FuzzOptions) -> FuzzSummary {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(k.max(1));
    let mut results: Vec<(usize, Tally)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..k)
                        .step_by(workers)
                        .map(|i| (i, fuzz_one(base.wrapping_add(i as u64), opts)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("fuzz worker panicked"))
            .collect()
    });
    results.sort_by_key(|(i, _)| *i);
    let mut summary = FuzzSummary {
        runs: results.len(),
        recoveries: 0,
        intervals_checked: 0,
        failures: Vec::new(),
    };
    for (_, (rec, ints, fail)) in results {
        summary.recoveries += rec;
        summary.intervals_checked += ints;
        summary.failures.extend(fail);
    }
    summary
}
