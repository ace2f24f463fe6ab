//! Deterministic discrete-event driver for the protocol, the TMR layer and
//! recovery episodes.

pub mod net;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{CheckpointIndex, CheckpointRecord, Message, NodeId, ProcessId};
use crate::protocol::{
    AppRequest, Effects, InitiatorPolicy, Note, ProcessState, ProtocolError, ProtocolPhase,
    RecoveryDecision,
};
use crate::recovery::{self, RecoveryError, RecoveryVerdict};
use crate::scenario::{Action, PolicyKind, Scenario};
use crate::tmr::{GroupMode, Promotion, Takeover, TmrGroup, TmrLayer, TmrRole};
use crate::trace::{MsgInfo, Trace, TraceEvent, TraceRecord};

pub use net::{transmit, DelayModel, EventQueue, NetConfig, ScheduleError, Transmission};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Process(ProcessId),
    Node(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Proto(Message),
    Replica(CheckpointRecord),
    Ack(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEvent {
    Deliver {
        id: u64,
        from: NodeId,
        to: Target,
        packet: Packet,
    },
    Timeout {
        id: u64,
        attempt: u32,
    },
    Crash(NodeId),
    NotifyFailure(NodeId),
    AppSend {
        pid: ProcessId,
        dest: ProcessId,
        payload: Vec<u8>,
    },
    InitiateRound,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("{0} is already dead")]
    AlreadyDead(NodeId),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error("processes disagree on the rollback set")]
    SplitVerdict,
    #[error("unrecoverable: {0}")]
    Unrecoverable(String),
}

/// Summary of one recovery episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub epoch: u32,
    pub failed_node: NodeId,
    pub faulty: Vec<ProcessId>,
    pub interval: CheckpointIndex,
    pub verdicts: Vec<RecoveryVerdict>,
    pub rollback_set: BTreeSet<ProcessId>,
    pub purged: usize,
    pub promotions: Vec<Promotion>,
    pub takeover: Option<TakeoverSummary>,
    /// Position of the failure notification in the trace.
    pub notify_at: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TakeoverSummary {
    pub host: NodeId,
    pub sources: Vec<(ProcessId, NodeId, CheckpointIndex)>,
}

impl From<&Takeover> for TakeoverSummary {
    fn from(t: &Takeover) -> Self {
        TakeoverSummary {
            host: t.host,
            sources: t.sources.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Quiescent,
    /// Step budget exhausted; lists the first pending events.
    Livelock {
        pending: Vec<String>,
    },
    /// Queue drained without reaching a resting state.
    Stalled {
        reason: String,
    },
    Unrecoverable {
        reason: String,
    },
    Fault {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupSummary {
    pub group_id: u32,
    pub mode: GroupMode,
    pub roles: Vec<(NodeId, TmrRole)>,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub trace: Trace,
    pub reports: Vec<RecoveryReport>,
    pub status: RunStatus,
    pub end_time: u64,
    pub steps: u64,
    pub groups: Vec<GroupSummary>,
    /// Final node of every process.
    pub hosting: Vec<NodeId>,
    pub check_index: Vec<CheckpointIndex>,
    /// Live node holding each process's newest checkpoint at the end.
    pub located: Vec<Option<(NodeId, CheckpointIndex)>>,
}

struct Outstanding {
    from: NodeId,
    to: Target,
    packet: Packet,
    attempt: u32,
    replica_job: Option<(ProcessId, CheckpointIndex)>,
}

struct Episode {
    node: NodeId,
    faulty: Vec<ProcessId>,
    notified: bool,
    epoch: u32,
    notify_at: usize,
    decisions: BTreeMap<ProcessId, RecoveryDecision>,
    promotions: Vec<Promotion>,
    takeover: Option<Takeover>,
    replay: BTreeMap<ProcessId, Vec<AppRequest>>,
}

pub struct Simulation {
    cfg: NetConfig,
    n: usize,
    queue: EventQueue<SimEvent>,
    rng: ChaCha8Rng,
    procs: Vec<ProcessState>,
    host: Vec<NodeId>,
    hosted: BTreeMap<NodeId, Vec<ProcessId>>,
    alive: BTreeMap<NodeId, bool>,
    tmr: TmrLayer,
    detection_latency: u64,
    step_budget: u64,
    trace: Trace,
    outstanding: BTreeMap<u64, Outstanding>,
    next_packet: u64,
    replica_jobs: BTreeMap<(ProcessId, CheckpointIndex), usize>,
    episode: Option<Episode>,
    pending_crashes: Vec<NodeId>,
    pending_rounds: u32,
    round_open: Option<CheckpointIndex>,
    held_app: Vec<(ProcessId, ProcessId, Vec<u8>)>,
    epoch: u32,
    reports: Vec<RecoveryReport>,
    steps: u64,
}

impl Simulation {
    pub fn new(sc: &Scenario) -> Result<Self, SimError> {
        let errs = sc.validate();
        if !errs.is_empty() {
            return Err(SimError::Scenario(errs.join("; ")));
        }
        let n = sc.n;
        let mut host = vec![NodeId(0); n];
        let mut hosted = BTreeMap::new();
        let mut alive = BTreeMap::new();
        for d in sc.hosting() {
            for p in &d.hosts {
                host[p.index()] = d.id;
            }
            hosted.insert(d.id, d.hosts.clone());
            alive.insert(d.id, true);
        }
        let groups = sc
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| TmrGroup::new(i as u32 + 1, g[0], g[1], g[2]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| SimError::Scenario(e.to_string()))?;
        let policy = match sc.policy {
            PolicyKind::RoundRobin => InitiatorPolicy::RoundRobin,
            PolicyKind::TmrMains => {
                let mains: BTreeSet<NodeId> = groups.iter().map(|g| g.members[0]).collect();
                let pids: Vec<ProcessId> = (0..n as u32)
                    .map(ProcessId)
                    .filter(|p| mains.contains(&host[p.index()]))
                    .collect();
                InitiatorPolicy::TmrMains(pids)
            }
        };
        let procs = (0..n as u32)
            .map(|i| ProcessState::new(ProcessId(i), n, policy.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut sim = Simulation {
            cfg: sc.net.clone(),
            n,
            queue: EventQueue::new(),
            rng: ChaCha8Rng::seed_from_u64(sc.net.seed),
            procs,
            host,
            hosted,
            alive,
            tmr: TmrLayer::new(groups),
            detection_latency: sc.detection_latency,
            step_budget: sc.step_budget,
            trace: Vec::new(),
            outstanding: BTreeMap::new(),
            next_packet: 0,
            replica_jobs: BTreeMap::new(),
            episode: None,
            pending_crashes: Vec::new(),
            pending_rounds: 0,
            round_open: None,
            held_app: Vec::new(),
            epoch: 0,
            reports: Vec::new(),
            steps: 0,
        };
        sim.record(TraceEvent::Start {
            n,
            seed: sc.net.seed,
        });
        // the initial checkpoint is always taken first
        sim.queue.schedule(0, SimEvent::InitiateRound)?;
        for e in &sc.script {
            match &e.action {
                Action::Send { from, to, payload } => sim.queue.schedule(
                    e.at,
                    SimEvent::AppSend {
                        pid: *from,
                        dest: *to,
                        payload: payload.as_bytes().to_vec(),
                    },
                )?,
                Action::Round => sim.queue.schedule(e.at, SimEvent::InitiateRound)?,
                Action::Crash(node) => sim.inject_crash(*node, e.at)?,
            }
        }
        Ok(sim)
    }

    pub fn schedule(&mut self, at: u64, event: SimEvent) -> Result<(), SimError> {
        Ok(self.queue.schedule(at, event)?)
    }

    pub fn inject_crash(&mut self, node: NodeId, at: u64) -> Result<(), SimError> {
        match self.alive.get(&node) {
            None => Err(SimError::UnknownNode(node)),
            Some(false) => Err(SimError::AlreadyDead(node)),
            Some(true) => Ok(self.queue.schedule(at, SimEvent::Crash(node))?),
        }
    }

    pub fn run(mut self) -> SimOutcome {
        let status = loop {
            if self.steps >= self.step_budget {
                let pending = self
                    .queue
                    .iter()
                    .take(20)
                    .map(|(t, e)| format!("t={t} {e:?}"))
                    .collect();
                break RunStatus::Livelock { pending };
            }
            let Some((t, ev)) = self.queue.pop() else {
                break self.resting_status();
            };
            self.steps += 1;
            let res = self.step(t, ev).and_then(|_| self.after_step());
            match res {
                Ok(()) => {}
                Err(SimError::Unrecoverable(reason)) => {
                    self.record(TraceEvent::Unrecoverable {
                        reason: reason.clone(),
                    });
                    break RunStatus::Unrecoverable { reason };
                }
                Err(e) => {
                    break RunStatus::Fault {
                        reason: e.to_string(),
                    }
                }
            }
        };
        self.record(TraceEvent::End {
            quiescent: status == RunStatus::Quiescent,
        });
        let groups = self
            .tmr
            .groups
            .iter()
            .map(|g| GroupSummary {
                group_id: g.group_id,
                mode: g.mode(),
                roles: g
                    .alive()
                    .iter()
                    .map(|&m| (m, g.role_of(m).expect("alive member")))
                    .collect(),
            })
            .collect();
        let alive: BTreeSet<NodeId> = self
            .alive
            .iter()
            .filter_map(|(&n, &a)| a.then_some(n))
            .collect();
        let located = (0..self.n as u32)
            .map(|i| {
                let p = ProcessId(i);
                let node = self
                    .tmr
                    .locate_checkpoint(p, self.host[p.index()], &alive)
                    .ok()?;
                Some((node, self.tmr.store.get(node, p)?.index))
            })
            .collect();
        SimOutcome {
            located,
            end_time: self.queue.now(),
            steps: self.steps,
            check_index: self.procs.iter().map(|p| p.check_index()).collect(),
            hosting: self.host.clone(),
            trace: self.trace,
            reports: self.reports,
            status,
            groups,
        }
    }

    fn resting_status(&self) -> RunStatus {
        if !self.pending_crashes.is_empty() {
            return RunStatus::Stalled {
                reason: format!("crashes never applied: {:?}", self.pending_crashes),
            };
        }
        if self.episode.is_some() {
            return RunStatus::Stalled {
                reason: "recovery did not complete".into(),
            };
        }
        if self.pending_rounds > 0 || self.round_open.is_some() {
            return RunStatus::Stalled {
                reason: "checkpoint round did not complete".into(),
            };
        }
        if let Some(p) = self
            .procs
            .iter()
            .find(|p| *p.phase() != ProtocolPhase::Running)
        {
            return RunStatus::Stalled {
                reason: format!("{} left in {:?}", p.pid(), p.phase().tag()),
            };
        }
        RunStatus::Quiescent
    }

    fn now(&self) -> u64 {
        self.queue.now()
    }

    fn record(&mut self, event: TraceEvent) {
        self.trace.push(TraceRecord {
            time: self.queue.now(),
            event,
        });
    }

    fn is_alive(&self, node: NodeId) -> bool {
        self.alive.get(&node).copied().unwrap_or(false)
    }

    fn step(&mut self, _t: u64, ev: SimEvent) -> Result<(), SimError> {
        match ev {
            SimEvent::Deliver {
                id,
                from,
                to,
                packet,
            } => self.on_deliver(id, from, to, packet),
            SimEvent::Timeout { id, attempt } => self.on_timeout(id, attempt),
            SimEvent::Crash(node) => {
                if !self.is_alive(node) || self.pending_crashes.contains(&node) {
                    return Err(SimError::AlreadyDead(node));
                }
                self.pending_crashes.push(node);
                if !self.can_crash(node) {
                    self.record(TraceEvent::CrashDeferred { node: node.0 });
                }
                Ok(())
            }
            SimEvent::NotifyFailure(node) => self.on_notify(node),
            SimEvent::AppSend { pid, dest, payload } => {
                self.record(TraceEvent::AppSend {
                    pid: pid.0,
                    dest: dest.0,
                });
                if !self.is_alive(self.host[pid.index()]) {
                    self.held_app.push((pid, dest, payload));
                    return Ok(());
                }
                let fx = self.procs[pid.index()].send_computation(dest, payload)?;
                self.apply(pid, fx)
            }
            SimEvent::InitiateRound => {
                self.pending_rounds += 1;
                Ok(())
            }
        }
    }

    fn after_step(&mut self) -> Result<(), SimError> {
        if let Some(k) = self.round_open {
            if self.procs.iter().all(|p| p.check_index() > k) {
                self.round_open = None;
                self.record(TraceEvent::RoundComplete { index: k.0 });
            }
        }
        self.try_initiate()?;
        let pending = std::mem::take(&mut self.pending_crashes);
        for (i, &node) in pending.iter().enumerate() {
            if self.episode.is_none() && self.can_crash(node) {
                self.pending_crashes.extend_from_slice(&pending[i + 1..]);
                return self.do_crash(node);
            }
            self.pending_crashes.push(node);
        }
        Ok(())
    }

    fn try_initiate(&mut self) -> Result<(), SimError> {
        if self.pending_rounds == 0 || self.episode.is_some() || self.round_open.is_some() {
            return Ok(());
        }
        let k = self.procs[0].check_index();
        let ready = self
            .procs
            .iter()
            .all(|p| p.check_index() == k && *p.phase() == ProtocolPhase::Running);
        if !ready || !self.replica_jobs.is_empty() {
            return Ok(());
        }
        let initiator = self.procs[0].policy().initiator(k, self.n);
        self.pending_rounds -= 1;
        self.round_open = Some(k);
        self.record(TraceEvent::RoundInitiated {
            pid: initiator.0,
            index: k.0,
        });
        let fx = self.procs[initiator.index()].initiate_checkpoint()?;
        self.apply(initiator, fx)
    }

    /// A crash is applied only between rounds, or while the open round has
    /// not yet reached the node, so that no survivor commits an interval
    /// the failed process cannot finish.
    fn can_crash(&self, node: NodeId) -> bool {
        if self.episode.is_some() || !self.replica_jobs.is_empty() {
            return false;
        }
        if self.procs.iter().any(|p| p.check_index().is_initial()) {
            return false;
        }
        let on_node = self.hosted.get(&node).cloned().unwrap_or_default();
        on_node.iter().all(|p| {
            let s = &self.procs[p.index()];
            let untouched = *s.phase() == ProtocolPhase::Running;
            match self.round_open {
                Some(k) => untouched && s.check_index() == k,
                None => untouched,
            }
        })
    }

    fn do_crash(&mut self, node: NodeId) -> Result<(), SimError> {
        self.alive.insert(node, false);
        self.record(TraceEvent::Crash { node: node.0 });
        let faulty = self.hosted.get(&node).cloned().unwrap_or_default();
        for p in &faulty {
            self.procs[p.index()].crash_reset();
        }
        self.episode = Some(Episode {
            node,
            faulty,
            notified: false,
            epoch: 0,
            notify_at: 0,
            decisions: BTreeMap::new(),
            promotions: Vec::new(),
            takeover: None,
            replay: BTreeMap::new(),
        });
        let at = self.now() + self.detection_latency;
        self.queue.schedule(at, SimEvent::NotifyFailure(node))?;
        Ok(())
    }

    fn send_new(
        &mut self,
        from: NodeId,
        to: Target,
        packet: Packet,
        job: Option<(ProcessId, CheckpointIndex)>,
    ) -> Result<(), SimError> {
        let id = self.next_packet;
        self.next_packet += 1;
        self.outstanding.insert(
            id,
            Outstanding {
                from,
                to,
                packet,
                attempt: 0,
                replica_job: job,
            },
        );
        self.transmit_packet(id)
    }

    fn recipient_id(&self, to: &Target) -> u32 {
        match to {
            Target::Process(p) => p.0,
            Target::Node(n) => n.0,
        }
    }

    fn transmit_packet(&mut self, id: u64) -> Result<(), SimError> {
        let out = &self.outstanding[&id];
        let (from, to, packet, attempt) =
            (out.from, out.to.clone(), out.packet.clone(), out.attempt);
        let now = self.now();
        let tr = transmit(&self.cfg, &mut self.rng, now);
        let to_id = self.recipient_id(&to);
        match &packet {
            Packet::Proto(m) => {
                let msg = MsgInfo::from(m);
                self.record(TraceEvent::Send {
                    node: from.0,
                    to: to_id,
                    msg,
                    attempt,
                });
                if tr.dropped {
                    self.record(TraceEvent::Drop {
                        to: to_id,
                        msg,
                        attempt,
                    });
                }
                if tr.duplicated {
                    self.record(TraceEvent::Duplicate {
                        to: to_id,
                        msg,
                        attempt,
                    });
                }
            }
            Packet::Replica(cp) => self.record(TraceEvent::Replicate {
                from: from.0,
                to: to_id,
                pid: cp.owner.0,
                index: cp.index.0,
                attempt,
            }),
            Packet::Ack(_) => {}
        }
        for at in tr.deliveries {
            self.queue.schedule(
                at,
                SimEvent::Deliver {
                    id,
                    from,
                    to: to.clone(),
                    packet: packet.clone(),
                },
            )?;
        }
        self.queue
            .schedule(tr.timeout, SimEvent::Timeout { id, attempt })?;
        Ok(())
    }

    fn send_ack(&mut self, from: NodeId, to: NodeId, id: u64) -> Result<(), SimError> {
        let now = self.now();
        let tr = transmit(&self.cfg, &mut self.rng, now);
        for at in tr.deliveries {
            self.queue.schedule(
                at,
                SimEvent::Deliver {
                    id,
                    from,
                    to: Target::Node(to),
                    packet: Packet::Ack(id),
                },
            )?;
        }
        Ok(())
    }

    fn on_deliver(
        &mut self,
        id: u64,
        from: NodeId,
        to: Target,
        packet: Packet,
    ) -> Result<(), SimError> {
        let node = match &to {
            Target::Process(p) => self.host[p.index()],
            Target::Node(n) => *n,
        };
        if !self.is_alive(node) {
            if let (Packet::Proto(m), Target::Process(p)) = (&packet, &to) {
                self.record(TraceEvent::Lost {
                    node: node.0,
                    pid: p.0,
                    msg: MsgInfo::from(m),
                });
            }
            return Ok(());
        }
        match packet {
            Packet::Ack(orig) => {
                if let Some(out) = self.outstanding.remove(&orig) {
                    if let Some(job) = out.replica_job {
                        self.replica_acked(job);
                    }
                }
                Ok(())
            }
            Packet::Replica(cp) => {
                self.send_ack(node, from, id)?;
                let (pid, index) = (cp.owner.0, cp.index.0);
                self.tmr.store.store(node, cp);
                self.record(TraceEvent::ReplicaStored {
                    node: node.0,
                    pid,
                    index,
                });
                Ok(())
            }
            Packet::Proto(m) => {
                self.send_ack(node, from, id)?;
                let Target::Process(p) = to else {
                    return Ok(());
                };
                self.record(TraceEvent::Deliver {
                    node: node.0,
                    pid: p.0,
                    msg: MsgInfo::from(&m),
                });
                let fx = self.procs[p.index()].on_message(m)?;
                self.apply(p, fx)
            }
        }
    }

    fn replica_acked(&mut self, job: (ProcessId, CheckpointIndex)) {
        if let Some(left) = self.replica_jobs.get_mut(&job) {
            *left -= 1;
            if *left == 0 {
                self.replica_jobs.remove(&job);
                self.record(TraceEvent::ReplicaComplete {
                    pid: job.0 .0,
                    index: job.1 .0,
                });
            }
        }
    }

    fn on_timeout(&mut self, id: u64, attempt: u32) -> Result<(), SimError> {
        let Some(out) = self.outstanding.get_mut(&id) else {
            return Ok(());
        };
        if out.attempt != attempt {
            return Ok(());
        }
        let from = out.from;
        if !self.alive.get(&from).copied().unwrap_or(false) {
            self.outstanding.remove(&id);
            return Ok(());
        }
        if attempt >= self.cfg.retry_limit {
            let out = self.outstanding.remove(&id).expect("present");
            let peer = self.recipient_id(&out.to);
            match &out.packet {
                Packet::Proto(m) => self.record(TraceEvent::Suspect {
                    node: from.0,
                    peer,
                    msg: MsgInfo::from(m),
                }),
                Packet::Replica(cp) => {
                    // give up on this target so the job does not block forever
                    self.replica_acked((cp.owner, cp.index));
                }
                Packet::Ack(_) => {}
            }
            return Ok(());
        }
        out.attempt += 1;
        self.transmit_packet(id)
    }

    fn apply(&mut self, pid: ProcessId, fx: Effects) -> Result<(), SimError> {
        let node = self.host[pid.index()];
        for note in fx.notes {
            match note {
                Note::Stamped(m) => self.record(TraceEvent::Stamp {
                    pid: pid.0,
                    msg: MsgInfo::from(&m),
                }),
                Note::Queued(req) => self.record(TraceEvent::Queued {
                    pid: pid.0,
                    dest: req.dest.0,
                }),
                Note::Disposition { msg, disposition } => self.record(TraceEvent::Disposition {
                    node: node.0,
                    pid: pid.0,
                    msg: MsgInfo::from(&msg),
                    disposition,
                }),
                Note::Phase { from, to } => self.record(TraceEvent::Phase {
                    pid: pid.0,
                    from,
                    to,
                }),
                Note::Ignored { msg, reason } => self.record(TraceEvent::Ignored {
                    pid: pid.0,
                    msg: MsgInfo::from(&msg),
                    reason: reason.to_string(),
                }),
                Note::RoundAborted { index } => self.record(TraceEvent::RoundAborted {
                    pid: pid.0,
                    index: index.0,
                }),
                Note::Committed(rec) => {
                    self.record(TraceEvent::Commit {
                        node: node.0,
                        pid: pid.0,
                        index: rec.index.0,
                        sent_to: rec.frozen_status.sent_to.clone(),
                        recd_from: rec.frozen_status.recd_from.clone(),
                    });
                    self.replicate(pid, rec)?;
                }
            }
        }
        for m in fx.outgoing {
            for r in m.recipients(self.n) {
                self.send_new(node, Target::Process(r), Packet::Proto(m.clone()), None)?;
            }
        }
        if let Some(d) = fx.decision {
            self.record_decision(pid, d)?;
        }
        Ok(())
    }

    /// Stores the checkpoint on its node where that node keeps a copy and
    /// ships it to the node's replication targets.
    fn replicate(&mut self, pid: ProcessId, rec: CheckpointRecord) -> Result<(), SimError> {
        let node = self.host[pid.index()];
        if self.tmr.keeps_own_copy(node) {
            self.tmr.store.store(node, rec.clone());
        }
        let targets: Vec<NodeId> = self
            .tmr
            .targets(node)
            .into_iter()
            .filter(|t| self.is_alive(*t))
            .collect();
        if targets.is_empty() {
            return Ok(());
        }
        let job = (pid, rec.index);
        *self.replica_jobs.entry(job).or_default() += targets.len();
        for t in targets {
            self.send_new(
                node,
                Target::Node(t),
                Packet::Replica(rec.clone()),
                Some(job),
            )?;
        }
        Ok(())
    }

    fn on_notify(&mut self, node: NodeId) -> Result<(), SimError> {
        self.epoch += 1;
        let epoch = self.epoch;
        let faulty = self.episode.as_ref().expect("episode open").faulty.clone();
        self.record(TraceEvent::NotifyFailure {
            node: node.0,
            faulty: faulty.iter().map(|p| p.0).collect(),
            epoch,
        });
        let notify_at = self.trace.len() - 1;
        {
            let ep = self.episode.as_mut().expect("episode open");
            ep.notified = true;
            ep.epoch = epoch;
            ep.notify_at = notify_at;
        }
        if self.round_open.take().is_some() {
            self.pending_rounds += 1;
        }

        let mut restored: Vec<(ProcessId, CheckpointRecord)> = Vec::new();
        let mut regrouped: Vec<NodeId> = Vec::new();
        if self.tmr.is_grouped(node) {
            let (outcomes, dead) = self.tmr.fail_node(node);
            for o in &outcomes {
                let g = self.tmr.groups.iter().find(|g| g.group_id == o.group_id);
                for &m in g.map(|g| g.alive()).unwrap_or_default() {
                    if !regrouped.contains(&m) {
                        regrouped.push(m);
                    }
                }
            }
            let mut promotions = Vec::new();
            for o in &outcomes {
                for pr in &o.promotions {
                    self.record(TraceEvent::Promotion {
                        group: pr.group_id,
                        node: pr.node.0,
                        from: pr.from,
                        to: pr.to,
                        mode: o.mode,
                    });
                    promotions.push(*pr);
                }
            }
            for g in &dead {
                self.record(TraceEvent::GroupDead { group: *g });
            }
            self.episode.as_mut().expect("episode").promotions = promotions;
            if !faulty.is_empty() {
                let alive: BTreeSet<NodeId> = self
                    .alive
                    .iter()
                    .filter_map(|(&n, &a)| a.then_some(n))
                    .collect();
                let t = self
                    .tmr
                    .takeover(node, &outcomes, &faulty, &alive)
                    .map_err(|e| SimError::Unrecoverable(e.to_string()))?;
                for &(p, src, index) in &t.sources {
                    let cp = self.tmr.store.get(src, p).expect("located").clone();
                    self.record(TraceEvent::Takeover {
                        failed: node.0,
                        host: t.host.0,
                        pid: p.0,
                        source: src.0,
                        index: index.0,
                    });
                    self.host[p.index()] = t.host;
                    self.hosted.entry(node).or_default().retain(|q| *q != p);
                    self.hosted.entry(t.host).or_default().push(p);
                    self.record(TraceEvent::RouteUpdate {
                        pid: p.0,
                        node: t.host.0,
                    });
                    restored.push((p, cp));
                }
                self.episode.as_mut().expect("episode").takeover = Some(t);
            }
        } else {
            // stand-alone node: restarts and reads its own stable storage
            self.alive.insert(node, true);
            self.record(TraceEvent::Restart { node: node.0 });
            for &p in &faulty {
                let cp = self
                    .tmr
                    .store
                    .get(node, p)
                    .cloned()
                    .ok_or_else(|| SimError::Unrecoverable(format!("no checkpoint of {p}")))?;
                restored.push((p, cp));
            }
        }

        for (p, cp) in restored {
            let replay = recovery::rollback(&mut self.procs[p.index()], &cp)?;
            self.record(TraceEvent::Rollback {
                pid: p.0,
                index: cp.index.0,
            });
            self.episode
                .as_mut()
                .expect("episode")
                .replay
                .insert(p, replay);
            if self.tmr.is_grouped(self.host[p.index()]) {
                // the new host re-establishes the replicas of the moved process
                self.replicate(p, cp)?;
            }
        }
        // survivors whose roles changed copy their latest checkpoints to
        // the new targets, so a second failure loses nothing
        for m in regrouped {
            let hosted = self.hosted.get(&m).cloned().unwrap_or_default();
            for p in hosted {
                if faulty.contains(&p) {
                    continue;
                }
                if let Some(cp) = self.procs[p.index()].last_checkpoint().cloned() {
                    self.replicate(p, cp)?;
                }
            }
        }
        for p in faulty.clone() {
            let fx = self.procs[p.index()].begin_restart(&faulty, epoch)?;
            self.apply(p, fx)?;
        }
        for i in 0..self.n as u32 {
            let p = ProcessId(i);
            if faulty.contains(&p) {
                continue;
            }
            let fx = self.procs[p.index()].enter_recovery(&faulty, epoch)?;
            self.apply(p, fx)?;
        }
        self.maybe_finish_episode()
    }

    fn record_decision(&mut self, pid: ProcessId, d: RecoveryDecision) -> Result<(), SimError> {
        self.record(TraceEvent::Verdict {
            pid: pid.0,
            must_rollback: d.verdict.must_rollback,
            reason: d.verdict.reason.clone(),
            depends: d.verdict.depends.visited.iter().map(|p| p.0).collect(),
        });
        if let Some(ep) = self.episode.as_mut() {
            ep.decisions.insert(pid, d);
        }
        self.maybe_finish_episode()
    }

    fn maybe_finish_episode(&mut self) -> Result<(), SimError> {
        let Some(ep) = self.episode.as_ref() else {
            return Ok(());
        };
        if !ep.notified {
            return Ok(());
        }
        if !ep.faulty.is_empty() && ep.decisions.len() < self.n {
            return Ok(());
        }
        let mut ep = self.episode.take().expect("episode");
        let set = match ep.decisions.values().next() {
            Some(d) => d.rollback_set.clone(),
            None => ep.faulty.iter().copied().collect(),
        };
        if ep.decisions.values().any(|d| d.rollback_set != set) {
            return Err(SimError::SplitVerdict);
        }
        let interval = self.procs[0].check_index();

        for &p in &set {
            if ep.faulty.contains(&p) {
                continue;
            }
            let cp = self.procs[p.index()]
                .last_checkpoint()
                .cloned()
                .ok_or_else(|| SimError::Unrecoverable(format!("{p} has no checkpoint")))?;
            let replay = recovery::rollback(&mut self.procs[p.index()], &cp)?;
            self.record(TraceEvent::Rollback {
                pid: p.0,
                index: cp.index.0,
            });
            ep.replay.insert(p, replay);
        }

        let purged = self.purge_stale();
        self.record(TraceEvent::Purge { count: purged });

        for i in 0..self.n {
            if let Some(d) = ep.decisions.get(&ProcessId(i as u32)) {
                let fx = self.procs[i].finish_recovery(d)?;
                self.apply(ProcessId(i as u32), fx)?;
            }
        }
        for (p, reqs) in std::mem::take(&mut ep.replay) {
            self.record(TraceEvent::Replay {
                pid: p.0,
                count: reqs.len(),
            });
            for r in reqs {
                let fx = self.procs[p.index()].send_computation(r.dest, r.payload)?;
                self.apply(p, fx)?;
            }
        }
        for (p, dest, payload) in std::mem::take(&mut self.held_app) {
            let fx = self.procs[p.index()].send_computation(dest, payload)?;
            self.apply(p, fx)?;
        }

        self.record(TraceEvent::RecoveryDone {
            epoch: ep.epoch,
            rollback_set: set.iter().map(|p| p.0).collect(),
        });
        self.reports.push(RecoveryReport {
            epoch: ep.epoch,
            failed_node: ep.node,
            faulty: ep.faulty.clone(),
            interval,
            verdicts: ep.decisions.values().map(|d| d.verdict.clone()).collect(),
            rollback_set: set,
            purged,
            promotions: ep.promotions.clone(),
            takeover: ep.takeover.as_ref().map(TakeoverSummary::from),
            notify_at: ep.notify_at,
        });
        Ok(())
    }

    /// Drops in-flight computation messages sent by executions that have
    /// just been rolled back.
    fn purge_stale(&mut self) -> usize {
        let incarnations: Vec<u32> = self.procs.iter().map(|p| p.incarnation()).collect();
        let stale = |packet: &Packet| match packet {
            Packet::Proto(m) => {
                m.kind.is_computation() && m.incarnation < incarnations[m.sender.index()]
            }
            _ => false,
        };
        let mut keys = BTreeSet::new();
        self.outstanding.retain(|_, o| {
            if stale(&o.packet) {
                if let Packet::Proto(m) = &o.packet {
                    keys.insert(MsgInfo::from(m).key());
                }
                false
            } else {
                true
            }
        });
        self.queue.retain(|e| match e {
            SimEvent::Deliver {
                packet: packet @ Packet::Proto(m),
                ..
            } if stale(packet) => {
                keys.insert(MsgInfo::from(m).key());
                false
            }
            _ => true,
        });
        keys.len()
    }
}

/// Convenience wrapper: build and run.
pub fn run(sc: &Scenario) -> Result<SimOutcome, SimError> {
    Ok(Simulation::new(sc)?.run())
}
