//! Per-process state machine of the coordinated checkpointing protocol.
//!
//! A round for interval `k` starts when the initiator broadcasts a
//! checkpoint request followed by its status vector. Every other process
//! answers with its own status broadcast. Once a process holds the vectors
//! of all `n - 1` peers it compares, for each peer `j`, how many messages
//! `j` says it sent here against how many were received here. Missing
//! messages are awaited; the checkpoint is taken once the counts agree.
//!
//! Computation messages are stamped with the sender's interval and a
//! per-destination sequence number. A receiver accepts exactly the next
//! expected message of its current interval and holds back anything from a
//! later interval until it has committed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CheckpointIndex, CheckpointRecord, Destination, Message, MessageKind, ModelError, Payload,
    ProcessId, StatusVector,
};
use crate::recovery::{self, RecoveryError, RecoveryVerdict, SrMatrix};

/// Which process starts the round for a given checkpoint index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitiatorPolicy {
    /// `P_k mod n` initiates round `k`.
    RoundRobin,
    /// Rotates over the processes hosted on TMR main nodes.
    TmrMains(Vec<ProcessId>),
}

impl InitiatorPolicy {
    pub fn initiator(&self, index: CheckpointIndex, n: usize) -> ProcessId {
        match self {
            InitiatorPolicy::TmrMains(mains) if !mains.is_empty() => {
                mains[(index.0 % mains.len() as u64) as usize]
            }
            _ => ProcessId((index.0 % n as u64) as u32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolPhase {
    Running,
    AwaitingStatus {
        collected: BTreeSet<ProcessId>,
    },
    Reconciling {
        deficit: Vec<(ProcessId, u64)>,
    },
    Committed,
    /// A failure was notified; waiting for the survivors' status vectors.
    Recovering,
}

impl ProtocolPhase {
    pub fn tag(&self) -> PhaseTag {
        match self {
            ProtocolPhase::Running => PhaseTag::Running,
            ProtocolPhase::AwaitingStatus { .. } => PhaseTag::AwaitingStatus,
            ProtocolPhase::Reconciling { .. } => PhaseTag::Reconciling,
            ProtocolPhase::Committed => PhaseTag::Committed,
            ProtocolPhase::Recovering => PhaseTag::Recovering,
        }
    }

    pub fn in_round(&self) -> bool {
        matches!(
            self,
            ProtocolPhase::AwaitingStatus { .. } | ProtocolPhase::Reconciling { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    Running,
    AwaitingStatus,
    Reconciling,
    Committed,
    Recovering,
}

/// Outcome of filtering an incoming computation message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Accept,
    /// Held until it becomes deliverable.
    Defer,
    RejectDuplicate,
    /// Sent by an execution that has since been rolled back.
    RejectStale,
}

/// Result of storing one status vector during a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatusAction {
    StillWaiting,
    BeginReconcile(Vec<(ProcessId, u64)>),
    CommitNow,
    /// Not applicable right now (stale, duplicate, or held back).
    Ignored,
}

/// A send requested by the application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppRequest {
    pub dest: ProcessId,
    pub payload: Vec<u8>,
}

/// Observable side effects of one step, for the driver to route and trace.
#[derive(Debug, Clone, Default)]
pub struct Effects {
    pub outgoing: Vec<Message>,
    pub notes: Vec<Note>,
    pub commits: Vec<CheckpointRecord>,
    pub decision: Option<RecoveryDecision>,
}

impl Effects {
    fn note(&mut self, n: Note) {
        self.notes.push(n);
    }

    pub fn extend(&mut self, other: Effects) {
        self.outgoing.extend(other.outgoing);
        self.notes.extend(other.notes);
        self.commits.extend(other.commits);
        if other.decision.is_some() {
            self.decision = other.decision;
        }
    }

    pub fn dispositions(&self) -> impl Iterator<Item = (&Message, Disposition)> {
        self.notes.iter().filter_map(|n| match n {
            Note::Disposition { msg, disposition } => Some((msg, *disposition)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Note {
    /// A computation send was stamped and handed to the network.
    Stamped(Message),
    /// A computation send was held until the current round or recovery ends.
    Queued(AppRequest),
    Disposition {
        msg: Message,
        disposition: Disposition,
    },
    Phase {
        from: PhaseTag,
        to: PhaseTag,
    },
    /// A protocol message with no effect (stale or duplicate).
    Ignored {
        msg: Message,
        reason: &'static str,
    },
    RoundAborted {
        index: CheckpointIndex,
    },
    Committed(CheckpointRecord),
}

/// What a process concluded after the post-failure status exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryDecision {
    pub faulty: Vec<ProcessId>,
    pub interval: CheckpointIndex,
    pub sr: SrMatrix,
    pub verdict: RecoveryVerdict,
    pub rollback_set: BTreeSet<ProcessId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("{pid} is not the initiator of round {index} ({expected} is)")]
    NotInitiator {
        pid: ProcessId,
        index: CheckpointIndex,
        expected: ProcessId,
    },
    #[error("{pid} cannot {op} while {phase:?}")]
    WrongPhase {
        pid: ProcessId,
        op: &'static str,
        phase: PhaseTag,
    },
    #[error("{pid} received {received} messages from {peer}, which reports sending only {sent}")]
    Integrity {
        pid: ProcessId,
        peer: ProcessId,
        sent: u64,
        received: u64,
    },
    #[error("status vectors incomplete: missing {0:?}")]
    IncompleteStatus(Vec<ProcessId>),
    #[error("commit attempted with outstanding deficit {0:?}")]
    NonEmptyDeficit(Vec<(ProcessId, u64)>),
    #[error("message from unknown or invalid peer {0}")]
    UnknownPeer(ProcessId),
    #[error("status vector of {owner} sent by {sender}")]
    ForeignVector { sender: ProcessId, owner: ProcessId },
    #[error("recovery vectors span intervals {mine} and {theirs}")]
    SplitRecovery {
        mine: CheckpointIndex,
        theirs: CheckpointIndex,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
}

#[derive(Debug, Clone)]
struct RecoveryRound {
    faulty: Vec<ProcessId>,
    expected: BTreeSet<ProcessId>,
    vectors: BTreeMap<ProcessId, StatusVector>,
    decided: bool,
}

/// Protocol state of one process.
#[derive(Debug, Clone)]
pub struct ProcessState {
    pid: ProcessId,
    n: usize,
    check_index: CheckpointIndex,
    status: StatusVector,
    phase: ProtocolPhase,
    peer_status: BTreeMap<ProcessId, StatusVector>,
    deferred: Vec<Message>,
    queued: VecDeque<AppRequest>,
    policy: InitiatorPolicy,
    app_state: Vec<u8>,
    last_checkpoint: Option<CheckpointRecord>,
    /// Application requests issued since the last commit, replayed after a rollback.
    requests: Vec<AppRequest>,
    epoch: u32,
    incarnation: u32,
    peer_incarnation: Vec<u32>,
    recovery: Option<RecoveryRound>,
}

/// For every peer, how many of the messages it reports sending here have
/// not arrived yet. Empty means the round is consistent for this process.
pub fn compute_deficit(
    peer_status: &BTreeMap<ProcessId, StatusVector>,
    own: &StatusVector,
) -> Result<Vec<(ProcessId, u64)>, ProtocolError> {
    let missing: Vec<ProcessId> = (0..own.n() as u32)
        .map(ProcessId)
        .filter(|&p| p != own.owner && !peer_status.contains_key(&p))
        .collect();
    if !missing.is_empty() {
        return Err(ProtocolError::IncompleteStatus(missing));
    }
    let mut deficit = Vec::new();
    for (&peer, v) in peer_status {
        let sent = v.sent_to(own.owner);
        let received = own.recd_from(peer);
        if received > sent {
            return Err(ProtocolError::Integrity {
                pid: own.owner,
                peer,
                sent,
                received,
            });
        }
        if sent > received {
            deficit.push((peer, sent - received));
        }
    }
    Ok(deficit)
}

impl ProcessState {
    pub fn new(pid: ProcessId, n: usize, policy: InitiatorPolicy) -> Result<Self, ProtocolError> {
        Ok(ProcessState {
            pid,
            n,
            check_index: CheckpointIndex::INITIAL,
            status: StatusVector::new(pid, n)?,
            phase: ProtocolPhase::Running,
            peer_status: BTreeMap::new(),
            deferred: Vec::new(),
            queued: VecDeque::new(),
            policy,
            app_state: Vec::new(),
            last_checkpoint: None,
            requests: Vec::new(),
            epoch: 0,
            incarnation: 0,
            peer_incarnation: vec![0; n],
            recovery: None,
        })
    }

    pub fn pid(&self) -> ProcessId {
        self.pid
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn check_index(&self) -> CheckpointIndex {
        self.check_index
    }

    pub fn phase(&self) -> &ProtocolPhase {
        &self.phase
    }

    pub fn status(&self) -> &StatusVector {
        &self.status
    }

    pub fn peer_status(&self) -> &BTreeMap<ProcessId, StatusVector> {
        &self.peer_status
    }

    pub fn app_state(&self) -> &[u8] {
        &self.app_state
    }

    pub fn last_checkpoint(&self) -> Option<&CheckpointRecord> {
        self.last_checkpoint.as_ref()
    }

    pub fn deferred(&self) -> &[Message] {
        &self.deferred
    }

    pub fn queued_len(&self) -> usize {
        self.queued.len()
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn incarnation(&self) -> u32 {
        self.incarnation
    }

    pub fn policy(&self) -> &InitiatorPolicy {
        &self.policy
    }

    pub fn is_initiator(&self) -> bool {
        self.policy.initiator(self.check_index, self.n) == self.pid
    }

    fn set_phase(&mut self, to: ProtocolPhase, fx: &mut Effects) {
        let from = self.phase.tag();
        if from != to.tag() {
            fx.note(Note::Phase { from, to: to.tag() });
        }
        self.phase = to;
    }

    fn protocol_message(&self, kind: MessageKind, payload: Payload) -> Message {
        Message {
            kind,
            sender: self.pid,
            dest: Destination::Broadcast,
            check_index: self.check_index,
            seq_no: 0,
            epoch: self.epoch,
            incarnation: self.incarnation,
            payload,
        }
    }

    fn broadcast_status(&self, fx: &mut Effects) {
        fx.outgoing.push(self.protocol_message(
            MessageKind::StatusInfo,
            Payload::Status(self.status.clone()),
        ));
    }

    /// Starts the round for the current interval. The initial round sends
    /// only the request and commits at once.
    pub fn initiate_checkpoint(&mut self) -> Result<Effects, ProtocolError> {
        let expected = self.policy.initiator(self.check_index, self.n);
        if expected != self.pid {
            return Err(ProtocolError::NotInitiator {
                pid: self.pid,
                index: self.check_index,
                expected,
            });
        }
        if self.phase != ProtocolPhase::Running {
            return Err(self.wrong_phase("initiate a checkpoint"));
        }
        let mut fx = Effects::default();
        fx.outgoing
            .push(self.protocol_message(MessageKind::CkptRequest, Payload::Empty));
        if self.check_index.is_initial() {
            self.commit_checkpoint(&mut fx)?;
        } else {
            self.broadcast_status(&mut fx);
            self.set_phase(
                ProtocolPhase::AwaitingStatus {
                    collected: BTreeSet::new(),
                },
                &mut fx,
            );
            self.maybe_complete_collection(&mut fx)?;
        }
        self.drain_deferred(&mut fx)?;
        Ok(fx)
    }

    fn wrong_phase(&self, op: &'static str) -> ProtocolError {
        ProtocolError::WrongPhase {
            pid: self.pid,
            op,
            phase: self.phase.tag(),
        }
    }

    /// Classifies a computation message against the current interval and
    /// the next expected sequence number from its sender.
    pub fn filter_incoming(&self, m: &Message) -> Disposition {
        if self.phase == ProtocolPhase::Recovering {
            return Disposition::Defer;
        }
        let known = self
            .peer_incarnation
            .get(m.sender.index())
            .copied()
            .unwrap_or(0);
        if m.incarnation < known {
            return Disposition::RejectStale;
        }
        if m.incarnation > known || m.check_index > self.check_index {
            return Disposition::Defer;
        }
        if m.check_index < self.check_index {
            return Disposition::RejectDuplicate;
        }
        let expected = self.status.recd_from(m.sender) + 1;
        match m.seq_no.cmp(&expected) {
            std::cmp::Ordering::Equal => Disposition::Accept,
            std::cmp::Ordering::Less => Disposition::RejectDuplicate,
            std::cmp::Ordering::Greater => Disposition::Defer,
        }
    }

    /// Processes one delivered message, then retries held-back messages.
    pub fn on_message(&mut self, m: Message) -> Result<Effects, ProtocolError> {
        let mut fx = Effects::default();
        self.dispatch(m, &mut fx, false)?;
        self.drain_deferred(&mut fx)?;
        Ok(fx)
    }

    /// Returns `false` if the message was held back.
    fn dispatch(
        &mut self,
        m: Message,
        fx: &mut Effects,
        replay: bool,
    ) -> Result<bool, ProtocolError> {
        if m.sender == self.pid || m.sender.index() >= self.n {
            return Err(ProtocolError::UnknownPeer(m.sender));
        }
        let held = match m.kind {
            MessageKind::Computation(_) => self.handle_computation(m, fx, replay)?,
            MessageKind::CkptRequest => self.handle_ckpt_request_inner(m, fx, replay)?,
            MessageKind::StatusInfo if m.is_recovery_status() => {
                self.handle_recovery_status(m, fx, replay)?
            }
            MessageKind::StatusInfo => {
                let (held, _) = self.handle_status_inner(m, fx, replay)?;
                held
            }
        };
        Ok(!held)
    }

    fn defer(&mut self, m: Message, fx: &mut Effects, replay: bool) -> bool {
        if !replay && m.kind.is_computation() {
            fx.note(Note::Disposition {
                msg: m.clone(),
                disposition: Disposition::Defer,
            });
        }
        self.deferred.push(m);
        true
    }

    fn handle_computation(
        &mut self,
        m: Message,
        fx: &mut Effects,
        replay: bool,
    ) -> Result<bool, ProtocolError> {
        let disposition = self.filter_incoming(&m);
        match disposition {
            Disposition::Defer => return Ok(self.defer(m, fx, replay)),
            Disposition::Accept => {
                self.status.record_receive(m.sender)?;
                if let Payload::Bytes(b) = &m.payload {
                    self.app_state.extend_from_slice(b);
                }
                fx.note(Note::Disposition {
                    msg: m,
                    disposition,
                });
                if matches!(self.phase, ProtocolPhase::Reconciling { .. }) {
                    self.reconcile(fx)?;
                }
            }
            Disposition::RejectDuplicate | Disposition::RejectStale => {
                fx.note(Note::Disposition {
                    msg: m,
                    disposition,
                });
            }
        }
        Ok(false)
    }

    fn is_stale_epoch(&self, m: &Message, fx: &mut Effects) -> bool {
        if m.epoch < self.epoch {
            fx.note(Note::Ignored {
                msg: m.clone(),
                reason: "superseded by a recovery",
            });
            true
        } else {
            false
        }
    }

    /// Joins the round announced by `m`. A request for the initial
    /// checkpoint is answered by committing at once.
    pub fn handle_ckpt_request(&mut self, m: Message) -> Result<Effects, ProtocolError> {
        if m.kind != MessageKind::CkptRequest {
            return Err(self.wrong_phase("treat a non-request as a request"));
        }
        self.on_message(m)
    }

    fn handle_ckpt_request_inner(
        &mut self,
        m: Message,
        fx: &mut Effects,
        replay: bool,
    ) -> Result<bool, ProtocolError> {
        if self.is_stale_epoch(&m, fx) {
            return Ok(false);
        }
        if m.epoch > self.epoch
            || self.phase == ProtocolPhase::Recovering
            || m.check_index > self.check_index
        {
            return Ok(self.defer(m, fx, replay));
        }
        if m.check_index < self.check_index || self.phase != ProtocolPhase::Running {
            fx.note(Note::Ignored {
                msg: m,
                reason: "duplicate checkpoint request",
            });
            return Ok(false);
        }
        if self.check_index.is_initial() {
            self.commit_checkpoint(fx)?;
        } else {
            self.broadcast_status(fx);
            self.set_phase(
                ProtocolPhase::AwaitingStatus {
                    collected: BTreeSet::new(),
                },
                fx,
            );
            self.maybe_complete_collection(fx)?;
        }
        Ok(false)
    }

    /// Stores a peer's status vector for the current round and, once all
    /// peers have reported, either commits or starts waiting for the
    /// messages still in transit.
    pub fn handle_status_info(
        &mut self,
        m: Message,
    ) -> Result<(Effects, StatusAction), ProtocolError> {
        let mut fx = Effects::default();
        if m.sender == self.pid || m.sender.index() >= self.n {
            return Err(ProtocolError::UnknownPeer(m.sender));
        }
        let (_, action) = self.handle_status_inner(m, &mut fx, false)?;
        self.drain_deferred(&mut fx)?;
        Ok((fx, action))
    }

    fn handle_status_inner(
        &mut self,
        m: Message,
        fx: &mut Effects,
        replay: bool,
    ) -> Result<(bool, StatusAction), ProtocolError> {
        if self.is_stale_epoch(&m, fx) {
            return Ok((false, StatusAction::Ignored));
        }
        if m.check_index < self.check_index {
            fx.note(Note::Ignored {
                msg: m,
                reason: "status of a committed round",
            });
            return Ok((false, StatusAction::Ignored));
        }
        if m.epoch > self.epoch
            || m.check_index > self.check_index
            || matches!(
                self.phase,
                ProtocolPhase::Running | ProtocolPhase::Recovering
            )
        {
            return Ok((self.defer(m, fx, replay), StatusAction::Ignored));
        }
        let vector = match &m.payload {
            Payload::Status(v) => v.clone(),
            _ => return Err(ProtocolError::UnknownPeer(m.sender)),
        };
        if vector.owner != m.sender || vector.n() != self.n {
            return Err(ProtocolError::ForeignVector {
                sender: m.sender,
                owner: vector.owner,
            });
        }
        let duplicate = self.peer_status.insert(m.sender, vector).is_some();
        match &mut self.phase {
            ProtocolPhase::AwaitingStatus { collected } => {
                collected.insert(m.sender);
            }
            _ => {
                fx.note(Note::Ignored {
                    msg: m,
                    reason: "duplicate status",
                });
                return Ok((false, StatusAction::Ignored));
            }
        }
        if duplicate {
            fx.note(Note::Ignored {
                msg: m,
                reason: "duplicate status",
            });
        }
        Ok((false, self.maybe_complete_collection(fx)?))
    }

    fn maybe_complete_collection(
        &mut self,
        fx: &mut Effects,
    ) -> Result<StatusAction, ProtocolError> {
        let complete = match &self.phase {
            ProtocolPhase::AwaitingStatus { collected } => collected.len() + 1 >= self.n,
            _ => false,
        };
        if !complete {
            return Ok(StatusAction::StillWaiting);
        }
        let deficit = compute_deficit(&self.peer_status, &self.status)?;
        if deficit.is_empty() {
            self.commit_checkpoint(fx)?;
            Ok(StatusAction::CommitNow)
        } else {
            self.set_phase(
                ProtocolPhase::Reconciling {
                    deficit: deficit.clone(),
                },
                fx,
            );
            Ok(StatusAction::BeginReconcile(deficit))
        }
    }

    fn reconcile(&mut self, fx: &mut Effects) -> Result<(), ProtocolError> {
        let deficit = compute_deficit(&self.peer_status, &self.status)?;
        if deficit.is_empty() {
            self.commit_checkpoint(fx)?;
        } else {
            self.phase = ProtocolPhase::Reconciling { deficit };
        }
        Ok(())
    }

    /// Takes the checkpoint closing the current interval and opens the next.
    pub fn commit_checkpoint(
        &mut self,
        fx: &mut Effects,
    ) -> Result<CheckpointRecord, ProtocolError> {
        match &self.phase {
            ProtocolPhase::Running if self.check_index.is_initial() => {}
            ProtocolPhase::AwaitingStatus { .. } | ProtocolPhase::Reconciling { .. } => {
                let deficit = compute_deficit(&self.peer_status, &self.status)?;
                if !deficit.is_empty() {
                    return Err(ProtocolError::NonEmptyDeficit(deficit));
                }
            }
            _ => return Err(self.wrong_phase("commit")),
        }
        let record = CheckpointRecord {
            owner: self.pid,
            index: self.check_index,
            state_snapshot: self.app_state.clone(),
            frozen_status: self.status.clone(),
        };
        self.set_phase(ProtocolPhase::Committed, fx);
        fx.note(Note::Committed(record.clone()));
        self.last_checkpoint = Some(record.clone());
        self.check_index = self.check_index.next();
        self.status.reset();
        self.peer_status.clear();
        self.set_phase(ProtocolPhase::Running, fx);
        fx.commits.push(record.clone());
        self.requests = self.queued.iter().cloned().collect();
        self.flush_queued(fx)?;
        Ok(record)
    }

    fn flush_queued(&mut self, fx: &mut Effects) -> Result<(), ProtocolError> {
        while let Some(req) = self.queued.pop_front() {
            self.stamp(req, fx)?;
        }
        Ok(())
    }

    fn stamp(&mut self, req: AppRequest, fx: &mut Effects) -> Result<(), ProtocolError> {
        let seq_no = self.status.record_send(req.dest)?;
        let m = Message {
            kind: MessageKind::DEFAULT_COMPUTATION,
            sender: self.pid,
            dest: Destination::Process(req.dest),
            check_index: self.check_index,
            seq_no,
            epoch: self.epoch,
            incarnation: self.incarnation,
            payload: Payload::Bytes(req.payload),
        };
        fx.note(Note::Stamped(m.clone()));
        fx.outgoing.push(m);
        Ok(())
    }

    /// Sends application data to `dest`. Outside normal running (before the
    /// initial checkpoint, during a round or a recovery) the request is
    /// queued and stamped with the interval that follows.
    pub fn send_computation(
        &mut self,
        dest: ProcessId,
        payload: Vec<u8>,
    ) -> Result<Effects, ProtocolError> {
        if dest == self.pid {
            return Err(ModelError::SelfMessage(dest).into());
        }
        dest.check(self.n)?;
        let req = AppRequest { dest, payload };
        self.requests.push(req.clone());
        let mut fx = Effects::default();
        if self.phase == ProtocolPhase::Running && !self.check_index.is_initial() {
            self.stamp(req, &mut fx)?;
        } else {
            fx.note(Note::Queued(req.clone()));
            self.queued.push_back(req);
        }
        Ok(fx)
    }

    fn drain_deferred(&mut self, fx: &mut Effects) -> Result<(), ProtocolError> {
        loop {
            if self.deferred.is_empty() {
                return Ok(());
            }
            let pending = std::mem::take(&mut self.deferred);
            let mut progress = false;
            for m in pending {
                progress |= self.dispatch(m, fx, true)?;
            }
            if !progress {
                return Ok(());
            }
        }
    }

    /// Enters recovery after a failure notification: any round in progress
    /// is abandoned and the live status vector is broadcast.
    pub fn enter_recovery(
        &mut self,
        faulty: &[ProcessId],
        epoch: u32,
    ) -> Result<Effects, ProtocolError> {
        let mut fx = Effects::default();
        self.epoch = epoch;
        if self.phase.in_round() {
            fx.note(Note::RoundAborted {
                index: self.check_index,
            });
            self.peer_status.clear();
        }
        self.start_recovery_round(faulty, &mut fx);
        fx.outgoing.push(self.protocol_message(
            MessageKind::StatusInfo,
            Payload::RecoveryStatus(self.status.clone()),
        ));
        self.maybe_decide(&mut fx)?;
        Ok(fx)
    }

    /// Recovery entry for a restarted faulty process: it has nothing to
    /// report and only listens to the survivors.
    pub fn begin_restart(
        &mut self,
        faulty: &[ProcessId],
        epoch: u32,
    ) -> Result<Effects, ProtocolError> {
        let mut fx = Effects::default();
        self.epoch = epoch;
        self.start_recovery_round(faulty, &mut fx);
        self.maybe_decide(&mut fx)?;
        Ok(fx)
    }

    fn start_recovery_round(&mut self, faulty: &[ProcessId], fx: &mut Effects) {
        let expected = (0..self.n as u32)
            .map(ProcessId)
            .filter(|p| *p != self.pid && !faulty.contains(p))
            .collect();
        self.recovery = Some(RecoveryRound {
            faulty: faulty.to_vec(),
            expected,
            vectors: BTreeMap::new(),
            decided: false,
        });
        self.set_phase(ProtocolPhase::Recovering, fx);
    }

    fn handle_recovery_status(
        &mut self,
        m: Message,
        fx: &mut Effects,
        replay: bool,
    ) -> Result<bool, ProtocolError> {
        if self.is_stale_epoch(&m, fx) {
            return Ok(false);
        }
        if m.epoch > self.epoch {
            return Ok(self.defer(m, fx, replay));
        }
        let Some(round) = self.recovery.as_mut() else {
            fx.note(Note::Ignored {
                msg: m,
                reason: "recovery already finished",
            });
            return Ok(false);
        };
        if m.check_index != self.check_index {
            return Err(ProtocolError::SplitRecovery {
                mine: self.check_index,
                theirs: m.check_index,
            });
        }
        let vector = m
            .payload
            .status()
            .cloned()
            .expect("recovery status carries a vector");
        if vector.owner != m.sender || vector.n() != self.n {
            return Err(ProtocolError::ForeignVector {
                sender: m.sender,
                owner: vector.owner,
            });
        }
        if !round.expected.contains(&m.sender) || round.decided {
            fx.note(Note::Ignored {
                msg: m,
                reason: "duplicate recovery status",
            });
            return Ok(false);
        }
        round.vectors.insert(m.sender, vector);
        self.maybe_decide(fx)?;
        Ok(false)
    }

    fn maybe_decide(&mut self, fx: &mut Effects) -> Result<(), ProtocolError> {
        let Some(round) = self.recovery.as_mut() else {
            return Ok(());
        };
        if round.decided || round.vectors.len() < round.expected.len() {
            return Ok(());
        }
        round.decided = true;
        let faulty = round.faulty.clone();
        let mut survivors: Vec<StatusVector> = round.vectors.values().cloned().collect();
        if !faulty.contains(&self.pid) {
            survivors.push(self.status.clone());
        }
        let mut all = survivors.clone();
        for &f in &faulty {
            all.push(recovery::reconstruct_vector(f, &survivors, self.n)?);
        }
        all.sort_by_key(|v| v.owner);
        let sr = recovery::build_sr_matrix(&all)?;
        let verdict = if faulty.contains(&self.pid) {
            recovery::detect_recovery(&sr, self.pid, self.pid)?
        } else {
            recovery::detect_recovery_many(&sr, self.pid, &faulty)?
        };
        let rollback_set = recovery::rollback_set_many(&sr, &faulty)?;
        fx.decision = Some(RecoveryDecision {
            faulty,
            interval: self.check_index,
            sr,
            verdict,
            rollback_set,
        });
        Ok(())
    }

    /// Leaves recovery once the decision has been acted upon. Messages from
    /// rolled-back peers' undone executions are rejected from here on.
    pub fn finish_recovery(
        &mut self,
        decision: &RecoveryDecision,
    ) -> Result<Effects, ProtocolError> {
        if self.phase != ProtocolPhase::Recovering {
            return Err(self.wrong_phase("finish recovery"));
        }
        let mut fx = Effects::default();
        for &p in &decision.rollback_set {
            if p != self.pid {
                self.peer_incarnation[p.index()] += 1;
            }
        }
        self.recovery = None;
        self.set_phase(ProtocolPhase::Running, &mut fx);
        self.flush_queued(&mut fx)?;
        self.drain_deferred(&mut fx)?;
        Ok(fx)
    }

    /// Loses everything a crash loses. Counters and the application log are
    /// kept only so that the driver can replay the deterministic script.
    pub fn crash_reset(&mut self) {
        self.deferred.clear();
        self.peer_status.clear();
        self.recovery = None;
        self.phase = ProtocolPhase::Running;
    }

    pub(crate) fn restore_from(&mut self, cp: &CheckpointRecord) -> Vec<AppRequest> {
        self.app_state = cp.state_snapshot.clone();
        self.status.reset();
        self.peer_status.clear();
        self.queued.clear();
        self.incarnation += 1;
        self.last_checkpoint = Some(cp.clone());
        std::mem::take(&mut self.requests)
    }
}
