//! Domain types shared by every layer: process and node identifiers,
//! checkpoint indices, protocol messages and the per-interval status vector.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Index of a process in a system of `n` processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Fails unless `0 <= id < n`.
    pub fn check(self, n: usize) -> Result<Self, ModelError> {
        if self.index() < n {
            Ok(self)
        } else {
            Err(ModelError::OutOfRange { pid: self, n })
        }
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// A mobile host. Processes run on nodes; TMR groups are made of nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}", self.0)
    }
}

/// Checkpoint sequence number. `0` is the initial checkpoint; the live
/// interval of a process carries the index of the checkpoint that will close it.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct CheckpointIndex(pub u64);

impl CheckpointIndex {
    pub const INITIAL: CheckpointIndex = CheckpointIndex(0);

    pub fn next(self) -> Self {
        CheckpointIndex(self.0 + 1)
    }

    pub fn is_initial(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for CheckpointIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Message classes distinguished by their wire tag.
///
/// Tags 0 and 1 are reserved for the checkpoint request and the status
/// exchange; every other tag denotes a computation message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    CkptRequest,
    StatusInfo,
    Computation(u16),
}

impl MessageKind {
    pub const DEFAULT_COMPUTATION: MessageKind = MessageKind::Computation(2);

    pub fn computation(tag: u16) -> Result<Self, ModelError> {
        match tag {
            0 | 1 => Err(ModelError::ReservedTag(tag)),
            t => Ok(MessageKind::Computation(t)),
        }
    }

    pub fn from_wire_tag(tag: u16) -> Self {
        match tag {
            0 => MessageKind::CkptRequest,
            1 => MessageKind::StatusInfo,
            t => MessageKind::Computation(t),
        }
    }

    pub fn wire_tag(self) -> u16 {
        match self {
            MessageKind::CkptRequest => 0,
            MessageKind::StatusInfo => 1,
            MessageKind::Computation(t) => t,
        }
    }

    pub fn is_computation(self) -> bool {
        matches!(self, MessageKind::Computation(_))
    }
}

impl Serialize for MessageKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u16(self.wire_tag())
    }
}

impl<'de> Deserialize<'de> for MessageKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        u16::deserialize(d).map(MessageKind::from_wire_tag)
    }
}

/// Message destination. Broadcast is written as `-1` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Destination {
    Process(ProcessId),
    Broadcast,
}

impl Destination {
    pub fn wire(self) -> i64 {
        match self {
            Destination::Process(p) => i64::from(p.0),
            Destination::Broadcast => -1,
        }
    }

    pub fn from_wire(v: i64) -> Option<Self> {
        match v {
            -1 => Some(Destination::Broadcast),
            v if v >= 0 && v <= i64::from(u32::MAX) => {
                Some(Destination::Process(ProcessId(v as u32)))
            }
            _ => None,
        }
    }
}

impl Serialize for Destination {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(self.wire())
    }
}

impl<'de> Deserialize<'de> for Destination {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Destination::from_wire(v)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid destination {v}")))
    }
}

/// Message body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Empty,
    /// Opaque application bytes.
    Bytes(Vec<u8>),
    /// Status vector broadcast during a checkpoint round.
    Status(StatusVector),
    /// Status vector broadcast after a failure notification.
    RecoveryStatus(StatusVector),
}

impl Payload {
    pub fn status(&self) -> Option<&StatusVector> {
        match self {
            Payload::Status(v) | Payload::RecoveryStatus(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: ProcessId,
    pub dest: Destination,
    /// Interval the message belongs to.
    pub check_index: CheckpointIndex,
    /// Per (sender, dest, interval) sequence number, starting at 1.
    /// Zero for non-computation messages.
    pub seq_no: u64,
    /// Number of failure notifications the sender had processed.
    pub epoch: u32,
    /// Number of rollbacks the sender had performed.
    pub incarnation: u32,
    pub payload: Payload,
}

impl Message {
    /// Process ids a message is delivered to: the destination, or every
    /// process but the sender for a broadcast.
    pub fn recipients(&self, n: usize) -> Vec<ProcessId> {
        match self.dest {
            Destination::Process(p) => vec![p],
            Destination::Broadcast => (0..n as u32)
                .map(ProcessId)
                .filter(|&p| p != self.sender)
                .collect(),
        }
    }

    pub fn is_recovery_status(&self) -> bool {
        matches!(self.payload, Payload::RecoveryStatus(_))
    }
}

/// Counters of messages sent to and received from every peer during the
/// current checkpointing interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusVector {
    pub owner: ProcessId,
    pub sent_to: Vec<u64>,
    pub recd_from: Vec<u64>,
}

impl StatusVector {
    pub fn new(owner: ProcessId, n: usize) -> Result<Self, ModelError> {
        owner.check(n)?;
        Ok(StatusVector {
            owner,
            sent_to: vec![0; n],
            recd_from: vec![0; n],
        })
    }

    pub fn n(&self) -> usize {
        self.sent_to.len()
    }

    fn peer(&self, p: ProcessId) -> Result<usize, ModelError> {
        if p == self.owner {
            return Err(ModelError::SelfMessage(p));
        }
        Ok(p.check(self.n())?.index())
    }

    /// Counts a send to `dest` and returns the sequence number that stamps it.
    pub fn record_send(&mut self, dest: ProcessId) -> Result<u64, ModelError> {
        let j = self.peer(dest)?;
        self.sent_to[j] += 1;
        Ok(self.sent_to[j])
    }

    pub fn record_receive(&mut self, src: ProcessId) -> Result<(), ModelError> {
        let j = self.peer(src)?;
        self.recd_from[j] += 1;
        Ok(())
    }

    pub fn sent_to(&self, p: ProcessId) -> u64 {
        self.sent_to.get(p.index()).copied().unwrap_or(0)
    }

    pub fn recd_from(&self, p: ProcessId) -> u64 {
        self.recd_from.get(p.index()).copied().unwrap_or(0)
    }

    pub fn reset(&mut self) {
        self.sent_to.iter_mut().for_each(|c| *c = 0);
        self.recd_from.iter_mut().for_each(|c| *c = 0);
    }

    pub fn is_zero(&self) -> bool {
        self.sent_to.iter().chain(&self.recd_from).all(|&c| c == 0)
    }

    /// Peers this process sent to, in pid order.
    pub fn sent_peers(&self) -> impl Iterator<Item = ProcessId> + '_ {
        nonzero(&self.sent_to)
    }

    /// Peers this process received from, in pid order.
    pub fn recd_peers(&self) -> impl Iterator<Item = ProcessId> + '_ {
        nonzero(&self.recd_from)
    }
}

fn nonzero(counters: &[u64]) -> impl Iterator<Item = ProcessId> + '_ {
    counters
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(j, _)| ProcessId(j as u32))
}

/// A committed local checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub owner: ProcessId,
    pub index: CheckpointIndex,
    pub state_snapshot: Vec<u8>,
    /// Status vector of the interval this checkpoint closes.
    pub frozen_status: StatusVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("{0} cannot send a message to itself")]
    SelfMessage(ProcessId),
    #[error("{pid} is out of range for a system of {n} processes")]
    OutOfRange { pid: ProcessId, n: usize },
    #[error("wire tag {0} is reserved for protocol messages")]
    ReservedTag(u16),
}
