//! Trace records: one JSON object per line, fields in declaration order.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::model::{Message, NodeId, ProcessId};
use crate::protocol::{Disposition, PhaseTag};
use crate::recovery::VerdictReason;
use crate::tmr::{GroupMode, TmrRole};

/// Wire-level view of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MsgInfo {
    pub kind: u16,
    pub sender: u32,
    pub dest: i64,
    pub check_index: u64,
    pub seq_no: u64,
    pub epoch: u32,
    pub incarnation: u32,
    pub recovery: bool,
}

impl From<&Message> for MsgInfo {
    fn from(m: &Message) -> Self {
        MsgInfo {
            kind: m.kind.wire_tag(),
            sender: m.sender.0,
            dest: m.dest.wire(),
            check_index: m.check_index.0,
            seq_no: m.seq_no,
            epoch: m.epoch,
            incarnation: m.incarnation,
            recovery: m.is_recovery_status(),
        }
    }
}

impl MsgInfo {
    pub fn is_computation(&self) -> bool {
        self.kind > 1
    }

    /// Identity of a computation message across retransmissions.
    pub fn key(&self) -> (u32, u32, i64, u64, u64) {
        (
            self.sender,
            self.incarnation,
            self.dest,
            self.check_index,
            self.seq_no,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Start {
        n: usize,
        seed: u64,
    },
    AppSend {
        pid: u32,
        dest: u32,
    },
    /// A computation message was stamped by its sender.
    Stamp {
        pid: u32,
        msg: MsgInfo,
    },
    Queued {
        pid: u32,
        dest: u32,
    },
    /// One wire transmission towards one recipient.
    Send {
        node: u32,
        to: u32,
        msg: MsgInfo,
        attempt: u32,
    },
    Drop {
        to: u32,
        msg: MsgInfo,
        attempt: u32,
    },
    Duplicate {
        to: u32,
        msg: MsgInfo,
        attempt: u32,
    },
    Deliver {
        node: u32,
        pid: u32,
        msg: MsgInfo,
    },
    Lost {
        node: u32,
        pid: u32,
        msg: MsgInfo,
    },
    Suspect {
        node: u32,
        peer: u32,
        msg: MsgInfo,
    },
    Disposition {
        node: u32,
        pid: u32,
        msg: MsgInfo,
        disposition: Disposition,
    },
    Ignored {
        pid: u32,
        msg: MsgInfo,
        reason: String,
    },
    Phase {
        pid: u32,
        from: PhaseTag,
        to: PhaseTag,
    },
    RoundInitiated {
        pid: u32,
        index: u64,
    },
    RoundHeld {
        index: u64,
    },
    RoundComplete {
        index: u64,
    },
    RoundAborted {
        pid: u32,
        index: u64,
    },
    Commit {
        node: u32,
        pid: u32,
        index: u64,
        sent_to: Vec<u64>,
        recd_from: Vec<u64>,
    },
    Replicate {
        from: u32,
        to: u32,
        pid: u32,
        index: u64,
        attempt: u32,
    },
    ReplicaStored {
        node: u32,
        pid: u32,
        index: u64,
    },
    ReplicaComplete {
        pid: u32,
        index: u64,
    },
    Crash {
        node: u32,
    },
    CrashDeferred {
        node: u32,
    },
    NotifyFailure {
        node: u32,
        faulty: Vec<u32>,
        epoch: u32,
    },
    Promotion {
        group: u32,
        node: u32,
        from: TmrRole,
        to: TmrRole,
        mode: GroupMode,
    },
    GroupDead {
        group: u32,
    },
    Takeover {
        failed: u32,
        host: u32,
        pid: u32,
        source: u32,
        index: u64,
    },
    RouteUpdate {
        pid: u32,
        node: u32,
    },
    Restart {
        node: u32,
    },
    Verdict {
        pid: u32,
        must_rollback: bool,
        reason: VerdictReason,
        depends: Vec<u32>,
    },
    Rollback {
        pid: u32,
        index: u64,
    },
    Purge {
        count: usize,
    },
    Replay {
        pid: u32,
        count: usize,
    },
    RecoveryDone {
        epoch: u32,
        rollback_set: Vec<u32>,
    },
    Unrecoverable {
        reason: String,
    },
    End {
        quiescent: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

pub type Trace = Vec<TraceRecord>;

pub fn pid(p: ProcessId) -> u32 {
    p.0
}

pub fn node(n: NodeId) -> u32 {
    n.0
}

pub fn write_jsonl<W: Write>(trace: &[TraceRecord], mut w: W) -> io::Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl(trace: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_jsonl(trace, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Trace> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format_is_stable() {
        let r = TraceRecord {
            time: 13,
            event: TraceEvent::Crash { node: 3 },
        };
        assert_eq!(
            to_jsonl(&[r]),
            "{\"time\":13,\"event\":\"crash\",\"node\":3}\n"
        );
    }

    #[test]
    fn round_trip() {
        let msg = MsgInfo {
            kind: 2,
            sender: 1,
            dest: 0,
            check_index: 1,
            seq_no: 1,
            epoch: 0,
            incarnation: 0,
            recovery: false,
        };
        let trace = vec![
            TraceRecord {
                time: 0,
                event: TraceEvent::Start { n: 3, seed: 7 },
            },
            TraceRecord {
                time: 4,
                event: TraceEvent::Disposition {
                    node: 0,
                    pid: 0,
                    msg,
                    disposition: Disposition::Accept,
                },
            },
            TraceRecord {
                time: 9,
                event: TraceEvent::Verdict {
                    pid: 0,
                    must_rollback: true,
                    reason: VerdictReason::Indirect {
                        via: vec![ProcessId(1)],
                    },
                    depends: vec![0, 1],
                },
            },
        ];
        let text = to_jsonl(&trace);
        assert_eq!(read_jsonl(text.as_bytes()).unwrap(), trace);
    }
}
