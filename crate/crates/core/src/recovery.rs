//! Dependency-driven recovery: the merged send/receive (`sr`) adjacency,
//! per-process rollback verdicts, and restoring a process to its last
//! committed checkpoint.
//!
//! A process must roll back iff the faulty process is reachable from it in
//! the undirected graph of this interval's communications. The search keeps
//! a visited list (`depends`) of processes whose rows were already examined,
//! so each row is read at most once.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CheckpointRecord, ModelError, ProcessId, StatusVector};
use crate::protocol::{AppRequest, ProcessState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecoveryError {
    #[error("status exchange incomplete: no vector from {0:?}")]
    IncompleteExchange(Vec<ProcessId>),
    #[error("two status vectors for {0}")]
    DuplicateVector(ProcessId),
    #[error("status vectors disagree on the system size")]
    SizeMismatch,
    #[error("sr row {0} lists its own process")]
    SelfEdge(ProcessId),
    #[error("sr matrix is not symmetric between {0} and {1}")]
    Asymmetric(ProcessId, ProcessId),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint of {found} offered to {pid}")]
    WrongOwner { pid: ProcessId, found: ProcessId },
    #[error("{pid} is in interval {interval} but was offered checkpoint {offered}")]
    NotLastCheckpoint {
        pid: ProcessId,
        interval: u64,
        offered: u64,
    },
}

/// Sent-to and received-from pid lists of one process, the tabular form of
/// a status vector. Written on the wire as `-1` terminated lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerLists {
    pub owner: ProcessId,
    pub sent: Vec<ProcessId>,
    pub recd: Vec<ProcessId>,
}

impl From<&StatusVector> for PeerLists {
    fn from(v: &StatusVector) -> Self {
        PeerLists {
            owner: v.owner,
            sent: v.sent_peers().collect(),
            recd: v.recd_peers().collect(),
        }
    }
}

/// Formats a pid list with the `-1` end marker.
pub fn to_wire(list: &[ProcessId]) -> Vec<i64> {
    list.iter()
        .map(|p| i64::from(p.0))
        .chain(std::iter::once(-1))
        .collect()
}

/// Reads a `-1` terminated pid list. Missing terminator or a negative
/// entry other than the terminator is rejected.
pub fn from_wire(wire: &[i64]) -> Option<Vec<ProcessId>> {
    let end = wire.iter().position(|&v| v == -1)?;
    wire[..end]
        .iter()
        .map(|&v| u32::try_from(v).ok().map(ProcessId))
        .collect()
}

/// Merged communication partners of every process for one interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrMatrix {
    rows: Vec<Vec<ProcessId>>,
}

impl SrMatrix {
    /// Builds the matrix from one entry per process. Row `i` lists the pids
    /// `i` sent to, then those it received from, then peers that only appear
    /// in other processes' lists; duplicates are dropped.
    pub fn from_lists(lists: &[PeerLists]) -> Result<Self, RecoveryError> {
        let n = lists.len();
        let mut by_owner: Vec<Option<&PeerLists>> = vec![None; n];
        for l in lists {
            let i = l.owner.check(n)?.index();
            if by_owner[i].replace(l).is_some() {
                return Err(RecoveryError::DuplicateVector(l.owner));
            }
        }
        let missing: Vec<ProcessId> = (0..n)
            .filter(|&i| by_owner[i].is_none())
            .map(|i| ProcessId(i as u32))
            .collect();
        if !missing.is_empty() {
            return Err(RecoveryError::IncompleteExchange(missing));
        }

        let mut rows: Vec<Vec<ProcessId>> = vec![Vec::new(); n];
        for (i, l) in by_owner.iter().map(|l| l.unwrap()).enumerate() {
            for &p in l.sent.iter().chain(&l.recd) {
                p.check(n)?;
                if p.index() == i {
                    return Err(RecoveryError::SelfEdge(p));
                }
                if !rows[i].contains(&p) {
                    rows[i].push(p);
                }
            }
        }
        // an edge known to one side only still binds both
        for i in 0..n {
            for p in rows[i].clone() {
                let me = ProcessId(i as u32);
                if !rows[p.index()].contains(&me) {
                    rows[p.index()].push(me);
                }
            }
        }
        let sr = SrMatrix { rows };
        sr.check_symmetric()?;
        Ok(sr)
    }

    /// Rows given directly; they must already be symmetric.
    pub fn from_rows(rows: Vec<Vec<ProcessId>>) -> Result<Self, RecoveryError> {
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            for &p in row {
                p.check(n)?;
                if p.index() == i {
                    return Err(RecoveryError::SelfEdge(p));
                }
            }
        }
        let sr = SrMatrix { rows };
        sr.check_symmetric()?;
        Ok(sr)
    }

    fn check_symmetric(&self) -> Result<(), RecoveryError> {
        for (i, row) in self.rows.iter().enumerate() {
            let me = ProcessId(i as u32);
            if let Some(&p) = row.iter().find(|p| !self.rows[p.index()].contains(&me)) {
                return Err(RecoveryError::Asymmetric(me, p));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, p: ProcessId) -> &[ProcessId] {
        &self.rows[p.index()]
    }

    pub fn rows(&self) -> &[Vec<ProcessId>] {
        &self.rows
    }

    pub fn row_wire(&self, p: ProcessId) -> Vec<i64> {
        to_wire(self.row(p))
    }
}

/// Builds the sr matrix from the status vectors of one interval.
pub fn build_sr_matrix(vectors: &[StatusVector]) -> Result<SrMatrix, RecoveryError> {
    if vectors.iter().any(|v| v.n() != vectors.len()) {
        return Err(match vectors.iter().find(|v| v.n() != vectors.len()) {
            Some(v) if v.n() > vectors.len() => {
                let have: BTreeSet<ProcessId> = vectors.iter().map(|v| v.owner).collect();
                RecoveryError::IncompleteExchange(
                    (0..v.n() as u32)
                        .map(ProcessId)
                        .filter(|p| !have.contains(p))
                        .collect(),
                )
            }
            _ => RecoveryError::SizeMismatch,
        });
    }
    let lists: Vec<PeerLists> = vectors.iter().map(PeerLists::from).collect();
    SrMatrix::from_lists(&lists)
}

/// Status vector of a process that can no longer report, rebuilt from what
/// the survivors recorded about it.
pub fn reconstruct_vector(
    faulty: ProcessId,
    survivors: &[StatusVector],
    n: usize,
) -> Result<StatusVector, RecoveryError> {
    let mut v = StatusVector::new(faulty, n)?;
    for s in survivors {
        if s.owner == faulty {
            continue;
        }
        let j = s.owner.check(n)?.index();
        v.sent_to[j] = s.recd_from(faulty);
        v.recd_from[j] = s.sent_to(faulty);
    }
    Ok(v)
}

/// Processes whose rows have been searched, in search order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependsList {
    pub visited: Vec<ProcessId>,
}

impl DependsList {
    fn push(&mut self, p: ProcessId) -> bool {
        if self.visited.contains(&p) {
            false
        } else {
            self.visited.push(p);
            true
        }
    }

    pub fn to_wire(&self) -> Vec<i64> {
        to_wire(&self.visited)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VerdictReason {
    Direct,
    /// Intermediate processes on the dependency chain, nearest first.
    Indirect {
        via: Vec<ProcessId>,
    },
    NotDependent,
    IsFaulty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryVerdict {
    pub pid: ProcessId,
    pub must_rollback: bool,
    pub reason: VerdictReason,
    pub depends: DependsList,
}

impl RecoveryVerdict {
    /// Dependency chain from the first neighbour to the faulty process.
    pub fn full_path(&self, faulty: ProcessId) -> Vec<ProcessId> {
        match &self.reason {
            VerdictReason::Direct => vec![faulty],
            VerdictReason::Indirect { via } => {
                via.iter().copied().chain(std::iter::once(faulty)).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// Decides whether `own` depends, directly or through other processes, on
/// `faulty` in this interval.
pub fn detect_recovery(
    sr: &SrMatrix,
    own: ProcessId,
    faulty: ProcessId,
) -> Result<RecoveryVerdict, RecoveryError> {
    let n = sr.n();
    own.check(n)?;
    faulty.check(n)?;
    if own == faulty {
        return Ok(RecoveryVerdict {
            pid: own,
            must_rollback: true,
            reason: VerdictReason::IsFaulty,
            depends: DependsList::default(),
        });
    }

    let mut depends = DependsList::default();
    let mut parent: Vec<Option<ProcessId>> = vec![None; n];
    let mut queue = VecDeque::from([own]);
    depends.push(own);
    while let Some(key) = queue.pop_front() {
        for &next in sr.row(key) {
            if next == faulty {
                let mut via = Vec::new();
                let mut cur = key;
                while cur != own {
                    via.push(cur);
                    cur = parent[cur.index()].expect("searched rows have a parent");
                }
                via.reverse();
                let reason = if via.is_empty() {
                    VerdictReason::Direct
                } else {
                    VerdictReason::Indirect { via }
                };
                return Ok(RecoveryVerdict {
                    pid: own,
                    must_rollback: true,
                    reason,
                    depends,
                });
            }
            if depends.push(next) {
                parent[next.index()] = Some(key);
                queue.push_back(next);
            }
        }
    }
    Ok(RecoveryVerdict {
        pid: own,
        must_rollback: false,
        reason: VerdictReason::NotDependent,
        depends,
    })
}

/// The faulty process together with every process that must roll back.
pub fn rollback_set(
    sr: &SrMatrix,
    faulty: ProcessId,
) -> Result<BTreeSet<ProcessId>, RecoveryError> {
    rollback_set_many(sr, &[faulty])
}

/// Union of the rollback sets of several processes lost together (a crashed
/// node may host more than one process after a takeover).
pub fn rollback_set_many(
    sr: &SrMatrix,
    faulty: &[ProcessId],
) -> Result<BTreeSet<ProcessId>, RecoveryError> {
    let mut set: BTreeSet<ProcessId> = BTreeSet::new();
    for &f in faulty {
        f.check(sr.n())?;
        set.insert(f);
    }
    for i in 0..sr.n() as u32 {
        let p = ProcessId(i);
        if set.contains(&p) {
            continue;
        }
        for &f in faulty {
            if detect_recovery(sr, p, f)?.must_rollback {
                set.insert(p);
                break;
            }
        }
    }
    Ok(set)
}

/// Verdict of `own` against a group of faulty processes: the first one it
/// depends on decides the reason.
pub fn detect_recovery_many(
    sr: &SrMatrix,
    own: ProcessId,
    faulty: &[ProcessId],
) -> Result<RecoveryVerdict, RecoveryError> {
    let mut last = None;
    for &f in faulty {
        let v = detect_recovery(sr, own, f)?;
        if v.must_rollback {
            return Ok(v);
        }
        last = Some(v);
    }
    last.ok_or(RecoveryError::IncompleteExchange(Vec::new()))
}

/// Restores `state` from its last committed checkpoint and returns the
/// application requests issued since then, which the caller re-executes.
///
/// Live counters restart at zero and the incarnation number moves forward,
/// so messages from the undone execution are recognisable as stale.
pub fn rollback(
    state: &mut ProcessState,
    cp: &CheckpointRecord,
) -> Result<Vec<AppRequest>, RecoveryError> {
    if cp.owner != state.pid() {
        return Err(RecoveryError::WrongOwner {
            pid: state.pid(),
            found: cp.owner,
        });
    }
    if cp.index.next() != state.check_index() {
        return Err(RecoveryError::NotLastCheckpoint {
            pid: state.pid(),
            interval: state.check_index().0,
            offered: cp.index.0,
        });
    }
    Ok(state.restore_from(cp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(i: u32) -> ProcessId {
        ProcessId(i)
    }

    fn vec_of(owner: u32, n: usize, sent: &[u32], recd: &[u32]) -> StatusVector {
        let mut v = StatusVector::new(p(owner), n).unwrap();
        for &s in sent {
            v.record_send(p(s)).unwrap();
        }
        for &r in recd {
            v.record_receive(p(r)).unwrap();
        }
        v
    }

    /// Five processes: P1 sends to P0 and P2, P3 sends to P4.
    fn five_process_vectors() -> Vec<StatusVector> {
        vec![
            vec_of(0, 5, &[], &[1]),
            vec_of(1, 5, &[0, 2], &[]),
            vec_of(2, 5, &[], &[1]),
            vec_of(3, 5, &[4], &[]),
            vec_of(4, 5, &[], &[3]),
        ]
    }

    #[test]
    fn five_process_sr_rows() {
        let sr = build_sr_matrix(&five_process_vectors()).unwrap();
        let expect: Vec<Vec<ProcessId>> = vec![
            vec![p(1)],
            vec![p(0), p(2)],
            vec![p(1)],
            vec![p(4)],
            vec![p(3)],
        ];
        assert_eq!(sr.rows(), expect.as_slice());
        assert_eq!(sr.row_wire(p(1)), vec![0, 2, -1]);
    }

    #[test]
    fn table_lists_match_wire_form() {
        let lists: Vec<PeerLists> = five_process_vectors().iter().map(PeerLists::from).collect();
        assert_eq!(to_wire(&lists[0].sent), vec![-1]);
        assert_eq!(to_wire(&lists[0].recd), vec![1, -1]);
        assert_eq!(to_wire(&lists[1].sent), vec![0, 2, -1]);
        assert_eq!(to_wire(&lists[3].sent), vec![4, -1]);
        assert_eq!(to_wire(&lists[4].recd), vec![3, -1]);
    }

    #[test]
    fn row_keeps_sent_then_received_order() {
        // P1 sent to 6, 2, 0 and received from 4, 3
        let mut lists: Vec<PeerLists> = (0..7)
            .map(|i| PeerLists {
                owner: p(i),
                sent: vec![],
                recd: vec![],
            })
            .collect();
        lists[1].sent = vec![p(6), p(2), p(0)];
        lists[1].recd = vec![p(4), p(3)];
        for r in [6, 2, 0] {
            lists[r].recd = vec![p(1)];
        }
        for s in [4, 3] {
            lists[s].sent = vec![p(1)];
        }
        let sr = SrMatrix::from_lists(&lists).unwrap();
        assert_eq!(sr.row_wire(p(1)), vec![6, 2, 0, 4, 3, -1]);
    }

    #[test]
    fn all_zero_vectors_give_empty_rows() {
        let vs: Vec<StatusVector> = (0..4).map(|i| vec_of(i, 4, &[], &[])).collect();
        let sr = build_sr_matrix(&vs).unwrap();
        assert!(sr.rows().iter().all(|r| r.is_empty()));
    }

    #[test]
    fn missing_vector_is_incomplete_exchange() {
        let mut vs = five_process_vectors();
        vs.remove(2);
        assert_eq!(
            build_sr_matrix(&vs),
            Err(RecoveryError::IncompleteExchange(vec![p(2)]))
        );
        let mut dup = five_process_vectors();
        dup[2] = dup[1].clone();
        assert_eq!(
            build_sr_matrix(&dup),
            Err(RecoveryError::DuplicateVector(p(1)))
        );
    }

    #[test]
    fn in_flight_edges_are_symmetrised() {
        // P0 sent to P1, which has not received it yet
        let vs = vec![vec_of(0, 2, &[1], &[]), vec_of(1, 2, &[], &[])];
        let sr = build_sr_matrix(&vs).unwrap();
        assert_eq!(sr.row(p(1)), &[p(0)]);
    }

    #[test]
    fn asymmetric_rows_rejected() {
        let rows = vec![vec![p(1)], vec![]];
        assert_eq!(
            SrMatrix::from_rows(rows),
            Err(RecoveryError::Asymmetric(p(0), p(1)))
        );
        assert_eq!(
            SrMatrix::from_rows(vec![vec![p(0)]]),
            Err(RecoveryError::SelfEdge(p(0)))
        );
    }

    #[test]
    fn five_process_verdicts() {
        let sr = build_sr_matrix(&five_process_vectors()).unwrap();
        let f = p(2);
        let v1 = detect_recovery(&sr, p(1), f).unwrap();
        assert_eq!(v1.reason, VerdictReason::Direct);
        assert!(v1.must_rollback);

        let v0 = detect_recovery(&sr, p(0), f).unwrap();
        assert_eq!(v0.reason, VerdictReason::Indirect { via: vec![p(1)] });
        assert_eq!(v0.full_path(f), vec![p(1), p(2)]);
        assert_eq!(v0.depends.visited, vec![p(0), p(1)]);

        let v3 = detect_recovery(&sr, p(3), f).unwrap();
        assert_eq!(v3.reason, VerdictReason::NotDependent);
        assert!(!v3.must_rollback);
        assert_eq!(v3.depends.to_wire(), vec![3, 4, -1]);

        let v4 = detect_recovery(&sr, p(4), f).unwrap();
        assert_eq!(v4.reason, VerdictReason::NotDependent);

        let v2 = detect_recovery(&sr, f, f).unwrap();
        assert_eq!(v2.reason, VerdictReason::IsFaulty);

        assert_eq!(
            rollback_set(&sr, f).unwrap(),
            [p(0), p(1), p(2)].into_iter().collect()
        );
    }

    #[test]
    fn isolated_process_not_dependent() {
        let sr = SrMatrix::from_rows(vec![vec![], vec![p(2)], vec![p(1)]]).unwrap();
        let v = detect_recovery(&sr, p(0), p(2)).unwrap();
        assert_eq!(v.reason, VerdictReason::NotDependent);
        assert_eq!(v.depends.visited, vec![p(0)]);
    }

    #[test]
    fn empty_sr_rolls_back_faulty_only() {
        let sr = SrMatrix::from_rows(vec![vec![]; 4]).unwrap();
        assert_eq!(
            rollback_set(&sr, p(3)).unwrap(),
            [p(3)].into_iter().collect()
        );
    }

    #[test]
    fn faulty_out_of_range() {
        let sr = SrMatrix::from_rows(vec![vec![]; 3]).unwrap();
        assert!(detect_recovery(&sr, p(0), p(3)).is_err());
        assert!(rollback_set(&sr, p(9)).is_err());
    }

    #[test]
    fn reconstructed_vector_mirrors_survivors() {
        let vs = five_process_vectors();
        let survivors: Vec<StatusVector> = vs.iter().filter(|v| v.owner != p(2)).cloned().collect();
        let rebuilt = reconstruct_vector(p(2), &survivors, 5).unwrap();
        assert_eq!(rebuilt, vs[2]);
    }

    #[test]
    fn wire_lists_round_trip() {
        assert_eq!(from_wire(&[6, 2, 0, 4, 3, -1]).unwrap().len(), 5);
        assert_eq!(from_wire(&[-1]), Some(vec![]));
        assert_eq!(from_wire(&[1, 2]), None);
        assert_eq!(from_wire(&[1, -3, -1]), None);
    }
}
