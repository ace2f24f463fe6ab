//! TMR group bookkeeping: roles, replication fan-out, promotion on failure
//! and takeover of a failed node's processes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CheckpointIndex, CheckpointRecord, NodeId, ProcessId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TmrRole {
    Main,
    Primary,
    Secondary,
}

impl TmrRole {
    pub fn from_rank(rank: usize) -> TmrRole {
        match rank {
            0 => TmrRole::Main,
            1 => TmrRole::Primary,
            _ => TmrRole::Secondary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    Tmr,
    Dmr,
    Lone,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TmrError {
    #[error("group members must be distinct, got {0:?}")]
    DuplicateMember([NodeId; 3]),
    #[error("{node} is not a live member of group {group}")]
    NotMember { group: u32, node: NodeId },
    #[error("group {0} has no live member left")]
    GroupDead(u32),
    #[error("no live node holds a checkpoint of {0}")]
    Unrecoverable(ProcessId),
    #[error("{0} belongs to no group that can take over")]
    NoTakeoverHost(NodeId),
}

/// A group of three nodes. `alive` lists the surviving members in role
/// order: the first is main, the second primary, the third secondary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TmrGroup {
    pub group_id: u32,
    pub members: [NodeId; 3],
    alive: Vec<NodeId>,
}

/// One role change caused by a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Promotion {
    pub group_id: u32,
    pub node: NodeId,
    pub from: TmrRole,
    pub to: TmrRole,
}

/// What a single member failure did to its group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureOutcome {
    pub group_id: u32,
    pub failed_role: TmrRole,
    pub promotions: Vec<Promotion>,
    pub mode: GroupMode,
}

impl TmrGroup {
    pub fn new(
        group_id: u32,
        main: NodeId,
        primary: NodeId,
        secondary: NodeId,
    ) -> Result<Self, TmrError> {
        let members = [main, primary, secondary];
        if main == primary || main == secondary || primary == secondary {
            return Err(TmrError::DuplicateMember(members));
        }
        Ok(TmrGroup {
            group_id,
            members,
            alive: members.to_vec(),
        })
    }

    pub fn mode(&self) -> GroupMode {
        match self.alive.len() {
            3 => GroupMode::Tmr,
            2 => GroupMode::Dmr,
            1 => GroupMode::Lone,
            _ => GroupMode::Dead,
        }
    }

    pub fn alive(&self) -> &[NodeId] {
        &self.alive
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.alive.contains(&node)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }

    pub fn role_of(&self, node: NodeId) -> Option<TmrRole> {
        self.alive
            .iter()
            .position(|&m| m == node)
            .map(TmrRole::from_rank)
    }

    pub fn holder_of(&self, role: TmrRole) -> Option<NodeId> {
        self.alive.get(role as usize).copied()
    }

    pub fn main(&self) -> Option<NodeId> {
        self.holder_of(TmrRole::Main)
    }
}

/// Nodes that receive a copy of `taker`'s checkpoint within `group`.
pub fn replication_targets(group: &TmrGroup, taker: NodeId) -> Result<Vec<NodeId>, TmrError> {
    let role = group.role_of(taker).ok_or(TmrError::NotMember {
        group: group.group_id,
        node: taker,
    })?;
    let pick = |r: TmrRole| group.holder_of(r);
    let targets = match role {
        TmrRole::Main => pick(TmrRole::Primary).into_iter().collect(),
        TmrRole::Primary => pick(TmrRole::Main).into_iter().collect(),
        TmrRole::Secondary => [TmrRole::Main, TmrRole::Primary]
            .into_iter()
            .filter_map(pick)
            .collect(),
    };
    Ok(targets)
}

/// Marks `failed` dead and shifts the survivors up the role chain.
/// Losing the last member leaves the group dead and is reported as an error.
pub fn handle_member_failure(
    group: &mut TmrGroup,
    failed: NodeId,
) -> Result<FailureOutcome, TmrError> {
    let rank = group
        .alive
        .iter()
        .position(|&m| m == failed)
        .ok_or(TmrError::NotMember {
            group: group.group_id,
            node: failed,
        })?;
    group.alive.remove(rank);
    if group.alive.is_empty() {
        return Err(TmrError::GroupDead(group.group_id));
    }
    let promotions = group.alive[rank..]
        .iter()
        .enumerate()
        .map(|(i, &node)| Promotion {
            group_id: group.group_id,
            node,
            from: TmrRole::from_rank(rank + i + 1),
            to: TmrRole::from_rank(rank + i),
        })
        .collect();
    Ok(FailureOutcome {
        group_id: group.group_id,
        failed_role: TmrRole::from_rank(rank),
        promotions,
        mode: group.mode(),
    })
}

/// Latest checkpoint per owner held on each node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplicaStore {
    held: BTreeMap<NodeId, BTreeMap<ProcessId, CheckpointRecord>>,
}

impl ReplicaStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps `cp` unless the node already holds a newer record of the owner.
    pub fn store(&mut self, node: NodeId, cp: CheckpointRecord) -> bool {
        let slot = self.held.entry(node).or_default();
        match slot.get(&cp.owner) {
            Some(old) if old.index > cp.index => false,
            _ => {
                slot.insert(cp.owner, cp);
                true
            }
        }
    }

    pub fn get(&self, node: NodeId, owner: ProcessId) -> Option<&CheckpointRecord> {
        self.held.get(&node).and_then(|m| m.get(&owner))
    }

    pub fn holders(&self, owner: ProcessId) -> Vec<(NodeId, CheckpointIndex)> {
        self.held
            .iter()
            .filter_map(|(&node, m)| m.get(&owner).map(|cp| (node, cp.index)))
            .collect()
    }

    pub fn records_on(&self, node: NodeId) -> impl Iterator<Item = &CheckpointRecord> {
        self.held.get(&node).into_iter().flat_map(|m| m.values())
    }
}

/// Group topology together with the replica store.
#[derive(Debug, Clone, Default)]
pub struct TmrLayer {
    pub groups: Vec<TmrGroup>,
    pub store: ReplicaStore,
}

/// Where a failed node's processes continue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Takeover {
    pub failed: NodeId,
    pub host: NodeId,
    /// For each moved process, the node its checkpoint was read from.
    pub sources: Vec<(ProcessId, NodeId, CheckpointIndex)>,
}

impl TmrLayer {
    pub fn new(groups: Vec<TmrGroup>) -> Self {
        TmrLayer {
            groups,
            store: ReplicaStore::new(),
        }
    }

    pub fn is_grouped(&self, node: NodeId) -> bool {
        self.groups.iter().any(|g| g.contains(node))
    }

    /// A node keeps its own checkpoint unless it is only ever a secondary.
    pub fn keeps_own_copy(&self, node: NodeId) -> bool {
        let roles: Vec<TmrRole> = self.groups.iter().filter_map(|g| g.role_of(node)).collect();
        roles.is_empty() || roles.iter().any(|r| *r != TmrRole::Secondary)
    }

    /// Union of the targets over every group where `node` is alive.
    pub fn targets(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        for g in &self.groups {
            if let Ok(ts) = replication_targets(g, node) {
                for t in ts {
                    if t != node && !out.contains(&t) {
                        out.push(t);
                    }
                }
            }
        }
        out
    }

    /// Applies a node failure to every group it belongs to. Groups that
    /// lose their last member are reported in the second list.
    pub fn fail_node(&mut self, node: NodeId) -> (Vec<FailureOutcome>, Vec<u32>) {
        let mut outcomes = Vec::new();
        let mut dead = Vec::new();
        for g in &mut self.groups {
            if !g.is_alive(node) {
                continue;
            }
            match handle_member_failure(g, node) {
                Ok(o) => outcomes.push(o),
                Err(TmrError::GroupDead(id)) => dead.push(id),
                Err(_) => {}
            }
        }
        (outcomes, dead)
    }

    /// Search order for `owner` hosted on `home`: the home node, then the
    /// live members of its groups in role order, then every other node.
    fn candidates(&self, home: NodeId) -> Vec<NodeId> {
        let mut order = vec![home];
        for g in self.groups.iter().filter(|g| g.contains(home)) {
            for &m in g.alive() {
                if !order.contains(&m) {
                    order.push(m);
                }
            }
        }
        order
    }

    /// The live node holding the newest checkpoint of `owner`, preferring
    /// the home node and then its group partners.
    pub fn locate_checkpoint(
        &self,
        owner: ProcessId,
        home: NodeId,
        alive: &BTreeSet<NodeId>,
    ) -> Result<NodeId, TmrError> {
        let mut order = self.candidates(home);
        for (node, _) in self.store.holders(owner) {
            if !order.contains(&node) {
                order.push(node);
            }
        }
        let mut best: Option<(CheckpointIndex, NodeId)> = None;
        for node in order {
            if !alive.contains(&node) {
                continue;
            }
            if let Some(cp) = self.store.get(node, owner) {
                if best.is_none_or(|(idx, _)| cp.index > idx) {
                    best = Some((cp.index, node));
                }
            }
        }
        best.map(|(_, n)| n).ok_or(TmrError::Unrecoverable(owner))
    }

    /// Chooses the node that hosts `failed`'s processes from now on: the
    /// promoted main of a group where `failed` was main, otherwise the main
    /// of the first group that contained it.
    pub fn takeover_host(
        &self,
        failed: NodeId,
        outcomes: &[FailureOutcome],
    ) -> Result<NodeId, TmrError> {
        let group_main = |id: u32| {
            self.groups
                .iter()
                .find(|g| g.group_id == id)
                .and_then(TmrGroup::main)
        };
        outcomes
            .iter()
            .filter(|o| o.failed_role == TmrRole::Main)
            .chain(outcomes.iter())
            .find_map(|o| group_main(o.group_id))
            .ok_or(TmrError::NoTakeoverHost(failed))
    }

    /// Moves `processes` of the failed node to the takeover host and reports
    /// where each checkpoint will be read from.
    pub fn takeover(
        &self,
        failed: NodeId,
        outcomes: &[FailureOutcome],
        processes: &[ProcessId],
        alive: &BTreeSet<NodeId>,
    ) -> Result<Takeover, TmrError> {
        let host = self.takeover_host(failed, outcomes)?;
        let mut sources = Vec::new();
        for &p in processes {
            let src = self.locate_checkpoint(p, host, alive)?;
            let index = self.store.get(src, p).expect("located").index;
            sources.push((p, src, index));
        }
        Ok(Takeover {
            failed,
            host,
            sources,
        })
    }
}
