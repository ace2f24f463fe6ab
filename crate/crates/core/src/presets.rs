//! Built-in scenarios.

use crate::model::{NodeId, ProcessId};
use crate::scenario::{Action, NodeDecl, PolicyKind, Scenario};

pub const PRESETS: &[&str] = &["paper-5proc", "paper-fig4"];

pub fn preset(name: &str) -> Option<Scenario> {
    match name {
        "paper-5proc" => Some(five_process()),
        "paper-fig4" => Some(six_node_tmr()),
        _ => None,
    }
}

/// Five processes; P1 talks to P0 and P2, P3 talks to P4, then P2's node
/// fails. A round after recovery commits the replayed interval.
pub fn five_process() -> Scenario {
    Scenario::new(5)
        .send(5, 1, 0)
        .send(6, 1, 2)
        .send(7, 3, 4)
        .at(20, Action::Crash(NodeId(2)))
        .at(60, Action::Round)
}

/// Six nodes N1..N6 hosting P0..P5 in three overlapping groups. P2 on N3
/// exchanges messages with P1 and P4 before N3 fails.
pub fn six_node_tmr() -> Scenario {
    let mut sc = Scenario::new(6);
    sc.nodes = (1..=6)
        .map(|i| NodeDecl {
            id: NodeId(i),
            hosts: vec![ProcessId(i - 1)],
        })
        .collect();
    sc.groups = vec![
        [NodeId(1), NodeId(2), NodeId(3)],
        [NodeId(3), NodeId(4), NodeId(5)],
        [NodeId(4), NodeId(5), NodeId(6)],
    ];
    sc.policy = PolicyKind::TmrMains;
    sc.send(5, 1, 2)
        .send(6, 2, 1)
        .send(7, 2, 4)
        .send(8, 4, 2)
        .at(20, Action::Crash(NodeId(3)))
        .at(60, Action::Round)
}
