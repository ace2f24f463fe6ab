//! Scenario files.
//!
//! A scenario is plain text split into sections. Blank lines and text after
//! `#` are ignored.
//!
//! ```text
//! [system]
//! processes 5
//! policy round_robin          # or tmr_mains
//! detection_latency 5
//! step_budget 200000
//!
//! [nodes]                     # optional, default: node i hosts process i
//! node 1 hosts 0
//! link 1 2
//!
//! [groups]
//! group 1 2 3                 # main primary secondary
//!
//! [net]
//! delay uniform 1 4           # or: delay fixed 3
//! drop 0.05
//! duplicate 0.1
//! ack_timeout 12
//! retry_limit 5
//! seed 7
//!
//! [script]
//! at 10 send 1 0 hello        # payload optional
//! at 20 round
//! at 30 crash 3
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::model::{NodeId, ProcessId};
use crate::sim::net::{DelayModel, NetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    RoundRobin,
    TmrMains,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeDecl {
    pub id: NodeId,
    pub hosts: Vec<ProcessId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send {
        from: ProcessId,
        to: ProcessId,
        payload: String,
    },
    Round,
    Crash(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub at: u64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n: usize,
    /// Declared nodes; empty means one node per process with the same id.
    pub nodes: Vec<NodeDecl>,
    pub links: Vec<(NodeId, NodeId)>,
    /// Member triples in role order.
    pub groups: Vec<[NodeId; 3]>,
    pub policy: PolicyKind,
    pub net: NetConfig,
    pub detection_latency: u64,
    pub step_budget: u64,
    pub script: Vec<ScriptEntry>,
}

pub const DEFAULT_STEP_BUDGET: u64 = 200_000;
pub const DEFAULT_DETECTION_LATENCY: u64 = 5;

impl Scenario {
    pub fn new(n: usize) -> Self {
        Scenario {
            n,
            nodes: Vec::new(),
            links: Vec::new(),
            groups: Vec::new(),
            policy: PolicyKind::RoundRobin,
            net: NetConfig::default(),
            detection_latency: DEFAULT_DETECTION_LATENCY,
            step_budget: DEFAULT_STEP_BUDGET,
            script: Vec::new(),
        }
    }

    /// Effective node to process mapping.
    pub fn hosting(&self) -> Vec<NodeDecl> {
        if self.nodes.is_empty() {
            (0..self.n as u32)
                .map(|i| NodeDecl {
                    id: NodeId(i),
                    hosts: vec![ProcessId(i)],
                })
                .collect()
        } else {
            self.nodes.clone()
        }
    }

    pub fn at(mut self, at: u64, action: Action) -> Self {
        self.script.push(ScriptEntry { at, action });
        self
    }

    pub fn send(self, at: u64, from: u32, to: u32) -> Self {
        self.at(
            at,
            Action::Send {
                from: ProcessId(from),
                to: ProcessId(to),
                payload: String::new(),
            },
        )
    }

    /// Checks cross-references; returns one message per problem.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n == 0 {
            errs.push("at least one process is required".to_string());
        }
        let hosting = self.hosting();
        let declared: BTreeSet<NodeId> = hosting.iter().map(|d| d.id).collect();
        if declared.len() != hosting.len() {
            errs.push("node declared twice".to_string());
        }
        let mut seen = BTreeMap::new();
        for d in &hosting {
            for p in &d.hosts {
                if p.index() >= self.n {
                    errs.push(format!("{} hosts unknown process {}", d.id, p));
                } else if let Some(prev) = seen.insert(*p, d.id) {
                    errs.push(format!("{} hosted by both {} and {}", p, prev, d.id));
                }
            }
        }
        for p in (0..self.n as u32).map(ProcessId) {
            if !seen.contains_key(&p) {
                errs.push(format!("{p} is not hosted by any node"));
            }
        }
        for &(a, b) in &self.links {
            for x in [a, b] {
                if !declared.contains(&x) {
                    errs.push(format!("link names unknown node {x}"));
                }
            }
        }
        let linked = |a: NodeId, b: NodeId| {
            self.links.is_empty() || self.links.contains(&(a, b)) || self.links.contains(&(b, a))
        };
        for g in &self.groups {
            for &m in g {
                if !declared.contains(&m) {
                    errs.push(format!("group member {m} is not a declared node"));
                }
            }
            if g[0] == g[1] || g[0] == g[2] || g[1] == g[2] {
                errs.push(format!(
                    "group {} {} {} repeats a member",
                    g[0].0, g[1].0, g[2].0
                ));
            }
            for i in 0..3 {
                for j in i + 1..3 {
                    if !linked(g[i], g[j]) {
                        errs.push(format!(
                            "group members {} and {} are not linked",
                            g[i], g[j]
                        ));
                    }
                }
            }
        }
        if let Err(e) = self.net.validate() {
            errs.push(e.to_string());
        }
        for e in &self.script {
            match &e.action {
                Action::Send { from, to, payload } => {
                    if from.index() >= self.n || to.index() >= self.n {
                        errs.push(format!("send {from} -> {to} names an unknown process"));
                    }
                    if from == to {
                        errs.push(format!("{from} cannot send to itself"));
                    }
                    if !valid_payload(payload) {
                        errs.push(format!("payload {payload:?} is not a plain word"));
                    }
                }
                Action::Round => {}
                Action::Crash(node) => {
                    if !declared.contains(node) {
                        errs.push(format!("crash of unknown node {node}"));
                    }
                }
            }
        }
        errs
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let policy = match self.policy {
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::TmrMains => "tmr_mains",
        };
        let _ = writeln!(out, "[system]");
        let _ = writeln!(out, "processes {}", self.n);
        let _ = writeln!(out, "policy {policy}");
        let _ = writeln!(out, "detection_latency {}", self.detection_latency);
        let _ = writeln!(out, "step_budget {}", self.step_budget);
        if !self.nodes.is_empty() || !self.links.is_empty() {
            let _ = writeln!(out, "\n[nodes]");
            for d in &self.nodes {
                let hosts: Vec<String> = d.hosts.iter().map(|p| p.0.to_string()).collect();
                let _ = writeln!(out, "node {} hosts {}", d.id.0, hosts.join(" "));
            }
            for (a, b) in &self.links {
                let _ = writeln!(out, "link {} {}", a.0, b.0);
            }
        }
        if !self.groups.is_empty() {
            let _ = writeln!(out, "\n[groups]");
            for g in &self.groups {
                let _ = writeln!(out, "group {} {} {}", g[0].0, g[1].0, g[2].0);
            }
        }
        let net = &self.net;
        let _ = writeln!(out, "\n[net]");
        match net.delay {
            DelayModel::Fixed(d) => {
                let _ = writeln!(out, "delay fixed {d}");
            }
            DelayModel::Uniform { lo, hi } => {
                let _ = writeln!(out, "delay uniform {lo} {hi}");
            }
        }
        let _ = writeln!(out, "drop {}", net.drop_rate);
        let _ = writeln!(out, "duplicate {}", net.duplicate_rate);
        let _ = writeln!(out, "ack_timeout {}", net.ack_timeout);
        let _ = writeln!(out, "retry_limit {}", net.retry_limit);
        let _ = writeln!(out, "seed {}", net.seed);
        if !self.script.is_empty() {
            let _ = writeln!(out, "\n[script]");
            for e in &self.script {
                match &e.action {
                    Action::Send { from, to, payload } if payload.is_empty() => {
                        let _ = writeln!(out, "at {} send {} {}", e.at, from.0, to.0);
                    }
                    Action::Send { from, to, payload } => {
                        let _ = writeln!(out, "at {} send {} {} {}", e.at, from.0, to.0, payload);
                    }
                    Action::Round => {
                        let _ = writeln!(out, "at {} round", e.at);
                    }
                    Action::Crash(node) => {
                        let _ = writeln!(out, "at {} crash {}", e.at, node.0);
                    }
                }
            }
        }
        out
    }
}

fn valid_payload(p: &str) -> bool {
    p.chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// 1-based; 0 for problems not tied to a line.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseError(pub Vec<Diagnostic>);

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    System,
    Nodes,
    Groups,
    Net,
    Script,
}

struct Parser {
    diags: Vec<Diagnostic>,
    line: usize,
}

impl Parser {
    fn err(&mut self, msg: impl Into<String>) {
        self.diags.push(Diagnostic {
            line: self.line,
            message: msg.into(),
        });
    }

    fn int<T: std::str::FromStr>(&mut self, tok: Option<&str>, what: &str) -> Option<T> {
        match tok {
            None => {
                self.err(format!("missing {what}"));
                None
            }
            Some(t) if t.starts_with('-') => {
                self.err(format!("{what} must not be negative, got {t}"));
                None
            }
            Some(t) => match t.parse() {
                Ok(v) => Some(v),
                Err(_) => {
                    self.err(format!("{what} must be a non-negative integer, got {t:?}"));
                    None
                }
            },
        }
    }

    fn prob(&mut self, tok: Option<&str>, what: &str) -> Option<f64> {
        let t = tok.unwrap_or("");
        match t.parse::<f64>() {
            Ok(v) if (0.0..1.0).contains(&v) => Some(v),
            _ => {
                self.err(format!("{what} must be a probability in [0, 1), got {t:?}"));
                None
            }
        }
    }

    fn done(&mut self, rest: &mut std::str::SplitWhitespace<'_>) {
        if let Some(t) = rest.next() {
            self.err(format!("unexpected trailing token {t:?}"));
        }
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let mut p = Parser {
        diags: Vec::new(),
        line: 0,
    };
    let mut sc = Scenario::new(0);
    let mut have_n = false;
    let mut section = Section::None;
    let mut node_lines = BTreeMap::new();
    let mut group_lines = Vec::new();
    let mut crash_lines = Vec::new();
    let mut send_lines = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        p.line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if body.starts_with('[') {
            section = match body {
                "[system]" => Section::System,
                "[nodes]" => Section::Nodes,
                "[groups]" => Section::Groups,
                "[net]" => Section::Net,
                "[script]" => Section::Script,
                other => {
                    p.err(format!("unknown section {other}"));
                    Section::None
                }
            };
            continue;
        }
        let mut toks = body.split_whitespace();
        let key = toks.next().unwrap_or("");
        match (section, key) {
            (Section::None, _) => p.err("entry outside of any section"),
            (Section::System, "processes") => {
                if let Some(n) = p.int::<usize>(toks.next(), "process count") {
                    if n == 0 {
                        p.err("process count must be positive");
                    }
                    sc.n = n;
                    have_n = true;
                }
                p.done(&mut toks);
            }
            (Section::System, "policy") => {
                match toks.next() {
                    Some("round_robin") => sc.policy = PolicyKind::RoundRobin,
                    Some("tmr_mains") => sc.policy = PolicyKind::TmrMains,
                    other => p.err(format!("unknown policy {other:?}")),
                }
                p.done(&mut toks);
            }
            (Section::System, "detection_latency") => {
                if let Some(v) = p.int(toks.next(), "detection latency") {
                    sc.detection_latency = v;
                }
                p.done(&mut toks);
            }
            (Section::System, "step_budget") => {
                if let Some(v) = p.int(toks.next(), "step budget") {
                    sc.step_budget = v;
                }
                p.done(&mut toks);
            }
            (Section::Nodes, "node") => {
                let id = p.int::<u32>(toks.next(), "node id");
                if toks.next() != Some("hosts") {
                    p.err("expected `node ID hosts PID...`");
                    continue;
                }
                let mut hosts = Vec::new();
                for t in toks.by_ref() {
                    if let Some(pid) = p.int::<u32>(Some(t), "process id") {
                        hosts.push(ProcessId(pid));
                    }
                }
                if let Some(id) = id {
                    if node_lines.insert(id, p.line).is_some() {
                        p.err(format!("node {id} declared twice"));
                    }
                    sc.nodes.push(NodeDecl {
                        id: NodeId(id),
                        hosts,
                    });
                }
            }
            (Section::Nodes, "link") => {
                let a = p.int::<u32>(toks.next(), "node id");
                let b = p.int::<u32>(toks.next(), "node id");
                p.done(&mut toks);
                if let (Some(a), Some(b)) = (a, b) {
                    sc.links.push((NodeId(a), NodeId(b)));
                }
            }
            (Section::Groups, "group") => {
                let m: Vec<Option<u32>> = (0..3).map(|_| p.int(toks.next(), "node id")).collect();
                p.done(&mut toks);
                if let [Some(a), Some(b), Some(c)] = m[..] {
                    let g = [NodeId(a), NodeId(b), NodeId(c)];
                    if a == b || a == c || b == c {
                        p.err("group members must be distinct");
                    }
                    group_lines.push((g, p.line));
                    sc.groups.push(g);
                }
            }
            (Section::Net, "delay") => {
                match toks.next() {
                    Some("fixed") => {
                        if let Some(d) = p.int(toks.next(), "delay") {
                            sc.net.delay = DelayModel::Fixed(d);
                        }
                    }
                    Some("uniform") => {
                        let lo = p.int(toks.next(), "lower delay");
                        let hi = p.int(toks.next(), "upper delay");
                        if let (Some(lo), Some(hi)) = (lo, hi) {
                            if lo > hi {
                                p.err(format!("empty delay range {lo}..{hi}"));
                            }
                            sc.net.delay = DelayModel::Uniform { lo, hi };
                        }
                    }
                    other => p.err(format!("unknown delay model {other:?}")),
                }
                p.done(&mut toks);
            }
            (Section::Net, "drop") => {
                if let Some(v) = p.prob(toks.next(), "drop rate") {
                    sc.net.drop_rate = v;
                }
                p.done(&mut toks);
            }
            (Section::Net, "duplicate") => {
                if let Some(v) = p.prob(toks.next(), "duplicate rate") {
                    sc.net.duplicate_rate = v;
                }
                p.done(&mut toks);
            }
            (Section::Net, "ack_timeout") => {
                if let Some(v) = p.int(toks.next(), "ack timeout") {
                    sc.net.ack_timeout = v;
                }
                p.done(&mut toks);
            }
            (Section::Net, "retry_limit") => {
                if let Some(v) = p.int(toks.next(), "retry limit") {
                    sc.net.retry_limit = v;
                }
                p.done(&mut toks);
            }
            (Section::Net, "seed") => {
                if let Some(v) = p.int(toks.next(), "seed") {
                    sc.net.seed = v;
                }
                p.done(&mut toks);
            }
            (Section::Script, "at") => {
                let Some(at) = p.int::<u64>(toks.next(), "time") else {
                    continue;
                };
                let action = match toks.next() {
                    Some("send") => {
                        let from = p.int::<u32>(toks.next(), "sender");
                        let to = p.int::<u32>(toks.next(), "receiver");
                        let payload = toks.next().unwrap_or("").to_string();
                        if !valid_payload(&payload) {
                            p.err(format!("payload {payload:?} is not a plain word"));
                        }
                        match (from, to) {
                            (Some(f), Some(t)) => {
                                send_lines.push((f, t, p.line));
                                Some(Action::Send {
                                    from: ProcessId(f),
                                    to: ProcessId(t),
                                    payload,
                                })
                            }
                            _ => None,
                        }
                    }
                    Some("round") => Some(Action::Round),
                    Some("crash") => p.int::<u32>(toks.next(), "node id").map(|id| {
                        crash_lines.push((NodeId(id), p.line));
                        Action::Crash(NodeId(id))
                    }),
                    other => {
                        p.err(format!("unknown action {other:?}"));
                        None
                    }
                };
                p.done(&mut toks);
                if let Some(action) = action {
                    sc.script.push(ScriptEntry { at, action });
                }
            }
            (_, other) => p.err(format!("unknown entry {other:?} in this section")),
        }
    }

    // line-anchored cross references
    if have_n {
        let declared: BTreeSet<NodeId> = sc.hosting().iter().map(|d| d.id).collect();
        for (g, line) in &group_lines {
            for m in g {
                if !declared.contains(m) {
                    p.line = *line;
                    p.err(format!("group member {m} is not a declared node"));
                }
            }
        }
        for &(from, to, line) in &send_lines {
            for pid in [from, to] {
                if pid as usize >= sc.n {
                    p.line = line;
                    p.err(format!("send names unknown process P{pid}"));
                }
            }
        }
        for (node, line) in &crash_lines {
            if !declared.contains(node) {
                p.line = *line;
                p.err(format!("crash of unknown node {node}"));
            }
        }
    } else {
        p.line = 0;
        p.err("missing `processes` in [system]");
    }

    if p.diags.is_empty() {
        p.line = 0;
        for msg in sc.validate() {
            p.err(msg);
        }
    }
    if p.diags.is_empty() {
        Ok(sc)
    } else {
        Err(ParseError(p.diags))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file() {
        let sc = parse_scenario("[system]\nprocesses 3\n").unwrap();
        assert_eq!(sc.n, 3);
        assert!(sc.script.is_empty());
        assert_eq!(sc.hosting().len(), 3);
    }

    #[test]
    fn full_file() {
        let text = "\
[system]
processes 3
policy tmr_mains
detection_latency 7

[nodes]
node 1 hosts 0
node 2 hosts 1
node 3 hosts 2
link 1 2
link 2 3
link 1 3

[groups]
group 1 2 3

[net]
delay uniform 1 4   # jitter
drop 0.05
duplicate 0.1
ack_timeout 12
seed 9

[script]
at 10 send 1 0 hello
at 20 round
at 30 crash 3
";
        let sc = parse_scenario(text).unwrap();
        assert_eq!(sc.policy, PolicyKind::TmrMains);
        assert_eq!(sc.groups, vec![[NodeId(1), NodeId(2), NodeId(3)]]);
        assert_eq!(sc.net.delay, DelayModel::Uniform { lo: 1, hi: 4 });
        assert_eq!(sc.net.seed, 9);
        assert_eq!(sc.script.len(), 3);
        assert_eq!(sc.script[2].action, Action::Crash(NodeId(3)));
        assert_eq!(parse_scenario(&sc.render()).unwrap(), sc);
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let text = "\
[system]
processes 3
[groups]
group 0 1 7
[net]
drop 1.5
[script]
at -4 round
";
        let err = parse_scenario(text).unwrap_err();
        let lines: Vec<usize> = err.0.iter().map(|d| d.line).collect();
        assert_eq!(lines, vec![6, 8, 4]);
        assert!(err.0[0].message.contains("probability"));
        assert!(err.0[1].message.contains("negative"));
        assert!(err.0[2].message.contains("not a declared node"));
    }

    #[test]
    fn unlinked_group_members_rejected() {
        let text = "\
[system]
processes 3
[nodes]
node 0 hosts 0
node 1 hosts 1
node 2 hosts 2
link 0 1
[groups]
group 0 1 2
";
        let err = parse_scenario(text).unwrap_err();
        assert!(err.to_string().contains("not linked"));
    }

    #[test]
    fn unhosted_process_rejected() {
        let text = "[system]\nprocesses 2\n[nodes]\nnode 5 hosts 0\n";
        assert!(parse_scenario(text).unwrap_err().to_string().contains("P1"));
    }
}
